"""Command line: gen-data, pretrain-source, adapt, adapt-online, adapt-seg, eval.

Every RunConfig field is also a flag (``--batch-size 32``); ``--config FILE``
loads key=value defaults that flags then override.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Sequence

from csfda.data import generate, generate_maps, load_dataset, save_dataset
from csfda.engine.config import CONFIG_FIELDS, RunConfig, build_config, read_config_file, segmentation_defaults
from csfda.engine.metrics import write_csv
from csfda.engine.train import (
    TargetStream,
    adapt_offline,
    adapt_online,
    adapt_segmentation,
    evaluate,
    network_from_state,
    pretrain_source,
)
from csfda.errors import (
    ArchitectureMismatch,
    ConfigError,
    DataFormatError,
    DatasetMissing,
    DegenerateSpec,
    NonFiniteValue,
    ShapeMismatch,
    StreamExhausted,
)
from csfda.numkit import load_checkpoint, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("csfda")

COMMANDS = ("gen-data", "pretrain-source", "adapt", "adapt-online", "adapt-seg", "eval")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value file; flags override it")
    common.add_argument("--data", help="dataset file for eval (defaults to --target)")
    common.add_argument("-v", "--verbose", action="store_true")
    for name in CONFIG_FIELDS:
        common.add_argument("--" + name.replace("_", "-"), dest=name, default=None, metavar="VALUE")
    parser = argparse.ArgumentParser(prog="csfda", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        sub.add_parser(cmd, parents=[common])
    return parser


def _config(args: argparse.Namespace) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {name: getattr(args, name) for name in CONFIG_FIELDS}
    kind = overrides.get("kind") or file_values.get("kind")
    base = segmentation_defaults() if args.command == "adapt-seg" or kind == "maps" else RunConfig()
    return build_config(file_values, overrides, base)


def _out(cfg: RunConfig, name: str) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    return os.path.join(cfg.out_dir, name)


def _load_net(cfg: RunConfig):
    if not os.path.exists(cfg.checkpoint):
        raise DatasetMissing(f"checkpoint {cfg.checkpoint} not found")
    return network_from_state(load_checkpoint(cfg.checkpoint), cfg.seed)


def cmd_gen_data(cfg: RunConfig, args) -> None:
    if cfg.kind == "maps":
        source, target = generate_maps(cfg.map_spec())
    else:
        source, target = generate(cfg.dataset_spec())
    for path, ds in ((cfg.source, source), (cfg.target, target)):
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        save_dataset(path, ds)
        print(f"wrote {len(ds)} samples to {path}")


def cmd_pretrain(cfg: RunConfig, args) -> None:
    source = load_dataset(cfg.source)
    net, report = pretrain_source(cfg, source)
    os.makedirs(os.path.dirname(cfg.checkpoint) or ".", exist_ok=True)
    save_checkpoint(cfg.checkpoint, net.state_dict())
    print(f"source validation accuracy {report.best_val_accuracy:.4f} (epoch {report.best_epoch})")
    print(f"checkpoint: {cfg.checkpoint}")


def cmd_adapt(cfg: RunConfig, args) -> None:
    target = load_dataset(cfg.target)
    net = _load_net(cfg)
    before = evaluate(net, target).overall
    result = adapt_offline(cfg, net, target)
    save_checkpoint(_out(cfg, "adapted.ckpt"), result.pair.student.state_dict())
    write_csv(_out(cfg, "metrics.csv"), result.metrics)
    print(f"target accuracy: source-only {before:.4f} -> adapted {result.accuracy:.4f}")
    print(f"metrics: {_out(cfg, 'metrics.csv')}")


def cmd_adapt_online(cfg: RunConfig, args) -> None:
    target = load_dataset(cfg.target)
    net = _load_net(cfg)
    result = adapt_online(cfg, net, TargetStream(target, cfg.batch_size, cfg.seed))
    save_checkpoint(_out(cfg, "online.ckpt"), result.pair.student.state_dict())
    write_csv(_out(cfg, "metrics_online.csv"), result.metrics)
    print(f"first-pass accuracy {result.first_pass_accuracy:.4f}; post-hoc accuracy {result.posthoc_accuracy:.4f}")
    print(f"updates {result.updates} over {result.batches} batches")


def cmd_adapt_seg(cfg: RunConfig, args) -> None:
    target = load_dataset(cfg.target)
    net = _load_net(cfg)
    result = adapt_segmentation(cfg, net, target, (cfg.map_height, cfg.map_width))
    save_checkpoint(_out(cfg, "seg_adapted.ckpt"), result.pair.student.state_dict())
    write_csv(_out(cfg, "metrics_seg.csv"), result.metrics)
    print(f"per-class mean accuracy: source-only {result.source_macro:.4f} -> adapted {result.adapted_macro:.4f}")


def cmd_eval(cfg: RunConfig, args) -> None:
    data = load_dataset(args.data or cfg.target)
    report = evaluate(_load_net(cfg), data)
    print(f"accuracy {report.overall:.4f}")
    print(f"macro {report.macro:.4f}")
    for k, v in report.per_class.items():
        print(f"class {k} {v:.4f}")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain-source": cmd_pretrain,
    "adapt": cmd_adapt,
    "adapt-online": cmd_adapt_online,
    "adapt-seg": cmd_adapt_seg,
    "eval": cmd_eval,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _config(args)
        HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteValue as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetMissing, DataFormatError, DegenerateSpec, ArchitectureMismatch, ShapeMismatch,
            StreamExhausted) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
