import math

import numpy as np
import pytest

from csfda.data import Dataset, generate, generate_maps, load_dataset, save_dataset
from csfda.engine import (
    CSV_COLUMNS,
    MetricsRecord,
    RunConfig,
    TargetStream,
    adapt_offline,
    adapt_online,
    adapt_segmentation,
    build_config,
    evaluate,
    network_from_state,
    pretrain_source,
    read_config_file,
    read_csv,
    segmentation_defaults,
    slope,
    to_csv,
)
from csfda.engine.cli import main
from csfda.engine.metrics import format_value
from csfda.errors import ConfigError, StreamExhausted
from csfda.model import Network, NetworkConfig
from csfda.numkit import load_checkpoint
from csfda.teacher import batch_stats

SMALL = RunConfig(n_source=320, n_target=320, source_epochs=4, epochs=2, L=4, batch_size=32)


@pytest.fixture(scope="module")
def small():
    source, target = generate(SMALL.dataset_spec())
    net, report = pretrain_source(SMALL, source)
    return SMALL, source, target, net


def _params(net):
    return {k: v.copy() for k, v in net.state_dict().items()}


# -- source training -----------------------------------------------------------

def test_pretrain_deterministic(small):
    cfg, source, _, net = small
    again, _ = pretrain_source(cfg, source)
    a, b = net.state_dict(), again.state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_zero_shift_source_validation_accuracy():
    cfg = RunConfig(shift="rotation:0")
    source, target = generate(cfg.dataset_spec())
    net, report = pretrain_source(cfg, source)
    assert report.best_val_accuracy >= 0.95
    assert evaluate(net, target).overall == pytest.approx(evaluate(net, source).overall, abs=0.03)


def test_network_from_checkpoint_state(small):
    _, _, target, net = small
    rebuilt = network_from_state(net.state_dict())
    np.testing.assert_array_equal(evaluate(rebuilt, target).predictions, evaluate(net, target).predictions)


# -- offline -------------------------------------------------------------------------

def test_offline_metrics_shape_and_determinism(small):
    cfg, _, target, net = small
    a = adapt_offline(cfg, net, target)
    b = adapt_offline(cfg, net, target)
    assert to_csv(a.metrics) == to_csv(b.metrics)
    assert len(a.metrics) == cfg.epochs * (len(target) // cfg.batch_size) == a.updates
    assert [m.iter for m in a.metrics] == list(range(len(a.metrics)))
    assert sum(not math.isnan(m.acc) for m in a.metrics) == cfg.epochs
    for m in a.metrics:
        assert 0 < m.sel_frac <= 1 and m.l_ce >= 0 and m.l_prop >= 0 and m.l_con >= 0
    # the source network is untouched
    assert evaluate(net, target).overall == evaluate(network_from_state(net.state_dict()), target).overall


def test_frozen_teacher_keeps_pseudo_labels(small):
    cfg, _, target, net = small
    cfg = cfg.replace(ema_decay=1.0)
    result = adapt_offline(cfg, net, target)
    policy = cfg.policy()
    before = batch_stats(net, target, policy, epoch=0).pseudo_label
    after = batch_stats(result.pair.teacher, target, policy, epoch=0).pseudo_label
    np.testing.assert_array_equal(before, after)
    assert not np.array_equal(result.pair.student.state_dict()["cls.w"], net.state_dict()["cls.w"])


def test_all_pseudo_baseline_uses_every_sample(small):
    cfg, _, target, net = small
    result = adapt_offline(cfg.replace(method="all_pseudo"), net, target)
    for m in result.metrics:
        assert m.sel_frac == 1.0 and m.l_prop == 0.0 and m.l_con == 0.0 and m.mu_r == 1.0 and m.mu_c == 0.0


def test_loss_uses_curriculum_before_step(small):
    cfg, _, target, net = small
    m = adapt_offline(cfg, net, target).metrics
    assert m[0].mu_r == cfg.mu_r0 and m[0].mu_c == cfg.mu_c0
    assert m[1].mu_c == pytest.approx(cfg.mu_c0 * math.exp(-cfg.beta))


def test_no_peeking(small):
    cfg, _, target, net = small
    labeled = adapt_offline(cfg, net, target)
    blind = adapt_offline(cfg, net, target.without_labels())
    for a, b in zip(labeled.metrics, blind.metrics):
        for col in CSV_COLUMNS:
            if col in ("pl_acc", "acc"):
                assert math.isnan(getattr(b, col))
            else:
                assert format_value(getattr(a, col)) == format_value(getattr(b, col))
    sa, sb = labeled.pair.student.state_dict(), blind.pair.student.state_dict()
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


# -- online ------------------------------------------------------------------------------

def test_target_stream_contract(small):
    _, _, target, _ = small
    stream = TargetStream(target.subset(np.arange(65)), 32, seed=1)
    sizes = [len(b) for b in stream]
    assert sizes == [32, 33]
    assert stream.delivered.tolist() == [1] * 65
    with pytest.raises(StreamExhausted):
        stream.next_batch()


def test_online_single_pass_and_reproducible(small):
    cfg, _, target, net = small
    a = adapt_online(cfg, net, TargetStream(target, cfg.batch_size, seed=0))
    b = adapt_online(cfg, net, TargetStream(target, cfg.batch_size, seed=0))
    c = adapt_online(cfg, net, TargetStream(target, cfg.batch_size, seed=1))
    assert a.updates == a.batches == len(a.metrics) == math.ceil(len(target) / cfg.batch_size)
    assert max(a.touches.values()) <= cfg.L + 3
    assert set(a.touches) == set(target.index.tolist())
    assert to_csv(a.metrics) == to_csv(b.metrics)
    assert to_csv(a.metrics) != to_csv(c.metrics)


def test_online_not_better_than_offline(benchmark_run):
    cfg, target, net = benchmark_run["cfg"], benchmark_run["target"], benchmark_run["net"]
    online = adapt_online(cfg, net, TargetStream(target, cfg.batch_size, cfg.seed))
    assert online.first_pass_accuracy == pytest.approx(0.57416667, abs=0.01)
    assert online.first_pass_accuracy <= benchmark_run["csfda"].accuracy


# -- segmentation -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def seg():
    cfg = segmentation_defaults()
    source, target = generate_maps(cfg.map_spec())
    net, _ = pretrain_source(cfg, source)
    return cfg, target, net


def test_segmentation_bn_only_and_improves(seg):
    cfg, target, net = seg
    before = _params(net)
    result = adapt_segmentation(cfg, net, target, (cfg.map_height, cfg.map_width))
    after = result.pair.student.state_dict()
    changed = {k for k in before if before[k].tobytes() != after[k].tobytes()}
    assert changed and all(k.startswith("bn.") for k in changed)
    assert {k for k in changed if not k.endswith((".mean", ".var"))} <= \
        {k for k in after if k.endswith((".scale", ".shift"))}
    assert result.source_macro == pytest.approx(0.73209635, abs=0.01)
    assert result.adapted_macro == pytest.approx(0.93261719, abs=0.01)
    assert result.adapted_macro >= result.source_macro
    assert all(math.isnan(m.l_ent) is False and m.l_ent >= 0 for m in result.metrics)


def test_segmentation_p100_selects_almost_nothing(seg):
    cfg, target, net = seg
    result = adapt_segmentation(cfg.replace(percentile=100.0), net, target, (cfg.map_height, cfg.map_width))
    assert np.mean([m.sel_frac for m in result.metrics]) < 0.01
    assert np.mean([m.l_ce for m in result.metrics]) < 1e-3


# -- evaluation ----------------------------------------------------------------------------

def test_evaluate_perfect_oracle():
    net = Network(NetworkConfig(input_dim=2, num_classes=2, hidden_dims=(4,), bottleneck_dim=2))
    state = net.state_dict()
    for k in state:
        if k.endswith((".w", ".b", ".shift", ".mean")):
            state[k] = np.zeros_like(state[k])
        elif k.endswith((".scale", ".var")):
            state[k] = np.ones_like(state[k]) - (1e-5 if k.endswith(".var") else 0)
    # route x0 straight through: relu(x0), relu(-x0) -> logits (+, -)
    state["g.0.w"][0, 0], state["g.0.w"][0, 1] = 1.0, -1.0
    state["neck.w"][0, 0], state["neck.w"][1, 1] = 1.0, 1.0
    state["cls.w"][0, 0], state["cls.w"][1, 1] = -1.0, -1.0
    state["cls.w"][0, 1], state["cls.w"][1, 0] = 1.0, 1.0
    net.load_state_dict(state)
    r = np.random.default_rng(0)
    x = np.column_stack([r.choice([-2.0, 2.0], 200), r.normal(size=200)])
    ds = Dataset(x, (x[:, 0] > 0).astype(int), np.arange(200), 2)
    report = evaluate(net, ds)
    assert report.overall == 1.0 and report.per_class == {0: 1.0, 1: 1.0}


def test_evaluate_random_classifier_and_macro():
    K, n = 4, 4000
    r = np.random.default_rng(5)
    ds = Dataset(r.normal(size=(n, 2)), r.integers(0, K, n), np.arange(n), K)
    # a fresh network's labels are independent of these random labels
    report = evaluate(Network(NetworkConfig(seed=9)), ds)
    sigma = math.sqrt((1 / K) * (1 - 1 / K) / n)
    assert abs(report.overall - 1 / K) <= 3 * sigma
    assert report.macro == pytest.approx(np.mean(list(report.per_class.values())))


# -- metrics and config --------------------------------------------------------------------

def test_csv_format():
    rec = MetricsRecord(iter=3, tau_c=0.123456789012, tau_u=1e-12, sel_frac=0.5, pl_acc=float("nan"),
                        l_ce=1.0, l_prop=0.0, l_con=2.0, l_ent=float("nan"), l_total=3.0, mu_r=1.0,
                        mu_c=0.5, acc=float("nan"))
    lines = to_csv([rec]).splitlines()
    assert lines[0] == "iter,tau_c,tau_u,sel_frac,pl_acc,l_ce,l_prop,l_con,l_ent,l_total,mu_r,mu_c,acc"
    assert lines[1] == "3,0.123456789,1e-12,0.5,nan,1,0,2,nan,3,1,0.5,nan"


def test_slope_ignores_nan():
    assert slope([1.0, float("nan"), 3.0, 4.0]) == pytest.approx(1.0)


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nbatch_size = 16\nlr=0.5  # trailing\nhidden-dims = 8,8\ncosine = false\n",
                    encoding="utf-8")
    values = read_config_file(path)
    cfg = build_config(values, {"lr": "0.25", "epochs": None})
    assert cfg.batch_size == 16 and cfg.lr == 0.25 and cfg.hidden_dims == (8, 8) and cfg.cosine is False
    assert cfg.epochs == RunConfig().epochs
    with pytest.raises(ConfigError):
        build_config({"batch_size": 0})
    with pytest.raises(ConfigError):
        build_config({"no_such_key": 1})


# -- command line --------------------------------------------------------------------------

def _cli_args(tmp_path, extra=()):
    return ["--source", str(tmp_path / "s.csdt"), "--target", str(tmp_path / "t.csdt"),
            "--checkpoint", str(tmp_path / "src.ckpt"), "--out-dir", str(tmp_path / "out"),
            "--n-source", "200", "--n-target", "200", "--source-epochs", "2", "--epochs", "1",
            "--L", "3", "--batch-size", "32", *extra]


def test_cli_end_to_end(tmp_path, capsys):
    args = _cli_args(tmp_path)
    for cmd in ("gen-data", "pretrain-source", "adapt", "adapt-online", "eval"):
        assert main([cmd, *args]) == 0, cmd
    out = tmp_path / "out"
    for name in ("adapted.ckpt", "metrics.csv", "online.ckpt", "metrics_online.csv"):
        assert (out / name).exists()
    cols = read_csv(out / "metrics.csv")
    assert list(cols) == list(CSV_COLUMNS)
    assert "accuracy" in capsys.readouterr().out
    assert set(load_checkpoint(out / "adapted.ckpt")) == set(load_checkpoint(tmp_path / "src.ckpt"))
    assert len(load_dataset(tmp_path / "t.csdt")) == 200


def test_cli_segmentation(tmp_path):
    args = ["--source", str(tmp_path / "s.csdt"), "--target", str(tmp_path / "t.csdt"),
            "--checkpoint", str(tmp_path / "src.ckpt"), "--out-dir", str(tmp_path / "out"),
            "--kind", "maps", "--n-maps", "4", "--source-epochs", "2", "--epochs", "1"]
    for cmd in ("gen-data", "pretrain-source", "adapt-seg"):
        assert main([cmd, *args]) == 0, cmd
    assert (tmp_path / "out" / "metrics_seg.csv").exists()


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["adapt", *_cli_args(tmp_path, ["--batch-size", "0"])]) == 2
    assert main(["adapt", *_cli_args(tmp_path)]) == 3
    (tmp_path / "bad.cfg").write_text("nonsense line\n")
    assert main(["eval", "--config", str(tmp_path / "bad.cfg")]) == 2
    assert "error" in capsys.readouterr().err


def test_cli_numerical_failure_exit_code(tmp_path):
    args = _cli_args(tmp_path)
    assert main(["gen-data", *args]) == 0
    assert main(["pretrain-source", *args]) == 0
    huge = Dataset(np.full((4, 2), 1e308), [0, 1, 2, 3], np.arange(4), 4)
    save_dataset(tmp_path / "huge.csdt", huge)
    assert main(["eval", *args, "--data", str(tmp_path / "huge.csdt")]) == 4
