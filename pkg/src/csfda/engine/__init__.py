"""Training orchestration, metrics, configuration and the command line."""

from csfda.engine.config import RunConfig, build_config, read_config_file, segmentation_defaults
from csfda.engine.metrics import CSV_COLUMNS, MetricsRecord, read_csv, slope, to_csv, write_csv
from csfda.engine.train import (
    AccuracyReport,
    AdaptResult,
    OnlineResult,
    SegResult,
    SourceReport,
    TargetStream,
    adapt_offline,
    adapt_online,
    adapt_segmentation,
    adaptation_step,
    evaluate,
    network_from_state,
    pretrain_source,
)

__all__ = [
    "CSV_COLUMNS",
    "AccuracyReport",
    "AdaptResult",
    "MetricsRecord",
    "OnlineResult",
    "RunConfig",
    "SegResult",
    "SourceReport",
    "TargetStream",
    "adapt_offline",
    "adapt_online",
    "adapt_segmentation",
    "adaptation_step",
    "build_config",
    "evaluate",
    "network_from_state",
    "pretrain_source",
    "read_config_file",
    "read_csv",
    "segmentation_defaults",
    "slope",
    "to_csv",
    "write_csv",
]
