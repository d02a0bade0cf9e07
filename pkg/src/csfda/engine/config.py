"""Run configuration: dataclass defaults, key=value files and CLI overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from os import PathLike
from typing import Any, Mapping

from csfda.data import AugmentationPolicy, DatasetSpec, MapSpec, Shift, feature_jitter, gaussian_noise, random_scale
from csfda.errors import ConfigError
from csfda.model import NetworkConfig


@dataclass
class RunConfig:
    # data
    source: str = "out/source.csdt"
    target: str = "out/target.csdt"
    checkpoint: str = "out/source.ckpt"
    out_dir: str = "out"
    kind: str = "ring"  # ring | maps
    num_classes: int = 4
    input_dim: int = 2
    n_source: int = 1200
    n_target: int = 1200
    shift: str = "rotation:45"
    noise_sigma: float = 1.0
    radius: float = 4.0
    map_height: int = 16
    map_width: int = 16
    n_maps: int = 24

    # model
    hidden_dims: tuple[int, ...] = (64, 64)
    bottleneck_dim: int = 32
    proj_hidden: int = 64
    proj_dim: int = 32

    # source training
    source_epochs: int = 30
    source_lr: float = 0.02
    source_batch_size: int = 64
    split_ratio: float = 0.9

    # adaptation
    mode: str = "offline"  # offline | online | segmentation
    method: str = "csfda"  # csfda | all_pseudo
    L: int = 12
    ema_decay: float = 0.98
    batch_size: int = 64
    epochs: int = 30
    lr: float = 5e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    cosine: bool = True
    aug_noise: float = 0.15
    aug_scale: tuple[float, ...] = (0.9, 1.1)
    aug_jitter: float = 0.1

    # curriculum and losses
    alpha: float = 0.005
    beta: float = 1e-4
    mu_r0: float = 1.0
    mu_c0: float = 0.5
    mu_e0: float = 1e-3
    kappa: float = 0.1
    rescue_fraction: float = 0.0
    percentile: float = 55.0

    seed: int = 0

    def validate(self) -> "RunConfig":
        checks = [
            (self.mode in ("offline", "online", "segmentation"), f"unknown mode {self.mode!r}"),
            (self.method in ("csfda", "all_pseudo"), f"unknown method {self.method!r}"),
            (self.kind in ("ring", "maps"), f"unknown dataset kind {self.kind!r}"),
            (self.L >= 2, "L must be at least 2"),
            (0.0 <= self.ema_decay <= 1.0, "ema_decay must lie in [0, 1]"),
            (self.batch_size >= 2, "batch_size must be at least 2"),
            (self.epochs >= 1, "epochs must be positive"),
            (self.lr >= 0, "lr must be non-negative"),
            (0.0 <= self.momentum < 1.0, "momentum must lie in [0, 1)"),
            (0.0 <= self.rescue_fraction <= 1.0, "rescue_fraction must lie in [0, 1]"),
            (0.0 < self.percentile <= 100.0, "percentile must lie in (0, 100]"),
            (self.kappa > 0, "kappa must be positive"),
            (0.0 < self.mu_r0 <= 1.0, "mu_r0 must lie in (0, 1]"),
            (0.0 < self.split_ratio < 1.0, "split_ratio must lie in (0, 1)"),
            (len(self.aug_scale) == 2, "aug_scale needs two values"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    # -- derived objects ---------------------------------------------------
    def network_config(self, num_classes: int | None = None, input_dim: int | None = None) -> NetworkConfig:
        return NetworkConfig(
            input_dim=input_dim or self.input_dim,
            hidden_dims=tuple(self.hidden_dims),
            bottleneck_dim=self.bottleneck_dim,
            num_classes=num_classes or self.num_classes,
            proj_hidden=self.proj_hidden,
            proj_dim=self.proj_dim,
            seed=self.seed,
        )

    def policy(self) -> AugmentationPolicy:
        lo, hi = self.aug_scale
        return AugmentationPolicy(
            (gaussian_noise(self.aug_noise), random_scale(lo, hi), feature_jitter(self.aug_jitter)),
            L=self.L,
            seed=self.seed,
        )

    def dataset_spec(self) -> DatasetSpec:
        try:
            shift = Shift.parse(self.shift)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return DatasetSpec(
            K=self.num_classes, input_dim=self.input_dim, N_s=self.n_source, N_t=self.n_target,
            shift=shift, noise_sigma=self.noise_sigma, radius=self.radius, seed=self.seed,
        )

    def map_spec(self) -> MapSpec:
        try:
            shift = Shift.parse(self.shift)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return MapSpec(
            K=self.num_classes, input_dim=self.input_dim, height=self.map_height, width=self.map_width,
            n_maps=self.n_maps, noise_sigma=self.noise_sigma, shift=shift, seed=self.seed,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def segmentation_defaults(**overrides) -> RunConfig:
    """Dense-map defaults: 2 classes, BN-only updates, slower EMA."""
    base = dict(
        mode="segmentation", kind="maps", num_classes=2, shift="translation:1.5,1.5+scale:1.5",
        ema_decay=0.995, batch_size=4, epochs=3, lr=0.01, L=6, percentile=55.0,
    )
    base.update(overrides)
    return RunConfig(**base).validate()


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def coerce(name: str, raw: Any) -> Any:
    """Convert a textual value to the type of RunConfig field ``name``."""
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    default = _FIELDS[name].default
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return text


def read_config_file(path: str | PathLike) -> dict[str, Any]:
    """Parse a flat ``key = value`` UTF-8 file; ``#`` starts a comment."""
    values: dict[str, Any] = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key = key.strip().replace("-", "_")
        values[key] = coerce(key, value)
    return values


def build_config(file_values: Mapping[str, Any] | None = None, overrides: Mapping[str, Any] | None = None,
                 base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    coerced = {k: coerce(k, v) for k, v in merged.items()}
    return dataclasses.replace(cfg, **coerced).validate()


CONFIG_FIELDS = tuple(_FIELDS)
