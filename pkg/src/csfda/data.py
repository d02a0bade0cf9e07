"""Synthetic domain-shift benchmarks, augmentation policies and dataset files.

Source data is a ring of K unit-variance Gaussian clusters; the target is
drawn by the same pipeline and then pushed through a feature-space shift.
Augmentation noise is drawn from a counter-based hash keyed by
``(seed, sample index, slot, epoch, stream)`` so that a view never depends
on iteration order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from os import PathLike
from typing import Iterator, Sequence

import numpy as np

from csfda.errors import DataFormatError, DatasetMissing, DegenerateSpec

UNLABELED = np.uint32(0xFFFFFFFF)
DATASET_MAGIC = b"CSDT"


# ---------------------------------------------------------------------------
# shifts and dataset spec
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Shift:
    """One feature-space transform. ``kind`` is rotation, translation or scale."""

    kind: str
    angle: float = 0.0  # degrees, rotation in the plane of the first two features
    vector: tuple[float, ...] = ()
    factor: float = 1.0

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = x.copy()
        if self.kind == "rotation":
            t = math.radians(self.angle)
            c, s = math.cos(t), math.sin(t)
            a, b = x[:, 0].copy(), x[:, 1].copy()
            x[:, 0] = c * a - s * b
            x[:, 1] = s * a + c * b
        elif self.kind == "translation":
            v = np.zeros(x.shape[1])
            v[: len(self.vector)] = self.vector
            x += v
        elif self.kind == "scale":
            x *= self.factor
        else:
            raise DegenerateSpec(f"unknown shift kind {self.kind!r}")
        return x

    @classmethod
    def parse(cls, text: str) -> "Shift | tuple[Shift, ...]":
        """Parse ``rotation:45``, ``translation:1,0``, ``scale:1.5`` or ``a+b`` composites."""
        parts = [p.strip() for p in text.split("+") if p.strip()]
        shifts = []
        for part in parts:
            kind, _, arg = part.partition(":")
            kind = kind.strip().lower()
            try:
                if kind == "rotation":
                    shifts.append(cls("rotation", angle=float(arg or 0.0)))
                elif kind == "translation":
                    shifts.append(cls("translation", vector=tuple(float(v) for v in arg.split(","))))
                elif kind == "scale":
                    shifts.append(cls("scale", factor=float(arg)))
                elif kind == "none":
                    shifts.append(cls("rotation", angle=0.0))
                else:
                    raise DegenerateSpec(f"unknown shift {part!r}")
            except ValueError as exc:
                raise DegenerateSpec(f"bad shift argument in {part!r}") from exc
        if not shifts:
            raise DegenerateSpec("empty shift description")
        return shifts[0] if len(shifts) == 1 else tuple(shifts)


def apply_shift(x: np.ndarray, shift) -> np.ndarray:
    shifts = shift if isinstance(shift, tuple) else (shift,)
    for s in shifts:
        x = s.apply(x)
    return x


@dataclass(frozen=True)
class DatasetSpec:
    name: str = "ring"
    K: int = 4
    input_dim: int = 2
    N_s: int = 1200
    N_t: int = 1200
    shift: Shift | tuple[Shift, ...] = Shift("rotation", angle=45.0)
    noise_sigma: float = 1.0
    radius: float = 4.0
    seed: int = 0

    def validate(self) -> None:
        if self.K < 2:
            raise DegenerateSpec("need at least two classes")
        if self.input_dim < 2:
            raise DegenerateSpec("input_dim must be at least 2")
        if self.N_s < 10 * self.K or self.N_t < 10 * self.K:
            raise DegenerateSpec("each domain needs at least 10 samples per class")
        if self.noise_sigma < 0 or self.radius <= 0:
            raise DegenerateSpec("noise_sigma must be >= 0 and radius > 0")


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: int | None
    index: int


@dataclass
class Dataset:
    """Column-oriented sample store; ``y`` is -1 where the label is withheld."""

    x: np.ndarray
    y: np.ndarray
    index: np.ndarray
    K: int

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.index = np.asarray(self.index, dtype=np.uint64)
        if self.x.ndim != 2 or len(self.y) != len(self.x) or len(self.index) != len(self.x):
            raise DataFormatError("inconsistent dataset columns")
        if not np.all(np.isfinite(self.x)):
            raise DataFormatError("non-finite features")
        if np.any(self.y >= self.K) or np.any(self.y < -1):
            raise DataFormatError("label out of range")

    def __len__(self) -> int:
        return len(self.x)

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Sample:
        y = int(self.y[i])
        return Sample(self.x[i], None if y < 0 else y, int(self.index[i]))

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]

    @property
    def has_labels(self) -> bool:
        return bool(np.all(self.y >= 0))

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=np.intp)
        return Dataset(self.x[rows], self.y[rows], self.index[rows], self.K)

    def without_labels(self) -> "Dataset":
        return Dataset(self.x, np.full(len(self), -1), self.index, self.K)


def ring_means(K: int, input_dim: int, radius: float) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(K) / K
    means = np.zeros((K, input_dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def _balanced_labels(rng: np.random.Generator, n: int, K: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % K)


def _draw_domain(rng: np.random.Generator, n: int, spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    y = _balanced_labels(rng, n, spec.K)
    means = ring_means(spec.K, spec.input_dim, spec.radius)
    x = means[y] + spec.noise_sigma * rng.standard_normal((n, spec.input_dim))
    return x, y


def generate(spec: DatasetSpec) -> tuple[Dataset, Dataset]:
    """Draw (source, target) for ``spec``; the target gets ``spec.shift`` applied."""
    spec.validate()
    src_rng = np.random.default_rng([spec.seed, 0])
    tgt_rng = np.random.default_rng([spec.seed, 1])
    xs, ys = _draw_domain(src_rng, spec.N_s, spec)
    xt, yt = _draw_domain(tgt_rng, spec.N_t, spec)
    xt = apply_shift(xt, spec.shift)
    source = Dataset(xs, ys, np.arange(spec.N_s), spec.K)
    target = Dataset(xt, yt, np.arange(spec.N_t), spec.K)
    return source, target


def split_source(source: Dataset, ratio: float = 0.9, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified train/validation split with largest-remainder rounding."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    rng = np.random.default_rng([seed, 2])
    classes = np.unique(source.y)
    counts = np.array([(source.y == k).sum() for k in classes])
    exact = ratio * counts
    take = np.floor(exact).astype(int)
    remaining = int(round(ratio * len(source))) - take.sum()
    order = np.argsort(-(exact - take), kind="stable")
    take[order[:remaining]] += 1
    train_rows, val_rows = [], []
    for k, n_k in zip(classes, take):
        rows = rng.permutation(np.flatnonzero(source.y == k))
        train_rows.append(rows[:n_k])
        val_rows.append(rows[n_k:])
    train = np.sort(np.concatenate(train_rows))
    val = np.sort(np.concatenate(val_rows))
    return source.subset(train), source.subset(val)


# ---------------------------------------------------------------------------
# segmentation maps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MapSpec:
    """Checkerboard label maps whose pixels carry class-cluster features."""

    K: int = 2
    input_dim: int = 2
    height: int = 16
    width: int = 16
    block: int = 4
    n_maps: int = 24
    separation: float = 3.0
    noise_sigma: float = 1.0
    shift: Shift | tuple[Shift, ...] = (Shift("translation", vector=(1.5, 1.5)), Shift("scale", factor=1.5))
    seed: int = 0


def _checkerboard(spec: MapSpec, rng: np.random.Generator) -> np.ndarray:
    di, dj = rng.integers(0, spec.block, size=2)
    ii = (np.arange(spec.height)[:, None] + di) // spec.block
    jj = (np.arange(spec.width)[None, :] + dj) // spec.block
    return ((ii + jj) % spec.K).astype(np.int64)


def generate_maps(spec: MapSpec) -> tuple[Dataset, Dataset]:
    """Return (source, target) pixel datasets; rows are map-major, row-major pixels."""
    if spec.K < 2:
        raise DegenerateSpec("need at least two classes")
    means = np.zeros((spec.K, spec.input_dim))
    angles = 2.0 * np.pi * np.arange(spec.K) / spec.K
    means[:, 0] = spec.separation / 2 * np.cos(angles)
    means[:, 1] = spec.separation / 2 * np.sin(angles)
    out = []
    for domain in (0, 1):
        rng = np.random.default_rng([spec.seed, 10 + domain])
        ys = np.stack([_checkerboard(spec, rng) for _ in range(spec.n_maps)]).reshape(-1)
        x = means[ys] + spec.noise_sigma * rng.standard_normal((len(ys), spec.input_dim))
        if domain == 1:
            x = apply_shift(x, spec.shift)
        out.append(Dataset(x, ys, np.arange(len(ys)), spec.K))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, vectorized."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def keyed_uniform(seed: int, index: np.ndarray, slot: int, epoch: int, stream: int, n_draws: int) -> np.ndarray:
    """Uniform(0,1) draws of shape [len(index), n_draws] that depend only on the key."""
    index = np.asarray(index, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = _mix64(np.full(1, np.uint64(seed & 0xFFFFFFFFFFFFFFFF)) + np.uint64(0x9E3779B97F4A7C15))
        for part in (slot, epoch, stream):
            h = _mix64(h ^ np.uint64(part & 0xFFFFFFFFFFFFFFFF) + np.uint64(0x9E3779B97F4A7C15))
        base = _mix64(h ^ _mix64(index + np.uint64(0x632BE59BD9B4E019)))
        ctr = np.arange(1, n_draws + 1, dtype=np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        bits = _mix64(base[:, None] + ctr[None, :])
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def keyed_normal(seed, index, slot, epoch, stream, n_draws) -> np.ndarray:
    """Box-Muller normals on top of :func:`keyed_uniform`."""
    half = (n_draws + 1) // 2
    u = keyed_uniform(seed, index, slot, epoch, stream, 2 * half)
    r = np.sqrt(-2.0 * np.log(u[:, :half]))
    t = 2.0 * np.pi * u[:, half:]
    return np.concatenate([r * np.cos(t), r * np.sin(t)], axis=1)[:, :n_draws]


@dataclass(frozen=True)
class Transform:
    kind: str  # gaussian_noise | random_scale | feature_jitter | random_rotation
    magnitude: tuple[float, ...]


def gaussian_noise(sigma: float) -> Transform:
    return Transform("gaussian_noise", (sigma,))


def random_scale(low: float, high: float) -> Transform:
    return Transform("random_scale", (low, high))


def feature_jitter(amount: float) -> Transform:
    return Transform("feature_jitter", (amount,))


def random_rotation(max_degrees: float) -> Transform:
    return Transform("random_rotation", (max_degrees,))


@dataclass(frozen=True)
class AugmentationPolicy:
    transforms: tuple[Transform, ...] = field(
        default_factory=lambda: (gaussian_noise(0.15), random_scale(0.9, 1.1), feature_jitter(0.1))
    )
    L: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.L < 2:
            raise ValueError("uncertainty estimation needs L >= 2")

    @classmethod
    def identity(cls, L: int = 12, seed: int = 0) -> "AugmentationPolicy":
        return cls((gaussian_noise(0.0), random_scale(1.0, 1.0), feature_jitter(0.0)), L, seed)


def augment_batch(x: np.ndarray, index: np.ndarray, policy: AugmentationPolicy, slot: int,
                  epoch: int = 0, stream: int = 0) -> np.ndarray:
    """Augmented copy of every row of ``x`` for one slot."""
    x = np.array(x, dtype=np.float64, copy=True)
    n, d = x.shape
    for t_no, t in enumerate(policy.transforms):
        sub = stream * 64 + t_no
        if t.kind == "gaussian_noise":
            if t.magnitude[0]:
                x += t.magnitude[0] * keyed_normal(policy.seed, index, slot, epoch, sub, d)
        elif t.kind == "random_scale":
            lo, hi = t.magnitude
            if lo != 1.0 or hi != 1.0:
                u = keyed_uniform(policy.seed, index, slot, epoch, sub, 1)
                x *= lo + (hi - lo) * u
        elif t.kind == "feature_jitter":
            if t.magnitude[0]:
                u = keyed_uniform(policy.seed, index, slot, epoch, sub, d)
                x += t.magnitude[0] * (2.0 * u - 1.0)
        elif t.kind == "random_rotation":
            if t.magnitude[0]:
                u = keyed_uniform(policy.seed, index, slot, epoch, sub, 1)[:, 0]
                ang = np.radians(t.magnitude[0] * (2.0 * u - 1.0))
                c, s = np.cos(ang), np.sin(ang)
                a, b = x[:, 0].copy(), x[:, 1].copy()
                x[:, 0] = c * a - s * b
                x[:, 1] = s * a + c * b
        else:
            raise ValueError(f"unknown transform {t.kind!r}")
    return x


def augment(sample: Sample, policy: AugmentationPolicy, slot: int, epoch: int = 0, stream: int = 0) -> np.ndarray:
    if not 0 <= slot < policy.L:
        raise ValueError(f"slot {slot} outside [0, {policy.L})")
    return augment_batch(sample.x[None, :], np.array([sample.index]), policy, slot, epoch, stream)[0]


def augment_views(x: np.ndarray, index: np.ndarray, policy: AugmentationPolicy,
                  slots: Sequence[int], epoch: int = 0, stream: int = 0) -> np.ndarray:
    """Stack of views, shape [len(slots), batch, dim]."""
    return np.stack([augment_batch(x, index, policy, s, epoch, stream) for s in slots])


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def _record_dtype(d: int) -> np.dtype:
    return np.dtype([("index", "<u8"), ("y", "<u4"), ("x", "<f8", (d,))])


def save_dataset(path: str | PathLike, ds: Dataset) -> None:
    rec = np.zeros(len(ds), dtype=_record_dtype(ds.input_dim))
    rec["index"] = ds.index
    rec["y"] = np.where(ds.y < 0, UNLABELED, ds.y).astype(np.uint32)
    rec["x"] = ds.x
    header = DATASET_MAGIC + struct.pack("<IIQ", ds.K, ds.input_dim, len(ds))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def load_dataset(path: str | PathLike) -> Dataset:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except FileNotFoundError as exc:
        raise DatasetMissing(f"dataset file not found: {path}") from exc
    if buf[:4] != DATASET_MAGIC:
        raise DataFormatError(f"{path}: not a dataset file (bad magic)")
    K, d, count = struct.unpack_from("<IIQ", buf, 4)
    dtype = _record_dtype(d)
    if len(buf) != 20 + count * dtype.itemsize:
        raise DataFormatError(f"{path}: size does not match header")
    rec = np.frombuffer(buf, dtype=dtype, count=count, offset=20)
    y = rec["y"].astype(np.int64)
    y[rec["y"] == UNLABELED] = -1
    return Dataset(rec["x"].copy(), y, rec["index"].copy(), K)
