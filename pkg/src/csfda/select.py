"""Reliable/unreliable batch partitioning and per-category pixel thresholds."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from csfda.errors import EmptyBatch, EmptySet, ShapeMismatch
from csfda.teacher import TeacherBatch, TeacherStats


@dataclass(frozen=True)
class SelectionThresholds:
    tau_c: float
    tau_u: float


@dataclass(frozen=True)
class ReliabilityPartition:
    r: np.ndarray  # bool [B]
    reliable: np.ndarray  # indices of D_R
    unreliable: np.ndarray  # indices of D_U
    class_weights: dict[int, float]
    rescued: np.ndarray

    @property
    def selected_fraction(self) -> float:
        return len(self.reliable) / len(self.r)


def _columns(stats) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(stats, TeacherBatch):
        return stats.confidence, stats.uncertainty, stats.pseudo_label, stats.doc
    stats = list(stats)
    if stats and not isinstance(stats[0], TeacherStats):
        raise TypeError("expected TeacherBatch or a sequence of TeacherStats")
    return (
        np.array([s.confidence for s in stats], dtype=np.float64),
        np.array([s.uncertainty for s in stats], dtype=np.float64),
        np.array([s.pseudo_label for s in stats], dtype=np.int64),
        np.array([s.doc for s in stats], dtype=np.float64),
    )


def thresholds(stats: TeacherBatch | Sequence[TeacherStats]) -> SelectionThresholds:
    """Batch-mean confidence and batch-mean uncertainty."""
    conf, unc, _, _ = _columns(stats)
    if len(conf) == 0:
        raise EmptyBatch("cannot threshold an empty batch")
    return SelectionThresholds(float(np.mean(conf)), float(np.mean(unc)))


def class_weights(labels) -> dict[int, float]:
    """Inverse-frequency weights normalised so that sum_k w_k * n_k = len(labels)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise EmptySet("no reliable labels to weight")
    classes, counts = np.unique(labels, return_counts=True)
    n, k_present = labels.size, len(classes)
    return {int(k): n / (k_present * int(c)) for k, c in zip(classes, counts)}


def reliability_scores(conf: np.ndarray, unc: np.ndarray, thr: SelectionThresholds) -> np.ndarray:
    return (conf >= thr.tau_c) & (unc <= thr.tau_u)


def partition(stats: TeacherBatch | Sequence[TeacherStats], thr: SelectionThresholds,
              rescue_fraction: float = 0.0) -> ReliabilityPartition:
    """Split a batch into D_R / D_U, then rescue high-DoC samples from D_U.

    Every pseudo-class present in the batch but missing from D_R gets its
    highest-DoC member moved over; then the top ``ceil(rescue_fraction *
    |D_U|)`` remaining D_U samples by DoC follow.  Ties in DoC go to the
    lower batch index.
    """
    conf, unc, label, doc = _columns(stats)
    if not 0.0 <= rescue_fraction <= 1.0:
        raise ValueError("rescue_fraction must lie in [0, 1]")
    r = reliability_scores(conf, unc, thr)
    base_unreliable = np.flatnonzero(~r)
    rescued: list[int] = []

    present_reliable = set(label[r].tolist())
    for k in sorted(set(label.tolist()) - present_reliable):
        members = base_unreliable[label[base_unreliable] == k]
        # argmax picks the first maximum, i.e. the lowest index on ties
        best = int(members[np.argmax(doc[members])])
        rescued.append(best)
        r[best] = True

    n_extra = math.ceil(rescue_fraction * len(base_unreliable))
    if n_extra:
        left = np.flatnonzero(~r)
        order = left[np.lexsort((left, -doc[left]))]
        extra = order[:n_extra]
        rescued.extend(int(i) for i in extra)
        r[extra] = True

    reliable = np.flatnonzero(r)
    weights = class_weights(label[reliable]) if len(reliable) else {}
    return ReliabilityPartition(r, reliable, np.flatnonzero(~r), weights, np.array(rescued, dtype=np.intp))


# ---------------------------------------------------------------------------
# dense-map variant
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SegThresholds:
    tau_c: np.ndarray  # [K]
    tau_u: np.ndarray  # [K]
    P: float

    @property
    def K(self) -> int:
        return len(self.tau_c)


def percentile_nearest_rank(values: np.ndarray, P: float) -> float:
    """The ceil(P/100 * n)-th smallest value (1-based)."""
    values = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if values.size == 0:
        raise EmptySet("percentile of an empty set")
    rank = max(1, math.ceil(P / 100.0 * values.size - 1e-12))
    return float(values[min(rank, values.size) - 1])


def seg_thresholds(pmap: np.ndarray, uncertainty: np.ndarray, P: float = 55.0) -> SegThresholds:
    """Per-class P-th percentile of confidence and of uncertainty.

    ``pmap`` is ``[..., K]`` class probabilities and ``uncertainty`` matches
    its leading shape.  Classes that no pixel is assigned to get an infinite
    confidence threshold so nothing of that class is ever selected.
    """
    pmap = np.asarray(pmap, dtype=np.float64)
    uncertainty = np.asarray(uncertainty, dtype=np.float64)
    if not 0.0 < P <= 100.0:
        raise ValueError("P must lie in (0, 100]")
    if pmap.shape[:-1] != uncertainty.shape:
        raise ShapeMismatch(f"pmap {pmap.shape} vs uncertainty {uncertainty.shape}")
    K = pmap.shape[-1]
    flat = pmap.reshape(-1, K)
    unc = uncertainty.reshape(-1)
    label = np.argmax(flat, axis=1)
    conf = flat.max(axis=1)
    tau_c = np.full(K, np.inf)
    tau_u = np.full(K, -np.inf)
    for k in range(K):
        members = label == k
        if members.any():
            tau_c[k] = percentile_nearest_rank(conf[members], P)
            tau_u[k] = percentile_nearest_rank(unc[members], P)
    return SegThresholds(tau_c, tau_u, P)


def seg_partition(pmap: np.ndarray, uncertainty: np.ndarray, thr: SegThresholds) -> np.ndarray:
    """Per-pixel reliability mask with the same leading shape as ``pmap``."""
    pmap = np.asarray(pmap, dtype=np.float64)
    uncertainty = np.asarray(uncertainty, dtype=np.float64)
    if pmap.shape[:-1] != uncertainty.shape or pmap.shape[-1] != thr.K:
        raise ShapeMismatch(f"pmap {pmap.shape}, uncertainty {uncertainty.shape}, K={thr.K}")
    label = np.argmax(pmap, axis=-1)
    conf = pmap.max(axis=-1)
    return (conf >= thr.tau_c[label]) & (uncertainty <= thr.tau_u[label])
