"""Augmentation-averaged pseudo-labels and per-sample reliability statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from csfda.data import AugmentationPolicy, Dataset, Sample, augment_views
from csfda.errors import EmptyBatch, NonFiniteValue, ShapeMismatch
from csfda.model import ModelPair, Network


@dataclass(frozen=True)
class TeacherStats:
    per_aug_probs: np.ndarray  # [L, K]
    avg_probs: np.ndarray  # [K]
    pseudo_label: int
    confidence: float
    uncertainty: float
    doc: float

    @property
    def one_hot(self) -> np.ndarray:
        out = np.zeros_like(self.avg_probs)
        out[self.pseudo_label] = 1.0
        return out


@dataclass(frozen=True)
class TeacherBatch:
    """Column form of a batch of :class:`TeacherStats`."""

    per_aug_probs: np.ndarray  # [L, B, K]
    avg_probs: np.ndarray  # [B, K]
    pseudo_label: np.ndarray  # [B]
    confidence: np.ndarray  # [B]
    uncertainty: np.ndarray  # [B]
    doc: np.ndarray  # [B]

    def __len__(self) -> int:
        return len(self.pseudo_label)

    def __getitem__(self, i: int) -> TeacherStats:
        return TeacherStats(
            self.per_aug_probs[:, i],
            self.avg_probs[i],
            int(self.pseudo_label[i]),
            float(self.confidence[i]),
            float(self.uncertainty[i]),
            float(self.doc[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def num_classes(self) -> int:
        return self.avg_probs.shape[1]

    def one_hot(self) -> np.ndarray:
        return np.eye(self.num_classes)[self.pseudo_label]

    def subset(self, rows) -> "TeacherBatch":
        rows = np.asarray(rows, dtype=np.intp)
        return TeacherBatch(
            self.per_aug_probs[:, rows], self.avg_probs[rows], self.pseudo_label[rows],
            self.confidence[rows], self.uncertainty[rows], self.doc[rows],
        )


def stats_from_probs(per_aug: np.ndarray) -> TeacherBatch:
    """Reduce per-augmentation probabilities ``[L, B, K]`` to teacher statistics."""
    per_aug = np.asarray(per_aug, dtype=np.float64)
    if per_aug.ndim != 3:
        raise ShapeMismatch(f"expected [L, B, K] probabilities, got {per_aug.shape}")
    L, B, K = per_aug.shape
    if L < 2:
        raise ShapeMismatch("need at least two augmentations")
    if B == 0:
        raise EmptyBatch("empty batch")
    if not np.all(np.isfinite(per_aug)):
        raise NonFiniteValue("non-finite teacher probabilities")
    # Accumulate in ascending slot order.
    total = np.zeros((B, K))
    for l in range(L):
        total += per_aug[l]
    avg = total / L
    label = np.argmax(avg, axis=1)
    top2 = np.sort(avg, axis=1)[:, -2:]
    conf = avg[np.arange(B), label]
    doc = top2[:, 1] - top2[:, 0]
    aug_conf = per_aug.max(axis=2)
    unc = np.sqrt(np.mean((aug_conf - aug_conf.mean(axis=0)) ** 2, axis=0))
    return TeacherBatch(per_aug, avg, label, conf, unc, doc)


def teacher_probs(teacher: Network, x: np.ndarray, index: np.ndarray, policy: AugmentationPolicy,
                  epoch: int = 0) -> np.ndarray:
    """Eval-mode teacher softmax over all L views, shape [L, B, K]."""
    views = augment_views(x, index, policy, range(policy.L), epoch=epoch, stream=0)
    L, B, d = views.shape
    probs = teacher.predict(views.reshape(L * B, d), mode="eval").data
    return probs.reshape(L, B, -1)


def batch_stats(pair: ModelPair | Network, batch: Dataset, policy: AugmentationPolicy,
                epoch: int = 0) -> TeacherBatch:
    if len(batch) == 0:
        raise EmptyBatch("empty batch")
    teacher = pair.teacher if isinstance(pair, ModelPair) else pair
    return stats_from_probs(teacher_probs(teacher, batch.x, batch.index, policy, epoch))


def teacher_stats(pair: ModelPair | Network, sample: Sample, policy: AugmentationPolicy,
                  epoch: int = 0) -> TeacherStats:
    teacher = pair.teacher if isinstance(pair, ModelPair) else pair
    probs = teacher_probs(teacher, sample.x[None, :], np.array([sample.index]), policy, epoch)
    return stats_from_probs(probs)[0]
