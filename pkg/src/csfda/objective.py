"""Self-training losses and the curriculum that weights them."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from csfda import numkit as nk
from csfda.errors import BatchTooSmall, EmptySet, NonPositiveConfidence, ShapeMismatch
from csfda.numkit import Tensor


def ce_balanced(probs: Tensor, labels, class_weight: Mapping[int, float] | None = None) -> Tensor:
    """-(1/n) * sum_i w[y_i] * log p_i[y_i]."""
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ShapeMismatch(f"probs {probs.shape} vs labels {labels.shape}")
    if labels.size == 0:
        raise EmptySet("class-balanced CE over an empty set")
    picked = nk.log(nk.gather(probs, labels))
    if class_weight is not None:
        picked = nk.mul(picked, np.array([class_weight[int(k)] for k in labels]))
    return nk.mul(nk.sum(picked), -1.0 / labels.size)


def propagation_loss(probs: Tensor, labels) -> Tensor:
    """(1 / 2n) * sum_i ||p_i - onehot(y_i)||^2."""
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ShapeMismatch(f"probs {probs.shape} vs labels {labels.shape}")
    if labels.size == 0:
        raise EmptySet("propagation loss over an empty set")
    target = np.eye(probs.shape[1])[labels]
    return nk.mul(nk.sum(nk.square(nk.sub(probs, target))), 0.5 / labels.size)


def interleave(q1: Tensor, q2: Tensor) -> Tensor:
    """Rows ordered q1[0], q2[0], q1[1], q2[1], ..."""
    B = q1.shape[0]
    order = np.empty(2 * B, dtype=np.intp)
    order[0::2] = np.arange(B)
    order[1::2] = np.arange(B) + B
    return nk.take(nk.concat([q1, q2], axis=0), order)


def nt_xent(q1: Tensor, q2: Tensor, kappa: float = 0.1) -> Tensor:
    """Normalized-temperature cross entropy over two views, averaged over all 2B anchors."""
    if q1.shape != q2.shape or q1.ndim != 2:
        raise ShapeMismatch(f"views {q1.shape} vs {q2.shape}")
    B = q1.shape[0]
    if B < 2:
        raise BatchTooSmall("contrastive loss needs at least two samples")
    z = nk.l2_normalize(interleave(q1, q2), axis=1)
    logits = nk.mul(nk.matmul(z, nk.transpose(z)), 1.0 / kappa)
    n = 2 * B
    partner = np.arange(n) ^ 1
    off_diag = ~np.eye(n, dtype=bool)
    positive = nk.gather(logits, partner)
    denom = nk.logsumexp(logits, axis=1, mask=off_diag)
    return nk.mean(nk.sub(denom, positive))


def entropy_loss(pmap: Tensor) -> Tensor:
    """Mean Shannon entropy over every pixel of a ``[..., K]`` probability map."""
    if pmap.ndim < 2:
        raise ShapeMismatch(f"entropy loss expects [..., K], got {pmap.shape}")
    n_pixels = pmap.data.size // pmap.shape[-1]
    plogp = nk.mul(pmap, nk.log(pmap))
    return nk.mul(nk.sum(plogp), -1.0 / n_pixels)


def _zero() -> Tensor:
    return Tensor(0.0)


def total_classification(l_ce: Tensor | None, l_prop: Tensor | None, l_con: Tensor | None,
                         mu_r: float, mu_c: float) -> Tensor:
    """mu_r * L_ce^R + (1 - mu_r) * L_P + mu_c * L_C; absent terms contribute zero."""
    total = _zero()
    if l_ce is not None:
        total = nk.add(total, nk.mul(l_ce, mu_r))
    if l_prop is not None:
        total = nk.add(total, nk.mul(l_prop, 1.0 - mu_r))
    if l_con is not None:
        total = nk.add(total, nk.mul(l_con, mu_c))
    return total


def total_segmentation(l_ce: Tensor | None, l_ent: Tensor | None, mu_e: float) -> Tensor:
    total = _zero()
    if l_ce is not None:
        total = nk.add(total, l_ce)
    if l_ent is not None:
        total = nk.add(total, nk.mul(l_ent, mu_e))
    return total


@dataclass(frozen=True)
class CurriculumState:
    mu_r: float = 1.0
    mu_c: float = 0.5
    mu_e: float = 1e-3
    alpha: float = 0.005
    beta: float = 1e-4
    mu_c0: float = 0.5
    mu_e0: float = 1e-3
    j: int = 0
    d: float = float("nan")

    @classmethod
    def initial(cls, mu_r0: float = 1.0, mu_c0: float = 0.5, mu_e0: float = 1e-3,
                alpha: float = 0.005, beta: float = 1e-4) -> "CurriculumState":
        return cls(mu_r=mu_r0, mu_c=mu_c0, mu_e=mu_e0, alpha=alpha, beta=beta, mu_c0=mu_c0, mu_e0=mu_e0)


def step_curriculum(state: CurriculumState, tau_c: float, tau_u: float) -> CurriculumState:
    """Advance one iteration.

    mu_r shrinks by the factor (1 - alpha * exp(-1/d)) with batch difficulty
    d = tau_u / tau_c; mu_c and mu_e decay geometrically by exp(-beta) and are
    evaluated in closed form so the ratio stays exact.
    """
    if not tau_c > 0:
        raise NonPositiveConfidence(f"tau_c must be positive, got {tau_c}")
    d = tau_u / tau_c
    factor = math.exp(-1.0 / d) if d > 0 else 0.0
    j = state.j + 1
    return replace(
        state,
        mu_r=state.mu_r * (1.0 - state.alpha * factor),
        mu_c=state.mu_c0 * math.exp(-state.beta * j),
        mu_e=state.mu_e0 * math.exp(-state.beta * j),
        j=j,
        d=d,
    )
