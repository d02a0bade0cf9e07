"""Source pretraining, offline/online adaptation, dense-map adaptation, evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from csfda import numkit as nk
from csfda.data import AugmentationPolicy, Dataset, augment_batch, split_source
from csfda.engine.config import RunConfig
from csfda.engine.metrics import NAN, MetricsRecord, accuracy
from csfda.errors import ArchitectureMismatch, ShapeMismatch, StreamExhausted
from csfda.model import ModelPair, Network, NetworkConfig, UpdateMask
from csfda.numkit import SGD
from csfda.objective import (
    CurriculumState,
    ce_balanced,
    entropy_loss,
    nt_xent,
    propagation_loss,
    step_curriculum,
    total_classification,
    total_segmentation,
)
from csfda.select import partition, seg_partition, seg_thresholds, thresholds
from csfda.teacher import stats_from_probs, teacher_probs

log = logging.getLogger(__name__)

# augmentation streams; the teacher owns stream 0
SUPERVISED_STREAM = 1
CONTRASTIVE_STREAM = 2


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class AccuracyReport:
    overall: float
    per_class: dict[int, float]
    predictions: np.ndarray

    @property
    def macro(self) -> float:
        vals = [v for v in self.per_class.values() if not np.isnan(v)]
        return float(np.mean(vals)) if vals else NAN


def predict_labels(net: Network, x: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = [np.argmax(net.logits(x[i:i + chunk], mode="eval").data, axis=1) for i in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(net: Network, dataset: Dataset) -> AccuracyReport:
    if dataset.input_dim != net.config.input_dim:
        raise ShapeMismatch(f"dataset has {dataset.input_dim} features, network expects {net.config.input_dim}")
    pred = predict_labels(net, dataset.x)
    per_class = {}
    for k in range(dataset.K):
        members = dataset.y == k
        per_class[k] = float(np.mean(pred[members] == k)) if members.any() else NAN
    return AccuracyReport(accuracy(pred, dataset.y), per_class, pred)


def network_from_state(state: dict[str, np.ndarray], seed: int = 0) -> Network:
    """Rebuild a network whose architecture is implied by checkpoint shapes."""
    try:
        hidden = []
        i = 0
        while f"g.{i}.w" in state:
            hidden.append(state[f"g.{i}.w"].shape[1])
            i += 1
        cfg = NetworkConfig(
            input_dim=state["g.0.w"].shape[0],
            hidden_dims=tuple(hidden),
            bottleneck_dim=state["neck.w"].shape[1],
            num_classes=state["cls.w"].shape[1],
            proj_hidden=state["proj.0.w"].shape[1],
            proj_dim=state["proj.1.w"].shape[1],
            seed=seed,
        )
    except KeyError as exc:
        raise ArchitectureMismatch(f"checkpoint lacks {exc}") from exc
    net = Network(cfg)
    net.load_state_dict(state)
    return net


# ---------------------------------------------------------------------------
# source training
# ---------------------------------------------------------------------------

@dataclass
class SourceReport:
    best_val_accuracy: float
    best_epoch: int
    val_history: list[float]


def _batches(n: int, batch_size: int, rng: np.random.Generator, drop_last: bool = True) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    stop = n - n % batch_size if drop_last and n >= batch_size else n
    for i in range(0, stop, batch_size):
        rows = order[i:i + batch_size]
        if len(rows) >= 2:
            yield rows


def pretrain_source(cfg: RunConfig, source: Dataset) -> tuple[Network, SourceReport]:
    """Cross-entropy training on the 90% split; keeps the best-validation weights."""
    train, val = split_source(source, cfg.split_ratio, cfg.seed)
    net = Network(cfg.network_config(num_classes=source.K, input_dim=source.input_dim))
    steps = cfg.source_epochs * max(1, len(train) // cfg.source_batch_size)
    # the projection head has no role in supervised source training
    trainable = {k: p for k, p in net.params.items() if not k.startswith("proj.")}
    opt = SGD(trainable, cfg.source_lr, cfg.momentum, cfg.weight_decay, total_steps=steps)
    best_state, best_acc, best_epoch, history = net.state_dict(), -1.0, -1, []
    for epoch in range(cfg.source_epochs):
        rng = np.random.default_rng([cfg.seed, 4, epoch])
        for rows in _batches(len(train), cfg.source_batch_size, rng):
            opt.zero_grad()
            logits = net.logits(train.x[rows], mode="train")
            loss = nk.mul(nk.mean(nk.gather(nk.log_softmax(logits, axis=1), train.y[rows])), -1.0)
            loss.backward()
            opt.step()
        acc = evaluate(net, val).overall
        history.append(acc)
        if acc > best_acc:
            best_state, best_acc, best_epoch = net.state_dict(), acc, epoch
    net.load_state_dict(best_state)
    log.info("source training: best val accuracy %.4f at epoch %d", best_acc, best_epoch)
    return net, SourceReport(best_acc, best_epoch, history)


# ---------------------------------------------------------------------------
# classification adaptation
# ---------------------------------------------------------------------------

@dataclass
class AdaptState:
    pair: ModelPair
    opt: SGD
    curriculum: CurriculumState
    policy: AugmentationPolicy
    updates: int = 0
    touches: dict[int, int] = field(default_factory=dict)


def _new_state(cfg: RunConfig, source_net: Network, total_steps: int, mask_mode: str = "all",
               ema_decay: float | None = None) -> AdaptState:
    student = source_net.copy()
    pair = ModelPair(student, cfg.ema_decay if ema_decay is None else ema_decay)
    pair.clone_student_to_teacher()
    trainable = UpdateMask.for_network(student, mask_mode).select(student)
    opt = SGD(trainable, cfg.lr, cfg.momentum, cfg.weight_decay,
              total_steps=total_steps if cfg.cosine else None)
    curriculum = CurriculumState.initial(cfg.mu_r0, cfg.mu_c0, cfg.mu_e0, cfg.alpha, cfg.beta)
    return AdaptState(pair, opt, curriculum, cfg.policy())


def _count_touches(state: AdaptState, index: np.ndarray, n_views: int) -> None:
    for i in index.tolist():
        state.touches[i] = state.touches.get(i, 0) + n_views


def adaptation_step(cfg: RunConfig, state: AdaptState, batch: Dataset, epoch: int, iteration: int) -> MetricsRecord:
    """One teacher-labelled update of the student followed by EMA and curriculum steps."""
    pair, policy = state.pair, state.policy
    per_aug = teacher_probs(pair.teacher, batch.x, batch.index, policy, epoch)
    stats = stats_from_probs(per_aug)
    thr = thresholds(stats)
    labels = stats.pseudo_label
    _count_touches(state, batch.index, policy.L)

    if cfg.method == "all_pseudo":
        reliable, unreliable, weights = np.arange(len(batch)), np.zeros(0, dtype=np.intp), None
    else:
        part = partition(stats, thr, cfg.rescue_fraction)
        reliable, unreliable, weights = part.reliable, part.unreliable, part.class_weights

    student = pair.student
    x_sup = augment_batch(batch.x, batch.index, policy, 0, epoch, SUPERVISED_STREAM)
    _count_touches(state, batch.index, 1)
    probs = student.predict(x_sup, mode="train")

    l_ce = ce_balanced(nk.take(probs, reliable), labels[reliable], weights) if len(reliable) else None
    l_prop = l_con = None
    mu_r, mu_c = state.curriculum.mu_r, state.curriculum.mu_c
    if cfg.method == "all_pseudo":
        mu_r, mu_c = 1.0, 0.0
    else:
        if len(unreliable):
            l_prop = propagation_loss(nk.take(probs, unreliable), labels[unreliable])
        views = np.concatenate([
            augment_batch(batch.x, batch.index, policy, s, epoch, CONTRASTIVE_STREAM) for s in (0, 1)
        ])
        _count_touches(state, batch.index, 2)
        q = student.project_features(student.features(views, mode="train"))
        B = len(batch)
        l_con = nt_xent(nk.take(q, np.arange(B)), nk.take(q, np.arange(B, 2 * B)), cfg.kappa)

    total = total_classification(l_ce, l_prop, l_con, mu_r, mu_c)
    state.opt.zero_grad()
    if total.requires_grad:
        total.backward()
        for p in state.opt.params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    else:
        for p in state.opt.params.values():
            p.grad = np.zeros_like(p.data)
    state.opt.step()
    state.updates += 1
    pair.ema_update()
    record_mu_r, record_mu_c = mu_r, mu_c
    if cfg.method == "csfda":
        state.curriculum = step_curriculum(state.curriculum, thr.tau_c, thr.tau_u)

    return MetricsRecord(
        iter=iteration,
        tau_c=thr.tau_c,
        tau_u=thr.tau_u,
        sel_frac=len(reliable) / len(batch),
        pl_acc=accuracy(labels, batch.y),
        l_ce=l_ce.item() if l_ce is not None else 0.0,
        l_prop=l_prop.item() if l_prop is not None else 0.0,
        l_con=l_con.item() if l_con is not None else 0.0,
        l_ent=NAN,
        l_total=total.item(),
        mu_r=record_mu_r,
        mu_c=record_mu_c,
        epoch=epoch,
        sel_pl_acc=accuracy(labels[reliable], batch.y[reliable]) if len(reliable) else NAN,
    )


@dataclass
class AdaptResult:
    pair: ModelPair
    metrics: list[MetricsRecord]
    accuracy: float
    updates: int
    touches: dict[int, int]


def adapt_offline(cfg: RunConfig, source_net: Network, target: Dataset) -> AdaptResult:
    """Multi-epoch self-training on the unlabeled target set."""
    per_epoch = max(1, len(target) // cfg.batch_size)
    state = _new_state(cfg, source_net, cfg.epochs * per_epoch)
    metrics: list[MetricsRecord] = []
    it = 0
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 3, epoch])
        for rows in _batches(len(target), cfg.batch_size, rng):
            metrics.append(adaptation_step(cfg, state, target.subset(rows), epoch, it))
            it += 1
        if metrics:
            metrics[-1].acc = evaluate(state.pair.student, target).overall
    final = evaluate(state.pair.student, target).overall
    return AdaptResult(state.pair, metrics, final, state.updates, state.touches)


class TargetStream:
    """Delivers each batch of a target set once, in a seeded order."""

    def __init__(self, target: Dataset, batch_size: int, seed: int = 0):
        self.target = target
        rng = np.random.default_rng([seed, 5])
        order = rng.permutation(len(target))
        self._batches = [order[i:i + batch_size] for i in range(0, len(target), batch_size)]
        # batchnorm needs two rows: fold a trailing singleton into its predecessor
        if len(self._batches) > 1 and len(self._batches[-1]) < 2:
            tail = self._batches.pop()
            self._batches[-1] = np.concatenate([self._batches[-1], tail])
        self._pos = 0
        self.delivered = np.zeros(len(target), dtype=np.int64)

    def __len__(self) -> int:
        return len(self._batches)

    def next_batch(self) -> Dataset:
        if self._pos >= len(self._batches):
            raise StreamExhausted("no batches left in the stream")
        rows = self._batches[self._pos]
        self._pos += 1
        self.delivered[rows] += 1
        return self.target.subset(rows)

    def __iter__(self) -> Iterator[Dataset]:
        while self._pos < len(self._batches):
            yield self.next_batch()


@dataclass
class OnlineResult:
    metrics: list[MetricsRecord]
    first_pass_accuracy: float
    posthoc_accuracy: float
    updates: int
    batches: int
    touches: dict[int, int]
    pair: ModelPair


def adapt_online(cfg: RunConfig, source_net: Network, stream: TargetStream) -> OnlineResult:
    """Single pass: predict each batch with the current student, then update once on it."""
    if len(stream) == 0:
        raise StreamExhausted("empty stream")
    state = _new_state(cfg, source_net, len(stream))
    metrics, correct, seen, labelled = [], 0, 0, True
    for it, batch in enumerate(stream):
        pred = predict_labels(state.pair.student, batch.x)
        if np.any(batch.y < 0):
            labelled = False
        correct += int(np.sum(pred == batch.y))
        seen += len(batch)
        rec = adaptation_step(cfg, state, batch, epoch=0, iteration=it)
        rec.acc = accuracy(pred, batch.y)
        metrics.append(rec)
    first_pass = correct / seen if labelled else NAN
    posthoc = evaluate(state.pair.student, stream.target).overall
    return OnlineResult(metrics, first_pass, posthoc, state.updates, len(stream), state.touches, state.pair)


# ---------------------------------------------------------------------------
# dense-map adaptation
# ---------------------------------------------------------------------------

@dataclass
class SegResult:
    pair: ModelPair
    metrics: list[MetricsRecord]
    source_macro: float
    adapted_macro: float
    report: AccuracyReport


def adapt_segmentation(cfg: RunConfig, source_net: Network, maps: Dataset, map_shape: tuple[int, int]) -> SegResult:
    """BN-only self-training on per-pixel pseudo-labels with per-class percentile selection."""
    H, W = map_shape
    pixels = H * W
    if len(maps) % pixels:
        raise ShapeMismatch(f"{len(maps)} pixels do not tile {H}x{W} maps")
    n_maps = len(maps) // pixels
    per_epoch = max(1, n_maps // cfg.batch_size)
    state = _new_state(cfg, source_net, cfg.epochs * per_epoch, mask_mode="bn_only")
    source_macro = evaluate(source_net, maps).macro
    metrics: list[MetricsRecord] = []
    it = 0
    K = source_net.config.num_classes
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 6, epoch])
        for map_rows in _batches(n_maps, cfg.batch_size, rng, drop_last=False):
            rows = (map_rows[:, None] * pixels + np.arange(pixels)[None, :]).reshape(-1)
            batch = maps.subset(rows)
            n = len(map_rows)
            stats = stats_from_probs(teacher_probs(state.pair.teacher, batch.x, batch.index, state.policy, epoch))
            pmap = stats.avg_probs.reshape(n, H, W, K)
            unc = stats.uncertainty.reshape(n, H, W)
            thr = seg_thresholds(pmap, unc, cfg.percentile)
            mask = seg_partition(pmap, unc, thr).reshape(-1)
            reliable = np.flatnonzero(mask)
            labels = stats.pseudo_label

            x_sup = augment_batch(batch.x, batch.index, state.policy, 0, epoch, SUPERVISED_STREAM)
            probs = state.pair.student.predict(x_sup, mode="train")
            l_ce = ce_balanced(nk.take(probs, reliable), labels[reliable]) if len(reliable) else None
            l_ent = entropy_loss(nk.reshape(probs, (n, H, W, K)))
            total = total_segmentation(l_ce, l_ent, state.curriculum.mu_e)

            state.opt.zero_grad()
            total.backward()
            state.opt.step()
            state.updates += 1
            state.pair.ema_update()
            mu_e = state.curriculum.mu_e
            state.curriculum = step_curriculum(
                state.curriculum, float(stats.confidence.mean()), float(stats.uncertainty.mean())
            )
            finite_c = thr.tau_c[np.isfinite(thr.tau_c)]
            finite_u = thr.tau_u[np.isfinite(thr.tau_u)]
            metrics.append(MetricsRecord(
                iter=it,
                tau_c=float(finite_c.mean()) if finite_c.size else NAN,
                tau_u=float(finite_u.mean()) if finite_u.size else NAN,
                sel_frac=len(reliable) / len(batch),
                pl_acc=accuracy(labels, batch.y),
                l_ce=l_ce.item() if l_ce is not None else 0.0,
                l_prop=NAN,
                l_con=NAN,
                l_ent=l_ent.item(),
                l_total=total.item(),
                mu_r=NAN,
                mu_c=NAN,
                mu_e=mu_e,
                epoch=epoch,
                sel_pl_acc=accuracy(labels[reliable], batch.y[reliable]) if len(reliable) else NAN,
            ))
            it += 1
        if metrics:
            metrics[-1].acc = evaluate(state.pair.student, maps).macro
    report = evaluate(state.pair.student, maps)
    return SegResult(state.pair, metrics, source_macro, report.macro, report)
