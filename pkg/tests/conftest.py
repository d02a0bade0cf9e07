import numpy as np
import pytest

from csfda.data import generate
from csfda.engine import RunConfig, adapt_offline, evaluate, pretrain_source


def central_difference(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (x is perturbed in place and restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        hi = f()
        x[idx] = orig - eps
        lo = f()
        x[idx] = orig
        grad[idx] = (hi - lo) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def benchmark_run():
    """Seed-0 4-class ring rotated 45 degrees, default settings: source model plus both adaptations."""
    cfg = RunConfig()
    source, target = generate(cfg.dataset_spec())
    net, report = pretrain_source(cfg, source)
    source_only = evaluate(net, target).overall
    csfda = adapt_offline(cfg, net, target)
    all_pseudo = adapt_offline(cfg.replace(method="all_pseudo"), net, target)
    return dict(cfg=cfg, source=source, target=target, net=net, report=report,
                source_only=source_only, csfda=csfda, all_pseudo=all_pseudo)


def brute_force_nt_xent(q1: np.ndarray, q2: np.ndarray, kappa: float) -> float:
    """Scalar-loop contrastive loss over the full 2B x 2B cosine-similarity matrix."""
    rows = []
    for a, b in zip(q1, q2):
        rows.extend([a, b])
    n = len(rows)
    sim = [[float(np.dot(rows[i], rows[j]) / (np.linalg.norm(rows[i]) * np.linalg.norm(rows[j])))
            for j in range(n)] for i in range(n)]
    total = 0.0
    for i in range(n):
        j = i + 1 if i % 2 == 0 else i - 1
        denom = sum(np.exp(sim[i][b] / kappa) for b in range(n) if b != i)
        total += -np.log(np.exp(sim[i][j] / kappa) / denom)
    return total / n
