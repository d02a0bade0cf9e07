"""Per-iteration training statistics and their CSV encoding."""

from __future__ import annotations

import math
from dataclasses import dataclass
from os import PathLike
from typing import Iterable

import numpy as np

CSV_COLUMNS = ("iter", "tau_c", "tau_u", "sel_frac", "pl_acc", "l_ce", "l_prop", "l_con",
               "l_ent", "l_total", "mu_r", "mu_c", "acc")

NAN = float("nan")


@dataclass
class MetricsRecord:
    iter: int
    tau_c: float
    tau_u: float
    sel_frac: float
    pl_acc: float
    l_ce: float
    l_prop: float
    l_con: float
    l_ent: float
    l_total: float
    mu_r: float
    mu_c: float
    acc: float = NAN
    # not serialized
    epoch: int = 0
    sel_pl_acc: float = NAN
    mu_e: float = NAN


def format_value(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return f"{v:.9g}"


def to_csv(records: Iterable[MetricsRecord]) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for r in records:
        lines.append(",".join(format_value(getattr(r, c)) for c in CSV_COLUMNS))
    return "\n".join(lines) + "\n"


def write_csv(path: str | PathLike, records: Iterable[MetricsRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(to_csv(records))


def read_csv(path: str | PathLike) -> dict[str, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    return {name: np.array([float(r[i]) for r in rows]) for i, name in enumerate(header)}


def slope(values) -> float:
    """Least-squares slope of ``values`` against their position, NaNs dropped."""
    y = np.asarray(values, dtype=np.float64)
    x = np.arange(len(y), dtype=np.float64)
    keep = np.isfinite(y)
    x, y = x[keep], y[keep]
    if len(y) < 2:
        return NAN
    return float(np.polyfit(x, y, 1)[0])


def accuracy(pred, labels) -> float:
    """Top-1 accuracy; NaN when any label is withheld (negative)."""
    labels = np.asarray(labels)
    if labels.size == 0 or np.any(labels < 0):
        return NAN
    return float(np.mean(np.asarray(pred) == labels))
