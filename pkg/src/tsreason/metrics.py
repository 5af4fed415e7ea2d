"""Point metrics, generation-spread statistics and the CoT-length heatmap."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .exceptions import (
    EmptyGroup,
    LengthMismatch,
    NonFiniteInput,
    TooFewRecords,
    TooFewSamples,
)

QUANTILE_METHOD = "linear"  # order-statistic interpolation, h = (k - 1) p + 1
SUMMARY_COLUMNS = ("variant", "strategy", "mse", "mae", "count", "attempts", "failure_rate")


def _pair(pred, truth):
    p = np.asarray(pred, dtype=float).ravel()
    t = np.asarray(truth, dtype=float).ravel()
    if p.shape != t.shape:
        raise LengthMismatch(f"prediction has {p.size} values, truth has {t.size}")
    if p.size == 0:
        raise LengthMismatch("empty vectors")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(t))):
        raise NonFiniteInput("metrics need finite inputs")
    return p, t


def mse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean((p - t) ** 2))


def mae(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


@dataclass
class EvalRecord:
    """One scored (window, channel) task. ``mse``/``mae`` are ``None`` on failure."""

    dataset: str
    origin_index: int
    channel_id: int
    strategy: str
    variant: str
    mse: Optional[float] = None
    mae: Optional[float] = None
    cot_tokens: int = 0
    repairs: list = field(default_factory=list)
    diagnosis: dict = field(default_factory=dict)
    failed: bool = False
    error: str = ""

    def __post_init__(self):
        if self.failed:
            return
        if self.mse is None or self.mae is None:
            raise ValueError("successful records need mse and mae")
        if self.mse < 0 or self.mae < 0:
            raise ValueError("metrics must be non-negative")
        # power-mean inequality, with slack for rounding
        if self.mae ** 2 > self.mse * (1 + 1e-9) + 1e-12:
            raise ValueError(f"mae^2={self.mae ** 2} exceeds mse={self.mse}")


def aggregate_dataset(records) -> list:
    """One summary row per (variant, strategy): unweighted means over successes."""
    records = list(records)
    if not records:
        raise EmptyGroup("no records to aggregate")
    groups: dict = {}
    for rec in records:
        groups.setdefault((rec.variant, rec.strategy), []).append(rec)
    rows = []
    for (variant, strategy), group in sorted(groups.items()):
        ok = [r for r in group if not r.failed]
        rows.append({
            "variant": variant,
            "strategy": strategy,
            "mse": float(np.mean([r.mse for r in ok])) if ok else float("nan"),
            "mae": float(np.mean([r.mae for r in ok])) if ok else float("nan"),
            "count": len(ok),
            "attempts": len(group),
            "failure_rate": (len(group) - len(ok)) / len(group),
        })
    return rows


def write_summary_csv(rows, path, columns=SUMMARY_COLUMNS) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path


def _samples(samples) -> np.ndarray:
    arr = np.asarray(samples, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.shape[0] < 2:
        raise TooFewSamples(f"need at least 2 samples, got {arr.shape[0]}")
    return arr


def quantile_band(samples, level: float = 0.8) -> tuple:
    if not 0 < level < 1:
        raise ValueError("band level must be in (0, 1)")
    arr = _samples(samples)
    lo = np.quantile(arr, (1 - level) / 2, axis=0, method=QUANTILE_METHOD)
    hi = np.quantile(arr, (1 + level) / 2, axis=0, method=QUANTILE_METHOD)
    return lo, hi


def per_step_std(samples) -> np.ndarray:
    return _samples(samples).std(axis=0)


def band_coverage(band, truth) -> float:
    lower, upper = (np.asarray(b, dtype=float) for b in band)
    t = np.asarray(truth, dtype=float)
    if not lower.shape == upper.shape == t.shape:
        raise LengthMismatch("band and truth lengths differ")
    return float(np.mean((lower <= t) & (t <= upper)))


@dataclass
class UncertaintyReport:
    mean: np.ndarray
    per_step_std: np.ndarray
    band_lower: np.ndarray
    band_upper: np.ndarray
    coverage: float
    level: float = 0.8


def uncertainty_report(samples, truth, level: float = 0.8) -> UncertaintyReport:
    arr = _samples(samples)
    lower, upper = quantile_band(arr, level)
    return UncertaintyReport(
        mean=arr.mean(axis=0),
        per_step_std=per_step_std(arr),
        band_lower=lower,
        band_upper=upper,
        coverage=band_coverage((lower, upper), truth),
        level=level,
    )


def _bins(keys) -> np.ndarray:
    """Equal-count bin (0-9) of each item after a stable ascending sort."""
    n = len(keys)
    order = np.argsort(np.asarray(keys, dtype=float), kind="stable")
    bins = np.empty(n, dtype=int)
    bins[order] = (np.arange(n) * 10) // n
    return bins


def cot_decile_heatmap(records) -> np.ndarray:
    """10x10 counts: row = CoT-token decile (0 shortest), column = MSE rank bin (0 best).

    ``records`` is a sequence of ``(cot_tokens, mse)`` pairs.
    """
    pairs = [(float(c), float(m)) for c, m in records]
    if len(pairs) < 10:
        raise TooFewRecords(f"need at least 10 records, got {len(pairs)}")
    token_bin = _bins([c for c, _ in pairs])
    rank_bin = _bins([m for _, m in pairs])
    heat = np.zeros((10, 10), dtype=int)
    np.add.at(heat, (token_bin, rank_bin), 1)
    return heat


def write_heatmap_csv(heat, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cot_decile"] + [f"mse_rank_{i + 1}" for i in range(10)])
        for d, row in enumerate(heat):
            writer.writerow([d + 1] + [int(x) for x in row])
    return path
