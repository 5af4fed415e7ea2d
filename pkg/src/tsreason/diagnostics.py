"""Detectors for four recurring forecast failure modes.

Constant collapse takes precedence over copy-paste; phase shift and peak
clipping are reported independently.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .exceptions import (
    ConstantInput,
    ConstantTruth,
    DegenerateLookback,
    DiagnosticError,
    LengthMismatch,
    PredTooLong,
)

_TIE = 1e-12


@dataclass(frozen=True)
class Thresholds:
    collapse_ratio: float = 0.05
    copy_similarity: float = 0.99
    copy_tolerance: float = 0.01  # fraction of lookback range
    phase_max_lag: Optional[int] = None  # None -> H // 4
    phase_correlation: float = 0.8
    phase_margin: float = 0.1
    peak_amplitude: float = 0.7
    peak_correlation: float = 0.5


@dataclass(frozen=True)
class Diagnosis:
    peak_clipping: bool = False
    peak_severity: Optional[float] = None
    phase_shift: bool = False
    phase_lag: Optional[int] = None
    copy_paste: bool = False
    copy_offset: Optional[int] = None
    copy_similarity: Optional[float] = None
    constant_collapse: bool = False
    collapse_ratio: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def flags(self) -> tuple:
        return tuple(
            name for name in ("peak_clipping", "phase_shift", "copy_paste", "constant_collapse")
            if getattr(self, name)
        )


def _pearson(a, b) -> Optional[float]:
    a = np.asarray(a, dtype=float) - np.mean(a)
    b = np.asarray(b, dtype=float) - np.mean(b)
    denom = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if denom == 0 or not np.isfinite(denom):
        return None
    return float(np.clip(np.dot(a, b) / denom, -1.0, 1.0))


def detect_constant_collapse(pred, lookback, ratio_threshold: float = 0.05) -> tuple:
    lookback_std = float(np.std(lookback))
    if lookback_std == 0:
        raise DegenerateLookback("lookback has zero variance")
    ratio = float(np.std(pred)) / lookback_std
    return ratio < ratio_threshold, ratio


def detect_copy_paste(pred, lookback, sim_threshold: float = 0.99, tolerance: float = 0.01) -> tuple:
    """Best-correlated lookback segment; flagged only if it also matches pointwise.

    Ties in correlation go to the closer match, then the most recent segment.
    """
    pred = np.asarray(pred, dtype=float)
    lookback = np.asarray(lookback, dtype=float)
    H, L = len(pred), len(lookback)
    if H > L:
        raise PredTooLong(f"prediction length {H} exceeds lookback {L}")
    if np.std(pred) == 0:
        return False, None, None
    best = None  # (corr, -maxdiff, offset)
    for offset in range(L - H + 1):
        segment = lookback[offset:offset + H]
        corr = _pearson(pred, segment)
        if corr is None:
            continue
        diff = float(np.max(np.abs(pred - segment)))
        key = (corr, -diff, offset)
        if best is None or corr > best[0] + _TIE or (abs(corr - best[0]) <= _TIE and key[1:] >= best[1:]):
            best = key
    if best is None:
        return False, None, None
    corr, neg_diff, offset = best
    span = float(np.ptp(lookback))
    flagged = corr >= sim_threshold and -neg_diff <= tolerance * span
    return flagged, offset, corr


def lagged_correlation(pred, truth, lag: int) -> Optional[float]:
    """Correlation of ``pred[t + lag]`` with ``truth[t]`` over the overlap."""
    n = len(pred)
    if lag >= 0:
        a, b = pred[lag:], truth[:n - lag]
    else:
        a, b = pred[:n + lag], truth[-lag:]
    if len(a) < 2:
        return None
    return _pearson(a, b)


def detect_phase_shift(pred, truth, max_lag: Optional[int] = None, corr_threshold: float = 0.8,
                       margin: float = 0.1) -> tuple:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise LengthMismatch("prediction and truth lengths differ")
    if np.std(pred) == 0 or np.std(truth) == 0:
        raise ConstantInput("phase-shift detection needs non-constant inputs")
    n = len(pred)
    max_lag = n // 4 if max_lag is None else max_lag
    max_lag = min(max_lag, n - 2)
    corrs = {}
    for lag in range(-max_lag, max_lag + 1):
        c = lagged_correlation(pred, truth, lag)
        if c is not None:
            corrs[lag] = c
    if not corrs:
        return False, 0
    top = max(corrs.values())
    best_lag = min((lag for lag, c in corrs.items() if c >= top - _TIE), key=lambda g: (abs(g), g))
    base = corrs.get(0, -1.0)
    flagged = best_lag != 0 and top >= corr_threshold and top - base >= margin
    return flagged, best_lag


def amplitude_ratio(pred, truth) -> float:
    truth_span = float(np.ptp(truth))
    if truth_span == 0:
        raise ConstantTruth("truth has zero range")
    return float(np.ptp(pred)) / truth_span


def detect_peak_clipping(pred, truth, amp_threshold: float = 0.7, corr_threshold: float = 0.5) -> tuple:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise LengthMismatch("prediction and truth lengths differ")
    rho = amplitude_ratio(pred, truth)
    corr = _pearson(pred, truth)
    flagged = rho < amp_threshold and corr is not None and corr >= corr_threshold
    return flagged, 1.0 - min(rho, 1.0)


def diagnose(pred, lookback, truth, thresholds: Optional[Thresholds] = None) -> Diagnosis:
    """Run every detector; never raises on finite input of consistent shape.

    Copy-paste is only reported when the copied segment is also stale, i.e. the
    prediction does not itself match the truth within the same pointwise tolerance.
    """
    th = thresholds or Thresholds()
    pred = np.asarray(pred, dtype=float)
    lookback = np.asarray(lookback, dtype=float)
    truth = np.asarray(truth, dtype=float)
    out: dict = {}

    try:
        collapse, ratio = detect_constant_collapse(pred, lookback, th.collapse_ratio)
    except DegenerateLookback:
        ratio = 0.0 if np.std(pred) == 0 else float("inf")
        collapse = ratio < th.collapse_ratio
    out.update(constant_collapse=collapse, collapse_ratio=ratio)

    if not collapse and len(pred) <= len(lookback):
        copied, offset, sim = detect_copy_paste(pred, lookback, th.copy_similarity, th.copy_tolerance)
        if copied and pred.shape == truth.shape:
            stale_tol = th.copy_tolerance * float(np.ptp(lookback))
            copied = float(np.max(np.abs(pred - truth))) > stale_tol
        out.update(copy_paste=copied, copy_offset=offset, copy_similarity=sim)

    try:
        shifted, lag = detect_phase_shift(pred, truth, th.phase_max_lag, th.phase_correlation, th.phase_margin)
        out.update(phase_shift=shifted, phase_lag=lag)
    except (DiagnosticError, LengthMismatch):
        pass

    try:
        clipped, severity = detect_peak_clipping(pred, truth, th.peak_amplitude, th.peak_correlation)
        out.update(peak_clipping=clipped, peak_severity=severity)
    except (DiagnosticError, LengthMismatch):
        pass

    return Diagnosis(**out)
