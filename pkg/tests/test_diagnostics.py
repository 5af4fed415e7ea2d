import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import diag_fixtures as fx
from tsreason.diagnostics import (
    Thresholds,
    amplitude_ratio,
    detect_constant_collapse,
    detect_copy_paste,
    detect_phase_shift,
    diagnose,
    lagged_correlation,
)
from tsreason.exceptions import ConstantInput, ConstantTruth, DegenerateLookback, LengthMismatch, PredTooLong


def test_healthy_has_no_flags():
    assert diagnose(*fx.healthy()).flags == ()


def test_compressed_is_peak_clipping():
    d = diagnose(*fx.compressed(0.5))
    assert d.flags == ("peak_clipping",)
    assert d.peak_severity == pytest.approx(0.5, abs=1e-12)


def test_lagged_is_phase_shift():
    d = diagnose(*fx.lagged(5))
    assert d.flags == ("phase_shift",)
    assert d.phase_lag == 5


def test_negative_lag():
    pred, lookback, truth = fx.lagged(-3)
    flagged, lag = detect_phase_shift(pred, truth)
    assert flagged and lag == -3


@pytest.mark.parametrize("offset", [0, 17, 48])
def test_copy_is_copy_paste(offset):
    d = diagnose(*fx.copied(offset))
    assert d.flags == ("copy_paste",)
    assert d.copy_offset == offset
    assert d.copy_similarity == pytest.approx(1.0)


def test_constant_is_collapse_and_beats_copy():
    d = diagnose(*fx.constant())
    assert d.flags == ("constant_collapse",)
    assert d.collapse_ratio == 0.0
    assert not d.copy_paste


def test_copy_of_accurate_forecast_not_flagged():
    # a perfect seasonal forecast repeats the lookback but is not stale
    season = fx._sine(n=120)
    lookback, truth = season[:96], season[96:]
    pred = lookback[-24:]
    assert detect_copy_paste(pred, lookback)[0]
    assert not diagnose(pred, lookback, truth).copy_paste


def test_detector_errors():
    with pytest.raises(DegenerateLookback):
        detect_constant_collapse([1, 2], [3, 3, 3])
    with pytest.raises(PredTooLong):
        detect_copy_paste(np.arange(5.0), np.arange(3.0))
    with pytest.raises(ConstantInput):
        detect_phase_shift(np.ones(10), np.arange(10.0))
    with pytest.raises(LengthMismatch):
        detect_phase_shift(np.arange(4.0), np.arange(5.0))
    with pytest.raises(ConstantTruth):
        amplitude_ratio(np.arange(3.0), np.ones(3))


def test_lagged_correlation_alignment():
    truth = np.sin(np.arange(40) / 3)
    pred = np.roll(truth, 2)
    assert lagged_correlation(pred, truth, 2) == pytest.approx(1.0)


def test_thresholds_respected():
    pred, lookback, truth = fx.compressed(0.8)
    assert not diagnose(pred, lookback, truth).peak_clipping
    assert diagnose(pred, lookback, truth, Thresholds(peak_amplitude=0.9)).peak_clipping


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 40).flatmap(lambda n: st.tuples(
    arrays(float, n, elements=finite), arrays(float, n + 8, elements=finite), arrays(float, n, elements=finite))))
def test_diagnose_is_total(args):
    pred, lookback, truth = args
    d = diagnose(pred, lookback, truth)
    assert not (d.constant_collapse and d.copy_paste)
    assert set(d.to_dict()) >= {"peak_clipping", "phase_shift", "copy_paste", "constant_collapse"}
