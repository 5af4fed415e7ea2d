from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import ETT_COLUMNS, write_ett_csv
from tsreason.data import (
    NONE_TOKEN,
    CsvSchema,
    SeriesFrame,
    apply_missing,
    chronological_split,
    draw_mask,
    load_csv,
    slide_windows,
    split_boundaries,
    window_count,
)
from tsreason.exceptions import (
    FileUnreadable,
    FrameTooShort,
    InvalidRatios,
    IrregularSampling,
    MaskOutOfRange,
    NonMonotoneTimestamps,
    PartTooShort,
    SchemaMismatch,
    UnparseableCell,
)


def make_frame(T, d=1, start=datetime(2020, 1, 1), freq=timedelta(hours=1)):
    values = np.arange(T * d, dtype=float).reshape(T, d)
    return SeriesFrame(
        timestamps=tuple(start + freq * i for i in range(T)),
        channels=tuple(f"c{j}" for j in range(d)),
        values=values,
        frequency=freq,
    )


def test_load_ett_fixture(tmp_path):
    path = write_ett_csv(tmp_path / "ett.csv", T=50)
    frame = load_csv(path)
    assert frame.T == 50 and frame.d == 7
    assert frame.channels == tuple(ETT_COLUMNS)
    assert frame.frequency == timedelta(hours=1)
    assert frame.timestamps[0] == datetime(2016, 7, 1)
    assert frame.frequency_label == "1h"


def test_channel_selection(tmp_path):
    path = write_ett_csv(tmp_path / "ett.csv", T=20)
    frame = load_csv(path, CsvSchema(channels=("OT",)))
    assert frame.channels == ("OT",)


def test_values_are_read_only(tmp_path):
    frame = load_csv(write_ett_csv(tmp_path / "ett.csv", T=20))
    with pytest.raises(ValueError):
        frame.values[0, 0] = 1.0


def _write(path, text):
    path.write_text(text)
    return path


def test_missing_file(tmp_path):
    with pytest.raises(FileUnreadable):
        load_csv(tmp_path / "nope.csv")


def test_missing_timestamp_column(tmp_path):
    p = _write(tmp_path / "a.csv", "time,x\n2020-01-01 00:00:00,1\n")
    with pytest.raises(SchemaMismatch):
        load_csv(p)


def test_missing_channel(tmp_path):
    p = _write(tmp_path / "a.csv", "date,x\n2020-01-01 00:00:00,1\n2020-01-01 01:00:00,2\n")
    with pytest.raises(SchemaMismatch):
        load_csv(p, CsvSchema(channels=("y",)))


def test_non_monotone(tmp_path):
    p = _write(tmp_path / "a.csv",
               "date,x\n2020-01-01 01:00:00,1\n2020-01-01 00:00:00,2\n")
    with pytest.raises(NonMonotoneTimestamps) as info:
        load_csv(p)
    assert info.value.row == 1


def test_duplicate_timestamp_is_non_monotone(tmp_path):
    p = _write(tmp_path / "a.csv",
               "date,x\n2020-01-01 00:00:00,1\n2020-01-01 00:00:00,2\n")
    with pytest.raises(NonMonotoneTimestamps):
        load_csv(p)


def test_unparseable_value(tmp_path):
    p = _write(tmp_path / "a.csv",
               "date,x\n2020-01-01 00:00:00,1\n2020-01-01 01:00:00,abc\n")
    with pytest.raises(UnparseableCell) as info:
        load_csv(p)
    assert info.value.column == "x" and info.value.raw == "abc"


def test_empty_cell_policy(tmp_path):
    p = _write(tmp_path / "a.csv",
               "date,x\n2020-01-01 00:00:00,1\n2020-01-01 01:00:00,\n2020-01-01 02:00:00,3\n")
    with pytest.raises(UnparseableCell):
        load_csv(p)
    frame = load_csv(p, CsvSchema(allow_empty=True))
    assert np.isnan(frame.values[1, 0])


def test_irregular_sampling(tmp_path):
    p = _write(tmp_path / "a.csv",
               "date,x\n2020-01-01 00:00:00,1\n2020-01-01 01:00:00,2\n"
               "2020-01-01 02:00:00,3\n2020-01-01 05:00:00,4\n")
    with pytest.raises(IrregularSampling):
        load_csv(p)
    frame = load_csv(p, CsvSchema(allow_gaps=True))
    assert frame.frequency == timedelta(hours=1)


def test_split_boundaries_reference_sizes():
    first, second = split_boundaries(17420, (0.7, 0.1, 0.2))
    assert (first, second - first, 17420 - second) == (12194, 1742, 3484)


@pytest.mark.parametrize("ratios", [(0.5, 0.5), (0.7, 0.2, 0.2), (-0.1, 0.6, 0.5)])
def test_invalid_ratios(ratios):
    with pytest.raises(InvalidRatios):
        split_boundaries(100, ratios)


def test_split_is_chronological_and_covering():
    frame = make_frame(1000)
    train, val, test = chronological_split(frame)
    assert (train.T, val.T, test.T) == (700, 100, 200)
    assert train.timestamps[-1] < val.timestamps[0] and val.timestamps[-1] < test.timestamps[0]
    assert test.row_offset == 800
    with pytest.raises(PartTooShort) as info:
        chronological_split(frame, min_rows=192)
    assert info.value.part == "val"


@settings(max_examples=200, deadline=None)
@given(
    T=st.integers(2, 400),
    L=st.integers(1, 60),
    H=st.integers(1, 60),
    stride=st.integers(1, 50),
)
def test_window_count_and_alignment(T, L, H, stride):
    frame = make_frame(T)
    if T < L + H:
        with pytest.raises(FrameTooShort):
            slide_windows(frame, L, H, stride)
        return
    windows = slide_windows(frame, L, H, stride)
    assert len(windows) == window_count(T, L, H, stride) == (T - L - H) // stride + 1
    for w in windows:
        assert w.L == L and w.H == H
        # values encode their row index, so alignment is checkable directly
        assert w.lookback_values[-1] + 1 == w.truth[0]
        assert w.truth[0] == w.origin_index
        assert w.lookback_timestamps[-1] + frame.frequency == w.horizon_timestamps[0]


def test_stride_defaults_to_horizon():
    windows = slide_windows(make_frame(400), 96, 96)
    assert [w.origin_index for w in windows] == [96, 192, 288]


def test_channel_independence():
    frame = make_frame(300, d=3)
    w = slide_windows(frame, 96, 96, channel_id=2)[0]
    np.testing.assert_array_equal(w.lookback_values, frame.values[:96, 2])
    assert w.channel_name == "c2"


@settings(max_examples=200, deadline=None)
@given(L=st.integers(3, 400), rate=st.floats(0, 0.9), seed=st.integers(0, 2**31))
def test_mask_properties(L, rate, seed):
    n = int(np.floor(rate * L + 0.5))
    if n > L - 2:
        with pytest.raises(MaskOutOfRange):
            draw_mask(L, rate, seed)
        return
    mask = draw_mask(L, rate, seed)
    assert len(mask.indices) == n
    assert len(set(mask.indices)) == n
    assert all(0 < i < L - 1 for i in mask.indices)
    assert draw_mask(L, rate, seed) == mask


def test_missing_variants():
    w = slide_windows(make_frame(200), 96, 96)[0]
    mask = draw_mask(96, 0.2, seed=3)
    full = apply_missing(w, "full")
    assert len(full.points) == 96
    no_imp = apply_missing(w, "no_imp", mask)
    assert len(no_imp.points) == 96 - len(mask.indices)
    none_imp = apply_missing(w, "none_imp", mask)
    assert [i for i, (_, v) in enumerate(none_imp.points) if v == NONE_TOKEN] == list(mask.indices)
    lin = apply_missing(w, "lin_imp", mask)
    # the series is affine (row index), so interpolation is exact
    np.testing.assert_array_equal(lin.numeric_values(), w.lookback_values)


def test_mask_touching_endpoint_rejected():
    from tsreason.data import MissingMask

    w = slide_windows(make_frame(200), 96, 96)[0]
    with pytest.raises(MaskOutOfRange):
        apply_missing(w, "lin_imp", MissingMask(indices=(0, 5)))
