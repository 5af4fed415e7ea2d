"""CSV loading, chronological splits, sliding windows and missing-data variants.

Evaluation is channel-independent: every window carries a single channel.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .exceptions import (
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

FREQUENCY_LABELS = {
    timedelta(seconds=3): "3s",
    timedelta(minutes=15): "15min",
    timedelta(hours=1): "1h",
    timedelta(days=1): "1d",
}
_LABEL_TO_FREQUENCY = {v: k for k, v in FREQUENCY_LABELS.items()}

MISSING_MODES = ("full", "no_imp", "none_imp", "lin_imp")
NONE_TOKEN = "None"

_TIMESTAMP_FORMATS = ("%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%d", "%Y/%m/%d %H:%M")


def parse_frequency(freq: Union[str, timedelta, None]) -> Optional[timedelta]:
    if freq is None or isinstance(freq, timedelta):
        return freq
    if freq in _LABEL_TO_FREQUENCY:
        return _LABEL_TO_FREQUENCY[freq]
    raise ValueError(f"unknown frequency {freq!r}; expected one of {sorted(_LABEL_TO_FREQUENCY)}")


def frequency_label(freq: timedelta) -> str:
    if freq in FREQUENCY_LABELS:
        return FREQUENCY_LABELS[freq]
    seconds = int(freq.total_seconds())
    return f"{seconds}s"


def _readonly(arr) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for :func:`load_csv`.

    ``channels=None`` selects every column except the timestamp column.
    """

    timestamp_column: str = "date"
    channels: Optional[Sequence[str]] = None
    timestamp_format: Optional[str] = None
    frequency: Optional[str] = None
    allow_gaps: bool = False
    allow_empty: bool = False


@dataclass(frozen=True)
class SeriesFrame:
    timestamps: tuple
    channels: tuple
    values: np.ndarray
    frequency: timedelta
    domain_note: str = ""
    name: str = ""
    row_offset: int = 0

    def __post_init__(self):
        values = self.values
        if not (isinstance(values, np.ndarray) and not values.flags.writeable):
            values = _readonly(values)
        if values.ndim != 2:
            raise ValueError("values must be a T x d matrix")
        if values.shape != (len(self.timestamps), len(self.channels)):
            raise ValueError(
                f"values shape {values.shape} does not match "
                f"{len(self.timestamps)} timestamps x {len(self.channels)} channels"
            )
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "timestamps", tuple(self.timestamps))
        object.__setattr__(self, "channels", tuple(self.channels))

    @property
    def T(self) -> int:
        return len(self.timestamps)

    @property
    def d(self) -> int:
        return len(self.channels)

    @property
    def frequency_label(self) -> str:
        return frequency_label(self.frequency)

    def channel_index(self, channel: Union[int, str]) -> int:
        if isinstance(channel, (int, np.integer)):
            if not 0 <= channel < self.d:
                raise IndexError(f"channel {channel} out of range for {self.d} channels")
            return int(channel)
        try:
            return self.channels.index(channel)
        except ValueError:
            raise SchemaMismatch(f"channel {channel!r} not in {self.channels}") from None

    def rows(self, start: int, stop: int) -> "SeriesFrame":
        return SeriesFrame(
            timestamps=self.timestamps[start:stop],
            channels=self.channels,
            values=self.values[start:stop],
            frequency=self.frequency,
            domain_note=self.domain_note,
            name=self.name,
            row_offset=self.row_offset + start,
        )


@dataclass(frozen=True)
class WindowInstance:
    channel_id: int
    lookback_values: np.ndarray
    lookback_timestamps: tuple
    horizon_timestamps: tuple
    truth: np.ndarray
    origin_index: int
    frequency: timedelta = timedelta(hours=1)
    channel_name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "lookback_values", _readonly(self.lookback_values))
        object.__setattr__(self, "truth", _readonly(self.truth))
        object.__setattr__(self, "lookback_timestamps", tuple(self.lookback_timestamps))
        object.__setattr__(self, "horizon_timestamps", tuple(self.horizon_timestamps))
        if len(self.lookback_values) != len(self.lookback_timestamps):
            raise ValueError("lookback values and timestamps differ in length")
        if len(self.truth) != len(self.horizon_timestamps):
            raise ValueError("truth and horizon timestamps differ in length")

    @property
    def L(self) -> int:
        return len(self.lookback_values)

    @property
    def H(self) -> int:
        return len(self.horizon_timestamps)


@dataclass(frozen=True)
class MissingMask:
    indices: tuple
    seed: int = 0
    rate: float = 0.0

    def validate(self, length: int) -> None:
        for i in self.indices:
            if not 0 < i < length - 1:
                raise MaskOutOfRange(
                    f"mask index {i} outside interior positions [1, {length - 2}]"
                )


@dataclass(frozen=True)
class MissingVariant:
    """A window whose lookback went through one of the missing-data treatments.

    ``points`` holds ``(timestamp, value)`` pairs in which a value may be the
    literal ``"None"`` placeholder.
    """

    window: WindowInstance
    mode: str
    points: tuple
    mask: Optional[MissingMask] = None

    @property
    def timestamps(self) -> tuple:
        return tuple(t for t, _ in self.points)

    def numeric_values(self) -> np.ndarray:
        """Lookback values with placeholders as NaN."""
        return np.array(
            [np.nan if v == NONE_TOKEN else float(v) for _, v in self.points], dtype=float
        )


def _parse_timestamp(raw: str, fmt: Optional[str]) -> datetime:
    raw = raw.strip()
    if fmt:
        return datetime.strptime(raw, fmt)
    try:
        ts = datetime.fromisoformat(raw)
    except ValueError:
        for candidate in _TIMESTAMP_FORMATS:
            try:
                return datetime.strptime(raw, candidate)
            except ValueError:
                continue
        raise
    return ts.replace(tzinfo=None)


def load_csv(
    path: Union[str, Path],
    schema: Optional[CsvSchema] = None,
    *,
    domain_note: str = "",
    name: Optional[str] = None,
) -> SeriesFrame:
    """Load a headered CSV (timestamp column plus one column per channel)."""
    schema = schema or CsvSchema()
    path = Path(path)
    try:
        handle = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise FileUnreadable(f"cannot open {path}: {exc}") from exc

    with handle:
        reader = csv.reader(handle)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaMismatch(f"{path} is empty") from None
        except (csv.Error, UnicodeDecodeError) as exc:
            raise FileUnreadable(f"cannot read {path}: {exc}") from exc

        if schema.timestamp_column not in header:
            raise SchemaMismatch(f"timestamp column {schema.timestamp_column!r} absent from {header}")
        channels = (
            list(schema.channels)
            if schema.channels is not None
            else [h for h in header if h != schema.timestamp_column]
        )
        for ch in channels:
            if ch not in header:
                raise SchemaMismatch(f"channel column {ch!r} absent from {header}")
        ts_col = header.index(schema.timestamp_column)
        ch_cols = [header.index(ch) for ch in channels]

        timestamps = []
        rows = []
        try:
            for row_no, row in enumerate(reader):
                if not row:
                    continue
                try:
                    ts = _parse_timestamp(row[ts_col], schema.timestamp_format)
                except (ValueError, IndexError):
                    raw = row[ts_col] if ts_col < len(row) else ""
                    raise UnparseableCell(row_no, schema.timestamp_column, raw) from None
                if timestamps and ts <= timestamps[-1]:
                    raise NonMonotoneTimestamps(row_no, timestamps[-1], ts)
                parsed = []
                for ch, col in zip(channels, ch_cols):
                    raw = row[col].strip() if col < len(row) else ""
                    if raw == "":
                        if not schema.allow_empty:
                            raise UnparseableCell(row_no, ch, raw)
                        parsed.append(math.nan)
                        continue
                    try:
                        val = float(raw)
                    except ValueError:
                        raise UnparseableCell(row_no, ch, raw) from None
                    if not math.isfinite(val):
                        raise UnparseableCell(row_no, ch, raw)
                    parsed.append(val)
                timestamps.append(ts)
                rows.append(parsed)
        except (csv.Error, UnicodeDecodeError) as exc:
            raise FileUnreadable(f"cannot read {path}: {exc}") from exc

    frequency = parse_frequency(schema.frequency)
    gaps = [b - a for a, b in zip(timestamps, timestamps[1:])]
    if frequency is None:
        if not gaps:
            raise SchemaMismatch("cannot infer frequency from fewer than two rows")
        frequency = Counter(gaps).most_common(1)[0][0]
    if not schema.allow_gaps:
        for i, gap in enumerate(gaps):
            if gap != frequency:
                raise IrregularSampling(i + 1, frequency, gap)

    values = np.array(rows, dtype=float).reshape(len(rows), len(channels))
    return SeriesFrame(
        timestamps=tuple(timestamps),
        channels=tuple(channels),
        values=values,
        frequency=frequency,
        domain_note=domain_note,
        name=name if name is not None else path.stem,
    )


def split_boundaries(T: int, ratios: Sequence[float]) -> tuple:
    if len(ratios) != 3:
        raise InvalidRatios(f"expected three ratios, got {len(ratios)}")
    if any(r < 0 for r in ratios):
        raise InvalidRatios(f"ratios must be non-negative, got {tuple(ratios)}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidRatios(f"ratios must sum to 1, got {sum(ratios)!r}")
    # the epsilon keeps 0.7*17420 -> 12194 despite binary rounding
    first = math.floor(T * ratios[0] + 1e-9)
    second = math.floor(T * (ratios[0] + ratios[1]) + 1e-9)
    return first, min(second, T)


def chronological_split(
    frame: SeriesFrame, ratios: Sequence[float] = (0.7, 0.1, 0.2), min_rows: int = 0
) -> tuple:
    """Split into train/validation/test frames without shuffling.

    ``min_rows`` is normally ``L + H``; pass 0 to waive the length check.
    """
    first, second = split_boundaries(frame.T, ratios)
    parts = (frame.rows(0, first), frame.rows(first, second), frame.rows(second, frame.T))
    for label, part in zip(("train", "val", "test"), parts):
        if part.T < min_rows:
            raise PartTooShort(label, min_rows, part.T)
    return parts


def window_count(T: int, L: int, H: int, stride: int) -> int:
    if T < L + H:
        return 0
    return (T - L - H) // stride + 1


def slide_windows(
    frame: SeriesFrame, L: int, H: int, stride: Optional[int] = None, channel_id=0
) -> list:
    """Windows with horizon origins at ``L, L + stride, ...`` while ``origin + H <= T``.

    ``stride`` defaults to ``H`` (non-overlapping evaluation windows).
    """
    stride = H if stride is None else stride
    if L < 1 or H < 1 or stride < 1:
        raise ValueError(f"L, H and stride must be >= 1 (got {L}, {H}, {stride})")
    if frame.T < L + H:
        raise FrameTooShort(f"frame has {frame.T} rows, needs L + H = {L + H}")
    ch = frame.channel_index(channel_id)
    column = frame.values[:, ch]
    windows = []
    origin = L
    while origin + H <= frame.T:
        windows.append(
            WindowInstance(
                channel_id=ch,
                lookback_values=column[origin - L : origin],
                lookback_timestamps=frame.timestamps[origin - L : origin],
                horizon_timestamps=frame.timestamps[origin : origin + H],
                truth=column[origin : origin + H],
                origin_index=frame.row_offset + origin,
                frequency=frame.frequency,
                channel_name=frame.channels[ch],
            )
        )
        origin += stride
    return windows


def draw_mask(L: int, rate: float = 0.2, seed: int = 0) -> MissingMask:
    """Seeded mask over interior positions; endpoints stay observed."""
    if not 0 <= rate < 1:
        raise ValueError(f"rate must be in [0, 1), got {rate}")
    n = int(math.floor(rate * L + 0.5))
    interior = L - 2
    if n > max(interior, 0):
        raise MaskOutOfRange(f"cannot mask {n} of {L} positions without touching endpoints")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(np.arange(1, L - 1), size=n, replace=False) if n else []
    return MissingMask(indices=tuple(sorted(int(i) for i in chosen)), seed=seed, rate=rate)


def apply_missing(
    window: WindowInstance, mode: str = "full", mask: Optional[MissingMask] = None
) -> MissingVariant:
    if mode not in MISSING_MODES:
        raise ValueError(f"unknown missing mode {mode!r}")
    points = list(zip(window.lookback_timestamps, (float(v) for v in window.lookback_values)))
    if mode == "full" or mask is None:
        if mode != "full":
            raise ValueError(f"mode {mode!r} requires a mask")
        return MissingVariant(window, "full", tuple(points), None)

    mask.validate(window.L)
    masked = set(mask.indices)
    if mode == "no_imp":
        kept = [p for i, p in enumerate(points) if i not in masked]
    elif mode == "none_imp":
        kept = [(t, NONE_TOKEN) if i in masked else (t, v) for i, (t, v) in enumerate(points)]
    else:
        observed = np.array([i for i in range(window.L) if i not in masked])
        values = np.asarray(window.lookback_values)
        filled = np.interp(np.arange(window.L), observed, values[observed])
        kept = [(t, float(filled[i])) for i, (t, _) in enumerate(points)]
    return MissingVariant(window, mode, tuple(kept), mask)
