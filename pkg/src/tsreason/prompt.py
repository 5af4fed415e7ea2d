"""Hybrid prompt rendering and the prompt-ablation transforms.

A prompt carries the task directive (with the exact horizon), an optional
context block, the lookback series (timestamped or value-only), and the answer
contract ``<FORECAST>v1, ..., vH</FORECAST>``.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field, replace
from datetime import timedelta
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .data import NONE_TOKEN, MissingVariant, WindowInstance, apply_missing, frequency_label
from .exceptions import (
    DegenerateWindow,
    MissingTrainStats,
    OffsetNotMultipleOfFrequency,
    PromptError,
)

TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"
TIMESTAMP_MODES = ("keep", "remove", "shift")
NORMALIZATIONS = ("raw", "zscore", "revin")
FORECAST_OPEN = "<FORECAST>"
FORECAST_CLOSE = "</FORECAST>"
NORMALIZED_NOTE = (
    "Note: values are standardized; forecast in the same standardized scale."
)

_FREQUENCY_TEXT = {"3s": "3 seconds", "15min": "15 minutes", "1h": "1 hour", "1d": "1 day"}


@dataclass(frozen=True)
class ContextDescriptor:
    domain_text: str = ""
    channel_semantics: dict = field(default_factory=dict)
    frequency_text: str = ""

    @property
    def k(self) -> int:
        """Number of context fields actually provided."""
        return sum(bool(x) for x in (self.domain_text, self.frequency_text)) + len(
            self.channel_semantics
        )


def parse_context(text: str) -> ContextDescriptor:
    """Parse a sidecar file with ``[domain]``, ``[channels]`` and ``[frequency]`` sections.

    Channel lines are ``name: meaning``. Lines starting with ``#`` are ignored.
    """
    sections: dict = {}
    current = None
    for line in text.splitlines():
        stripped = line.strip()
        if stripped.startswith("#"):
            continue
        m = re.fullmatch(r"\[(\w+)\]", stripped)
        if m:
            current = m.group(1).lower()
            sections.setdefault(current, [])
            continue
        if current is not None and stripped:
            sections[current].append(stripped)
    channels = {}
    for line in sections.get("channels", []):
        name, sep, meaning = line.partition(":")
        if sep:
            channels[name.strip()] = meaning.strip()
    return ContextDescriptor(
        domain_text=" ".join(sections.get("domain", [])),
        channel_semantics=channels,
        frequency_text=" ".join(sections.get("frequency", [])),
    )


def load_context(source: Union[str, Path]) -> ContextDescriptor:
    """Load a context sidecar from a path, or by bundled dataset name (e.g. ``"etth1"``)."""
    path = Path(source)
    if path.suffix and path.exists():
        return parse_context(path.read_text(encoding="utf-8"))
    bundled = resources.files("tsreason.resources.contexts").joinpath(f"{str(source).lower()}.txt")
    if not bundled.is_file():
        raise FileNotFoundError(f"no context file at {source!r} and no bundled context of that name")
    return parse_context(bundled.read_text(encoding="utf-8"))


@dataclass(frozen=True)
class PromptVariantConfig:
    timestamp_mode: str = "keep"
    shift: Optional[timedelta] = None
    context_enabled: bool = True
    normalization: str = "raw"
    missing_mode: str = "full"
    value_precision: int = 4
    max_chars: Optional[int] = None

    def __post_init__(self):
        if self.timestamp_mode not in TIMESTAMP_MODES:
            raise ValueError(f"timestamp_mode must be one of {TIMESTAMP_MODES}")
        if self.timestamp_mode == "shift" and self.shift is None:
            raise ValueError("timestamp_mode 'shift' needs a shift offset")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")


@dataclass(frozen=True)
class NormalizationState:
    mode: str = "raw"
    location: float = 0.0
    scale: float = 1.0


@dataclass(frozen=True)
class HybridPrompt:
    directive: str
    context_block: Optional[str]
    series_header: str
    series_block: str
    answer_schema: str
    normalization_state: NormalizationState
    horizon: int
    series_values: tuple
    series_timestamps: Optional[tuple] = None
    horizon_timestamps: Optional[tuple] = None
    protocol_block: str = ""
    correction: str = ""

    @property
    def text(self) -> str:
        parts = [self.directive]
        if self.context_block:
            parts.append(self.context_block)
        parts.append(f"{self.series_header}\n{self.series_block}")
        if self.normalization_state.mode != "raw":
            parts.append(NORMALIZED_NOTE)
        if self.protocol_block:
            parts.append(self.protocol_block)
        parts.append(self.answer_schema)
        if self.correction:
            parts.append(self.correction)
        return "\n\n".join(parts)

    @property
    def prompt_hash(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()

    def with_correction(self, correction: str) -> "HybridPrompt":
        return replace(self, correction=correction)

    def observed_values(self) -> np.ndarray:
        """Shown series values with ``None`` placeholders dropped."""
        arr = np.asarray(self.series_values, dtype=float)
        return arr[np.isfinite(arr)]


def format_value(value, precision: Optional[int] = 4) -> str:
    """Render a value the way prompts show it; ``precision=None`` is lossless."""
    if isinstance(value, str):
        return value
    if precision is None:
        return repr(float(value))
    return f"{float(value):.{precision}f}"


def format_timestamp(ts) -> str:
    return ts.strftime(TIMESTAMP_FORMAT)


def transform_timestamps(
    timestamps: Sequence, mode: str = "keep", offset: Optional[timedelta] = None,
    frequency: Optional[timedelta] = None,
) -> Optional[tuple]:
    if mode == "keep":
        return tuple(timestamps)
    if mode == "remove":
        return None
    if mode != "shift":
        raise ValueError(f"unknown timestamp mode {mode!r}")
    if offset is None:
        raise ValueError("shift needs an offset")
    if frequency is not None and offset % frequency != timedelta(0):
        raise OffsetNotMultipleOfFrequency(
            f"offset {offset} is not a whole multiple of the frequency {frequency}"
        )
    return tuple(t + offset for t in timestamps)


def normalize_values(lookback, mode: str = "raw", train_stats=None):
    """Return ``(normalized, NormalizationState)``.

    ``zscore`` uses ``train_stats=(mean, std)`` from the training split; ``revin``
    uses the lookback's own mean and population std. NaN entries pass through and
    are excluded from statistics.
    """
    x = np.asarray(lookback, dtype=float)
    if mode == "raw":
        return x.copy(), NormalizationState("raw", 0.0, 1.0)
    if mode == "zscore":
        if train_stats is None:
            raise MissingTrainStats("zscore normalization needs training-split (mean, std)")
        location, scale = float(train_stats[0]), float(train_stats[1])
        if not scale > 0:
            raise DegenerateWindow(f"training std must be positive, got {scale}")
    elif mode == "revin":
        observed = x[np.isfinite(x)]
        if observed.size == 0:
            raise DegenerateWindow("no observed values in lookback")
        location = float(observed.mean())
        scale = float(observed.std())
        if not scale > 0:
            raise DegenerateWindow("lookback has zero variance")
    else:
        raise ValueError(f"unknown normalization {mode!r}")
    return (x - location) / scale, NormalizationState(mode, location, scale)


def denormalize_forecast(values, state: NormalizationState) -> np.ndarray:
    return np.asarray(values, dtype=float) * state.scale + state.location


def _directive(channel: str, H: int, horizon_ts, frequency: timedelta) -> str:
    name = f' "{channel}"' if channel else ""
    text = f"Forecast the next {H} values of the time series{name}."
    if horizon_ts:
        freq = _FREQUENCY_TEXT.get(frequency_label(frequency), frequency_label(frequency))
        text += (
            f" The forecast covers {format_timestamp(horizon_ts[0])} to "
            f"{format_timestamp(horizon_ts[-1])}, one value every {freq}."
        )
    return text


def _context_block(context: ContextDescriptor, channel: str) -> str:
    if not context.domain_text:
        raise PromptError("context is enabled but the descriptor has no domain text")
    lines = ["Context:", f"Domain: {context.domain_text}"]
    if channel in context.channel_semantics:
        lines.append(f'Channel "{channel}": {context.channel_semantics[channel]}')
    if context.frequency_text:
        lines.append(f"Sampling interval: {context.frequency_text}")
    return "\n".join(lines)


def answer_schema(H: int) -> str:
    return (
        "Reason step by step about level, trend, seasonality and recent dynamics. "
        f"Finish your response with exactly {H} comma-separated numbers inside one block: "
        f"{FORECAST_OPEN}v1, v2, ..., v{H}{FORECAST_CLOSE}"
    )


def build_prompt(
    window: Union[WindowInstance, MissingVariant],
    context: Optional[ContextDescriptor],
    variant: PromptVariantConfig,
    *,
    train_stats=None,
    protocol: str = "",
    history: Sequence = (),
    horizon_timestamps: Optional[Sequence] = None,
) -> HybridPrompt:
    """Render one channel's window into a :class:`HybridPrompt`.

    ``history`` appends already-forecast ``(timestamp, raw value)`` pairs after the
    lookback and ``horizon_timestamps`` narrows the requested horizon; together they
    express one rollout round.
    """
    if isinstance(window, WindowInstance):
        window = apply_missing(window, "full")
    base = window.window
    points = list(window.points) + [(t, float(v)) for t, v in history]
    horizon_ts = tuple(base.horizon_timestamps if horizon_timestamps is None else horizon_timestamps)
    H = len(horizon_ts)
    if H < 1:
        raise PromptError("horizon must contain at least one step")

    raw = np.array([np.nan if v == NONE_TOKEN else float(v) for _, v in points], dtype=float)
    normalized, state = normalize_values(raw, variant.normalization, train_stats)

    shown_ts = transform_timestamps(
        [t for t, _ in points], variant.timestamp_mode, variant.shift, base.frequency
    )
    shown_horizon = transform_timestamps(
        horizon_ts, variant.timestamp_mode, variant.shift, base.frequency
    )

    rendered = [
        NONE_TOKEN if math.isnan(v) else format_value(v, variant.value_precision)
        for v in normalized
    ]
    if shown_ts is None:
        lines = rendered
        header = f"Historical values ({len(lines)} points, oldest first, one per line):"
    else:
        lines = [f"{format_timestamp(t)}: {v}" for t, v in zip(shown_ts, rendered)]
        header = f"Historical observations ({len(lines)} points, oldest first, as timestamp: value):"

    context_block = None
    if variant.context_enabled and context is not None:
        context_block = _context_block(context, base.channel_name)

    prompt = HybridPrompt(
        directive=_directive(base.channel_name, H, shown_horizon, base.frequency),
        context_block=context_block,
        series_header=header,
        series_block="\n".join(lines),
        answer_schema=answer_schema(H),
        normalization_state=state,
        horizon=H,
        series_values=tuple(float(v) for v in normalized),
        series_timestamps=shown_ts,
        horizon_timestamps=shown_horizon,
        protocol_block=protocol,
    )
    if variant.max_chars is not None and len(prompt.text) > variant.max_chars:
        raise PromptError(f"prompt has {len(prompt.text)} characters, limit {variant.max_chars}")
    return prompt
