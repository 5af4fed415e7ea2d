"""Extraction of numeric forecasts from free-form model output."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Optional

from .exceptions import (
    BlockNotFound,
    NonFinite,
    NonNumericToken,
    ParseError,
    ParseFailure,
    UnbalancedMarkers,
    WrongLength,
)
from .prompt import FORECAST_CLOSE, FORECAST_OPEN

logger = logging.getLogger(__name__)

_NUMBER = r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?"
_NUMBER_RE = re.compile(_NUMBER)
_RUN_RE = re.compile(rf"{_NUMBER}(?:[ \t]*,[ \t\r\n]*{_NUMBER})*")
_SPLIT_RE = re.compile(r"[,\n]")


@dataclass
class ParsedAnswer:
    values: list
    source_span: tuple = (0, 0)
    repairs_applied: list = field(default_factory=list)


def _find_blocks(text: str, open_marker: str, close_marker: str) -> list:
    """Well-formed ``(start, end)`` content spans, in order of appearance."""
    blocks = []
    pos = 0
    while True:
        close = text.find(close_marker, pos)
        if close == -1:
            break
        opening = text.rfind(open_marker, pos, close)
        if opening != -1:
            blocks.append((opening + len(open_marker), close))
        pos = close + len(close_marker)
    return blocks


def extract_answer_block(
    text: str, open_marker: str = FORECAST_OPEN, close_marker: str = FORECAST_CLOSE,
    *, with_span: bool = False,
):
    """Content of the last well-formed marker pair."""
    if not open_marker or not close_marker or open_marker == close_marker:
        raise ValueError("markers must be non-empty and distinct")
    blocks = _find_blocks(text, open_marker, close_marker)
    if not blocks:
        if open_marker in text or close_marker in text:
            raise UnbalancedMarkers(f"no complete {open_marker}...{close_marker} pair")
        raise BlockNotFound(f"no {open_marker} block in response")
    start, end = blocks[-1]
    return (text[start:end], (start, end)) if with_span else text[start:end]


def parse_forecast(block_text: str, H: int) -> ParsedAnswer:
    if H < 1:
        raise ValueError("H must be >= 1")
    body = block_text.strip()
    if body.startswith("[") and body.endswith("]"):
        body = body[1:-1]
    tokens = [t.strip() for t in _SPLIT_RE.split(body)]
    tokens = [t for t in tokens if t]
    values = []
    for i, token in enumerate(tokens):
        if not _NUMBER_RE.fullmatch(token):
            raise NonNumericToken(token, i)
        value = float(token)
        if not math.isfinite(value):
            raise NonFinite(f"token {token!r} at position {i} overflows")
        values.append(value)
    if len(values) != H:
        raise WrongLength(len(values), H, values)
    return ParsedAnswer(values=values)


def _last_numeric_run(text: str, H: int):
    last = None
    for m in _RUN_RE.finditer(text):
        count = len(_NUMBER_RE.findall(m.group(0)))
        if 2 * count >= H:
            last = m
    return last


def _attempt(raw: str, H: int, repairs: list) -> ParsedAnswer:
    """One pass of extraction, fallback scan and truncation over a response."""
    try:
        block, span = extract_answer_block(raw, with_span=True)
    except (BlockNotFound, UnbalancedMarkers) as exc:
        run = _last_numeric_run(raw, H)
        if run is None:
            raise exc
        block, span = run.group(0), run.span()
        repairs.append("fallback_scan")
    try:
        parsed = parse_forecast(block, H)
    except WrongLength as exc:
        if exc.found > H:
            repairs.append("truncated")
            parsed = ParsedAnswer(values=exc.values[:H])
        else:
            raise
    parsed.source_span = span
    parsed.repairs_applied = list(repairs)
    return parsed


def corrective_instruction(found: Optional[int], H: int) -> str:
    got = f"had {found} values" if found is not None else "could not be parsed"
    return (
        f"Your previous answer {got}; output exactly {H} values inside "
        f"{FORECAST_OPEN}...{FORECAST_CLOSE} and nothing else."
    )


def parse_with_repair(
    raw_response: str,
    H: int,
    max_retries: int = 2,
    reprompt_fn: Optional[Callable[[str], str]] = None,
) -> ParsedAnswer:
    """Parse ``raw_response`` into exactly ``H`` values.

    Overlength answers are truncated; underlength or unparseable answers trigger
    up to ``max_retries`` calls of ``reprompt_fn(corrective_instruction)``, which
    must return the new raw response.
    """
    repairs: list = []
    raw = raw_response
    attempt = 0
    while True:
        try:
            return _attempt(raw, H, list(repairs))
        except ParseError as exc:
            found = exc.found if isinstance(exc, WrongLength) else None
            if reprompt_fn is None or attempt >= max_retries:
                raise ParseFailure(
                    f"could not parse {H} values after {attempt} reprompts: {exc}",
                    raw_text=raw,
                ) from exc
            attempt += 1
            logger.info("reprompting (attempt %d): %s", attempt, exc)
            raw = reprompt_fn(corrective_instruction(found, H))
            repairs.append(f"reprompted:{attempt}")


def whitespace_tokens(text: str) -> int:
    return len(text.split())


def trace_token_count(record) -> int:
    """CoT length of one generation.

    Uses backend-reported reasoning tokens if present, else reported completion
    tokens minus a whitespace estimate of the answer, else whitespace tokens of
    the trace.
    """
    if getattr(record, "reasoning_tokens", None) is not None:
        return int(record.reasoning_tokens)
    if getattr(record, "usage_reported", False):
        return max(0, int(record.completion_tokens) - whitespace_tokens(record.answer_text))
    return whitespace_tokens(record.trace_text)
