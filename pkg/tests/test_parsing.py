import math

import pytest
from hypothesis import given, settings, strategies as st

from tsreason.exceptions import (
    BlockNotFound,
    NonFinite,
    NonNumericToken,
    ParseFailure,
    UnbalancedMarkers,
    WrongLength,
)
from tsreason.parsing import (
    extract_answer_block,
    parse_forecast,
    parse_with_repair,
    trace_token_count,
)
from tsreason.prompt import format_value
from tsreason.providers import GenerationRecord


def render(values):
    return "<FORECAST>" + ", ".join(format_value(v, None) for v in values) + "</FORECAST>"


def test_last_block_wins():
    text = "draft <FORECAST>1, 2</FORECAST> then final <FORECAST>3, 4</FORECAST>"
    assert extract_answer_block(text) == "3, 4"


def test_nested_open_uses_innermost():
    assert extract_answer_block("<FORECAST> junk <FORECAST>5, 6</FORECAST>") == "5, 6"


def test_block_errors():
    with pytest.raises(BlockNotFound):
        extract_answer_block("no markers here")
    with pytest.raises(UnbalancedMarkers):
        extract_answer_block("<FORECAST>1, 2, 3")
    with pytest.raises(ValueError):
        extract_answer_block("x", "<A>", "<A>")


def test_parse_variants():
    assert parse_forecast("[1, 2.5, -3e2]", 3).values == [1.0, 2.5, -300.0]
    assert parse_forecast("1\n2\n3", 3).values == [1.0, 2.0, 3.0]
    assert parse_forecast(" 1 ,\n 2 , 3 ", 3).values == [1.0, 2.0, 3.0]


def test_parse_errors():
    with pytest.raises(NonNumericToken) as info:
        parse_forecast("1, two, 3", 3)
    assert info.value.position == 1
    with pytest.raises(WrongLength) as info:
        parse_forecast("1, 2", 3)
    assert info.value.found == 2
    with pytest.raises(NonFinite):
        parse_forecast("1, 1e999, 3", 3)
    with pytest.raises(NonNumericToken):
        parse_forecast("1, nan, 3", 3)


@settings(max_examples=500, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=64))
def test_round_trip(values):
    parsed = parse_with_repair(render(values), len(values))
    assert parsed.values == [float(v) for v in values]
    assert parsed.repairs_applied == []


@settings(max_examples=500, deadline=None)
@given(st.binary(max_size=300), st.integers(1, 10))
def test_never_panics(data, H):
    text = data.decode("utf-8", errors="replace")
    try:
        parsed = parse_with_repair(text, H)
    except ParseFailure as exc:
        assert exc.raw_text == text
    else:
        assert len(parsed.values) == H
        assert all(math.isfinite(v) for v in parsed.values)


def test_truncation():
    parsed = parse_with_repair(render([1, 2, 3, 4, 5]), 3)
    assert parsed.values == [1.0, 2.0, 3.0]
    assert parsed.repairs_applied == ["truncated"]


def test_fallback_scan():
    parsed = parse_with_repair("I think the answer is 1, 2, 3, 4 overall", 4)
    assert parsed.values == [1.0, 2.0, 3.0, 4.0]
    assert parsed.repairs_applied == ["fallback_scan"]


def test_fallback_needs_half_horizon():
    with pytest.raises(ParseFailure):
        parse_with_repair("only 1, 2 here", 8)


def test_reprompt_path():
    calls = []

    def reprompt(correction):
        calls.append(correction)
        return render([7, 8, 9])

    parsed = parse_with_repair(render([1, 2]), 3, max_retries=2, reprompt_fn=reprompt)
    assert parsed.values == [7.0, 8.0, 9.0]
    assert parsed.repairs_applied == ["reprompted:1"]
    assert "had 2 values" in calls[0] and "exactly 3" in calls[0]


def test_reprompt_exhaustion_carries_raw():
    with pytest.raises(ParseFailure) as info:
        parse_with_repair(render([1]), 3, max_retries=2, reprompt_fn=lambda c: "still bad")
    assert info.value.raw_text == "still bad"


def test_trace_tokens():
    rec = GenerationRecord("a b c d", "<FORECAST>1</FORECAST>")
    assert trace_token_count(rec) == 4
    rec = GenerationRecord("x", "<FORECAST>1, 2</FORECAST>", completion_tokens=100, usage_reported=True)
    assert trace_token_count(rec) == 98
    rec = GenerationRecord("x", "y", completion_tokens=100, usage_reported=True, reasoning_tokens=77)
    assert trace_token_count(rec) == 77
