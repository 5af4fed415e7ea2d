import json
import threading
import time
from datetime import datetime, timedelta
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from tsreason.data import WindowInstance
from tsreason.exceptions import AuthMissing, FixtureMiss, RateLimited, UpstreamError
from tsreason.parsing import extract_answer_block, parse_forecast
from tsreason.prompt import PromptVariantConfig, build_prompt
from tsreason.providers import (
    CachedProvider,
    GenerationRecord,
    HttpChatProvider,
    NoisyMock,
    ProviderSpec,
    SamplingParams,
    SeasonalNaiveMock,
    cache_key,
    complete,
    linear_trend,
    make_provider,
    seasonal_naive,
    split_response,
)

HOUR = timedelta(hours=1)


@pytest.fixture
def prompt():
    L, H = 48, 12
    ts = [datetime(2016, 7, 1) + HOUR * i for i in range(L + H)]
    values = np.sin(np.arange(L) * 2 * np.pi / 24) + 10
    w = WindowInstance(0, values, ts[:L], ts[L:], np.zeros(H), L, HOUR, "OT")
    return build_prompt(w, None, PromptVariantConfig())


def answer(record, H):
    return parse_forecast(extract_answer_block(record.answer_text), H).values


def test_sampling_defaults():
    s = SamplingParams()
    assert (s.temperature, s.top_p, s.max_tokens) == (0.6, 0.7, 8192)
    with pytest.raises(ValueError):
        SamplingParams(top_p=0)


def test_seasonal_naive_and_trend():
    np.testing.assert_array_equal(seasonal_naive([1, 2, 3, 4], 2, 5), [3, 4, 3, 4, 3])
    np.testing.assert_allclose(linear_trend([1, 3, 5], 2), [7, 9])


def test_seasonal_mock_exact(prompt):
    rec = SeasonalNaiveMock(24).complete(prompt, SamplingParams())
    expected = seasonal_naive(prompt.series_values, 24, 12)
    assert answer(rec, 12) == list(expected)
    assert rec.trace_text and rec.provider_label == "mock_seasonal_naive(period=24)"


def test_noisy_mock_seeded(prompt):
    mock = NoisyMock(sigma=1.0, seed=5)
    a = mock.complete(prompt, SamplingParams(), 0)
    b = mock.complete(prompt, SamplingParams(), 0)
    c = mock.complete(prompt, SamplingParams(), 1)
    assert a.answer_text == b.answer_text != c.answer_text
    assert NoisyMock(sigma=0.0).complete(prompt, SamplingParams()).answer_text == \
        SeasonalNaiveMock(24).complete(prompt, SamplingParams()).answer_text


def test_scripted_mock(tmp_path, prompt):
    fixture = tmp_path / "f.json"
    fixture.write_text(json.dumps({
        prompt.prompt_hash: [
            {"content": "<FORECAST>1</FORECAST>", "reasoning_content": "think",
             "usage": {"completion_tokens": 9, "completion_tokens_details": {"reasoning_tokens": 5}}},
            "second <FORECAST>2</FORECAST>",
        ]
    }))
    mock = make_provider(ProviderSpec("mock_scripted", fixture=str(fixture)))
    r0 = mock.complete(prompt, SamplingParams(), 0)
    assert r0.trace_text == "think" and r0.reasoning_tokens == 5 and r0.usage_reported
    r1 = mock.complete(prompt, SamplingParams(), 1)
    assert r1.trace_text == "second " and r1.answer_text == "<FORECAST>2</FORECAST>"
    with pytest.raises(FixtureMiss):
        mock.complete(prompt, SamplingParams(), 2)
    with pytest.raises(FixtureMiss):
        mock.complete(prompt.with_correction("again"), SamplingParams(), 0)


def test_split_response():
    assert split_response("abc <FORECAST>1</FORECAST> tail") == ("abc ", "<FORECAST>1</FORECAST> tail")
    assert split_response("no block") == ("", "no block")
    assert split_response("<FORECAST>1</FORECAST>", "why") == ("why", "<FORECAST>1</FORECAST>")


def test_cache_hit_and_corruption(tmp_path, prompt, caplog):
    cached = CachedProvider(SeasonalNaiveMock(24), tmp_path / "cache")
    first = cached.complete(prompt, SamplingParams())
    second = cached.complete(prompt, SamplingParams())
    assert not first.cache_hit and second.cache_hit
    assert first.answer_text == second.answer_text
    assert (cached.requests, cached.cache_hits) == (2, 1)
    (entry,) = list((tmp_path / "cache").glob("*.json"))
    entry.write_text("{not json")
    third = cached.complete(prompt, SamplingParams())
    assert not third.cache_hit
    assert "corrupt" in caplog.text


def test_cache_key_sensitivity(prompt):
    base = cache_key(prompt, SamplingParams(), "p", 0)
    assert base != cache_key(prompt, SamplingParams(temperature=0.2), "p", 0)
    assert base != cache_key(prompt, SamplingParams(), "q", 0)
    assert base != cache_key(prompt, SamplingParams(), "p", 1)
    assert base == cache_key(prompt, SamplingParams(), "p", 0)


def test_record_round_trip():
    rec = GenerationRecord("t", "a", 1, 2, 3.0, "x", False, True, 4, 1)
    assert GenerationRecord.from_dict(rec.to_dict()) == rec


class _Stub:
    """Chat-completions stub with a scripted status sequence."""

    def __init__(self, statuses=(), delay=0.0):
        self.statuses = list(statuses)
        self.delay = delay
        self.requests = []
        self.in_flight = 0
        self.max_in_flight = 0
        self.lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                with stub.lock:
                    stub.requests.append((time.monotonic(), dict(self.headers), body))
                    status = stub.statuses.pop(0) if stub.statuses else 200
                    stub.in_flight += 1
                    stub.max_in_flight = max(stub.max_in_flight, stub.in_flight)
                time.sleep(stub.delay)
                with stub.lock:
                    stub.in_flight -= 1
                if status != 200:
                    self.send_response(status)
                    self.end_headers()
                    self.wfile.write(b"busy")
                    return
                payload = {
                    "choices": [{"message": {"content": "<FORECAST>1, 2</FORECAST>",
                                             "reasoning_content": "step one step two"}}],
                    "usage": {"prompt_tokens": 10, "completion_tokens": 20,
                              "completion_tokens_details": {"reasoning_tokens": 15}},
                }
                data = json.dumps(payload).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/v1/chat/completions"
        threading.Thread(target=self.server.serve_forever, daemon=True).start()

    def close(self):
        self.server.shutdown()


@pytest.fixture
def stub_factory():
    stubs = []

    def make(*args, **kwargs):
        stubs.append(_Stub(*args, **kwargs))
        return stubs[-1]

    yield make
    for s in stubs:
        s.close()


def _spec(url, **kw):
    base = dict(endpoint=url, model_name="m", auth_env_var="TSR_TEST_KEY", timeout=5,
                backoff_base=0.01, backoff_cap=0.05)
    base.update(kw)
    return ProviderSpec("http_chat", **base)


def test_http_success(stub_factory, prompt, monkeypatch):
    monkeypatch.setenv("TSR_TEST_KEY", "secret")
    stub = stub_factory()
    rec = complete(prompt, SamplingParams(seed=3), _spec(stub.url))
    assert rec.trace_text == "step one step two"
    assert rec.answer_text == "<FORECAST>1, 2</FORECAST>"
    assert (rec.prompt_tokens, rec.completion_tokens, rec.reasoning_tokens) == (10, 20, 15)
    _, headers, body = stub.requests[0]
    assert headers["Authorization"] == "Bearer secret"
    assert body["temperature"] == 0.6 and body["top_p"] == 0.7 and body["max_tokens"] == 8192
    assert body["seed"] == 3 and body["messages"][0]["content"] == prompt.text


def test_http_auth_missing(prompt, monkeypatch):
    monkeypatch.setenv("TSR_TEST_KEY", "")
    with pytest.raises(AuthMissing):
        complete(prompt, SamplingParams(), _spec("http://127.0.0.1:9/x"))


def test_http_retries_then_succeeds(stub_factory, prompt, monkeypatch):
    monkeypatch.setenv("TSR_TEST_KEY", "k")
    stub = stub_factory(statuses=[429, 503, 200])
    rec = complete(prompt, SamplingParams(), _spec(stub.url, max_retries=3))
    assert rec.answer_text.startswith("<FORECAST>")
    assert len(stub.requests) == 3


def test_http_retry_exhaustion(stub_factory, prompt, monkeypatch):
    monkeypatch.setenv("TSR_TEST_KEY", "k")
    stub = stub_factory(statuses=[429] * 10)
    with pytest.raises(RateLimited):
        complete(prompt, SamplingParams(), _spec(stub.url, max_retries=2))
    assert len(stub.requests) == 3


def test_http_client_error_not_retried(stub_factory, prompt, monkeypatch):
    monkeypatch.setenv("TSR_TEST_KEY", "k")
    stub = stub_factory(statuses=[400])
    with pytest.raises(UpstreamError) as info:
        complete(prompt, SamplingParams(), _spec(stub.url))
    assert info.value.status == 400 and len(stub.requests) == 1


def test_http_min_interval(stub_factory, prompt, monkeypatch):
    monkeypatch.setenv("TSR_TEST_KEY", "k")
    stub = stub_factory()
    provider = HttpChatProvider(_spec(stub.url, min_request_interval=100))
    for _ in range(3):
        provider.complete(prompt, SamplingParams())
    times = provider.gate.dispatch_times[-3:]
    assert all(b - a >= 0.099 for a, b in zip(times, times[1:]))


def test_bounded_parallelism(stub_factory, prompt, monkeypatch):
    from concurrent.futures import ThreadPoolExecutor

    monkeypatch.setenv("TSR_TEST_KEY", "k")
    stub = stub_factory(delay=0.05)
    provider = HttpChatProvider(_spec(stub.url, model_name="par"))
    with ThreadPoolExecutor(max_workers=3) as pool:
        list(pool.map(lambda i: provider.complete(prompt, SamplingParams(), i), range(9)))
    assert len(stub.requests) == 9
    assert 1 < stub.max_in_flight <= 3
