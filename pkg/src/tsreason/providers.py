"""Completion backends: an OpenAI-style chat-completions client and offline mocks.

Every backend returns a :class:`GenerationRecord` whose ``trace_text`` and
``answer_text`` partition the raw response at the last ``<FORECAST>`` marker.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Union

import httpx
import numpy as np

from .exceptions import (
    AuthMissing,
    CacheCorrupt,
    FixtureMiss,
    RateLimited,
    Timeout,
    UpstreamError,
)
from .prompt import FORECAST_CLOSE, FORECAST_OPEN, HybridPrompt, format_value

logger = logging.getLogger(__name__)

PROVIDER_KINDS = ("http_chat", "mock_seasonal_naive", "mock_noisy", "mock_scripted")


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.6
    top_p: float = 0.7
    max_tokens: int = 8192
    seed: Optional[int] = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


@dataclass(frozen=True)
class ProviderSpec:
    kind: str
    period: int = 24
    base: str = "seasonal_naive"
    sigma: float = 0.0
    seed: int = 0
    fixture: Optional[str] = None
    endpoint: Optional[str] = None
    model_name: Optional[str] = None
    auth_env_var: str = "DEEPSEEK_API_KEY"
    timeout: float = 600.0
    max_retries: int = 5
    min_request_interval: float = 0.0  # milliseconds
    backoff_base: float = 1.0
    backoff_cap: float = 60.0

    def __post_init__(self):
        if self.kind not in PROVIDER_KINDS:
            raise ValueError(f"unknown provider kind {self.kind!r}")
        if self.kind == "http_chat" and not (self.endpoint and self.model_name):
            raise ValueError("http_chat needs endpoint and model_name")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.period < 1:
            raise ValueError("period must be >= 1")
        if self.base not in ("seasonal_naive", "linear_trend"):
            raise ValueError(f"unknown mock base {self.base!r}")
        if self.kind == "mock_scripted" and not self.fixture:
            raise ValueError("mock_scripted needs a fixture path")

    @property
    def label(self) -> str:
        if self.kind == "http_chat":
            return f"http_chat:{self.model_name}@{self.endpoint}"
        if self.kind == "mock_seasonal_naive":
            return f"mock_seasonal_naive(period={self.period})"
        if self.kind == "mock_noisy":
            return (
                f"mock_noisy(base={self.base},period={self.period},"
                f"sigma={self.sigma!r},seed={self.seed})"
            )
        digest = hashlib.sha256(Path(self.fixture).read_bytes()).hexdigest()[:12]
        return f"mock_scripted({digest})"


@dataclass
class GenerationRecord:
    trace_text: str
    answer_text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_ms: float = 0.0
    provider_label: str = ""
    cache_hit: bool = False
    usage_reported: bool = False
    reasoning_tokens: Optional[int] = None
    generation_index: int = 0

    @property
    def raw_response(self) -> str:
        return self.trace_text + self.answer_text

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GenerationRecord":
        """Strict constructor used for cache validation."""
        if not isinstance(data, dict):
            raise CacheCorrupt("record is not an object")
        types = {
            "trace_text": str, "answer_text": str, "prompt_tokens": int,
            "completion_tokens": int, "latency_ms": (int, float), "provider_label": str,
            "cache_hit": bool, "usage_reported": bool, "generation_index": int,
        }
        for name, typ in types.items():
            if name not in data or not isinstance(data[name], typ):
                raise CacheCorrupt(f"field {name!r} missing or mistyped")
        if data["completion_tokens"] < 0:
            raise CacheCorrupt("negative completion_tokens")
        rt = data.get("reasoning_tokens")
        if rt is not None and not isinstance(rt, int):
            raise CacheCorrupt("reasoning_tokens mistyped")
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


def split_response(content: str, reasoning: Optional[str] = None) -> tuple:
    """Partition a response into ``(trace, answer)`` at the last ``<FORECAST>``.

    A separate reasoning field is prepended to the trace.
    """
    content = content or ""
    reasoning = reasoning or ""
    cut = content.rfind(FORECAST_OPEN)
    if cut == -1:
        return reasoning, content
    return reasoning + content[:cut], content[cut:]


def _ws(text: str) -> int:
    return len(text.split())


def _forecast_text(values) -> str:
    return FORECAST_OPEN + ", ".join(format_value(v, None) for v in values) + FORECAST_CLOSE


class Provider:
    """Backend interface: ``complete(prompt, sampling, generation_index)``."""

    label = "provider"

    def complete(self, prompt: HybridPrompt, sampling: SamplingParams, generation_index: int = 0):
        raise NotImplementedError

    def _record(self, prompt, content, reasoning=None, generation_index=0, **usage):
        trace, answer = split_response(content, reasoning)
        return GenerationRecord(
            trace_text=trace,
            answer_text=answer,
            prompt_tokens=usage.get("prompt_tokens", _ws(prompt.text)),
            completion_tokens=usage.get("completion_tokens", _ws(trace + answer)),
            latency_ms=usage.get("latency_ms", 0.0),
            provider_label=self.label,
            usage_reported=usage.get("usage_reported", False),
            reasoning_tokens=usage.get("reasoning_tokens"),
            generation_index=generation_index,
        )


def seasonal_naive(values, period: int, H: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    season = values[-period:]
    return np.array([season[i % len(season)] for i in range(H)], dtype=float)


def linear_trend(values, H: int) -> np.ndarray:
    """Least-squares line through the series, extrapolated ``H`` steps."""
    y = np.asarray(values, dtype=float)
    x = np.arange(len(y), dtype=float)
    if len(y) < 2:
        return np.full(H, y[-1] if len(y) else 0.0)
    slope, intercept = np.polyfit(x, y, 1)
    return intercept + slope * np.arange(len(y), len(y) + H, dtype=float)


class SeasonalNaiveMock(Provider):
    def __init__(self, period: int = 24):
        self.period = period
        self.label = f"mock_seasonal_naive(period={period})"

    def complete(self, prompt, sampling, generation_index=0):
        forecast = seasonal_naive(prompt.observed_values(), self.period, prompt.horizon)
        trace = (
            f"Seasonal-naive mock: repeating the last {self.period} observed values "
            f"for {prompt.horizon} steps.\n"
        )
        return self._record(prompt, trace + _forecast_text(forecast), generation_index=generation_index)


class NoisyMock(Provider):
    """Deterministic base forecast plus seeded i.i.d. Gaussian noise."""

    def __init__(self, base="seasonal_naive", period=24, sigma=0.0, seed=0):
        self.base = base
        self.period = period
        self.sigma = sigma
        self.seed = seed
        self.label = ProviderSpec(
            "mock_noisy", period=period, base=base, sigma=sigma, seed=seed
        ).label

    def base_forecast(self, prompt) -> np.ndarray:
        observed = prompt.observed_values()
        if self.base == "linear_trend":
            return linear_trend(observed, prompt.horizon)
        return seasonal_naive(observed, self.period, prompt.horizon)

    def noise(self, prompt, sampling, generation_index) -> np.ndarray:
        entropy = [self.seed, int(prompt.prompt_hash[:16], 16), generation_index]
        if sampling.seed is not None:
            entropy.append(sampling.seed)
        rng = np.random.default_rng(entropy)
        return rng.normal(0.0, self.sigma, size=prompt.horizon) if self.sigma else np.zeros(prompt.horizon)

    def complete(self, prompt, sampling, generation_index=0):
        forecast = self.base_forecast(prompt) + self.noise(prompt, sampling, generation_index)
        trace = f"Noisy mock ({self.base}, sigma={self.sigma}), generation {generation_index}.\n"
        return self._record(prompt, trace + _forecast_text(forecast), generation_index=generation_index)


class ScriptedMock(Provider):
    """Replays responses keyed by prompt hash.

    Fixture values are a response (string, or object with ``content`` and optional
    ``reasoning_content``/``usage``) or a list of them indexed by generation. A
    ``"default"`` key answers any prompt hash not listed.
    """

    def __init__(self, fixture: Union[str, Path]):
        self.fixture_path = Path(fixture)
        raw = self.fixture_path.read_bytes()
        self.responses = json.loads(raw)
        self.label = f"mock_scripted({hashlib.sha256(raw).hexdigest()[:12]})"

    def complete(self, prompt, sampling, generation_index=0):
        key = prompt.prompt_hash
        entry = self.responses.get(key, self.responses.get("default"))
        if entry is None:
            raise FixtureMiss(f"no scripted response for prompt hash {key}")
        if isinstance(entry, list):
            if generation_index >= len(entry):
                raise FixtureMiss(f"prompt {key} scripts {len(entry)} generations, asked for #{generation_index}")
            entry = entry[generation_index]
        if isinstance(entry, str):
            return self._record(prompt, entry, generation_index=generation_index)
        usage = _usage_fields(entry.get("usage"))
        return self._record(
            prompt, entry.get("content", ""), entry.get("reasoning_content"),
            generation_index=generation_index, **usage,
        )


def _usage_fields(usage) -> dict:
    if not usage:
        return {}
    out = {
        "prompt_tokens": int(usage.get("prompt_tokens", 0)),
        "completion_tokens": int(usage.get("completion_tokens", 0)),
        "usage_reported": "completion_tokens" in usage,
    }
    details = usage.get("completion_tokens_details") or {}
    if details.get("reasoning_tokens") is not None:
        out["reasoning_tokens"] = int(details["reasoning_tokens"])
    return out


class RateGate:
    """Spaces consecutive dispatches at least ``min_interval`` seconds apart."""

    def __init__(self, min_interval: float = 0.0):
        self.min_interval = min_interval
        self._lock = threading.Lock()
        self._next = 0.0
        self.dispatch_times: list = []

    def wait(self) -> None:
        with self._lock:
            now = time.monotonic()
            if now < self._next:
                time.sleep(self._next - now)
                now = time.monotonic()
            self._next = now + self.min_interval
            self.dispatch_times.append(now)


_GATES: dict = {}
_GATES_LOCK = threading.Lock()


def _gate_for(label: str, min_interval: float) -> RateGate:
    with _GATES_LOCK:
        gate = _GATES.get(label)
        if gate is None or gate.min_interval != min_interval:
            gate = _GATES[label] = RateGate(min_interval)
        return gate


class HttpChatProvider(Provider):
    def __init__(self, spec: ProviderSpec, client: Optional[httpx.Client] = None):
        self.spec = spec
        self.label = spec.label
        self.gate = _gate_for(self.label, spec.min_request_interval / 1000.0)
        self._client = client

    def _backoff(self, attempt: int) -> float:
        delay = min(self.spec.backoff_cap, self.spec.backoff_base * 2 ** attempt)
        return delay * random.uniform(0.8, 1.2)

    def payload(self, prompt: HybridPrompt, sampling: SamplingParams) -> dict:
        body = {
            "model": self.spec.model_name,
            "messages": [{"role": "user", "content": prompt.text}],
            "temperature": sampling.temperature,
            "top_p": sampling.top_p,
            "max_tokens": sampling.max_tokens,
        }
        if sampling.seed is not None:
            body["seed"] = sampling.seed
        return body

    def complete(self, prompt, sampling, generation_index=0):
        key = os.environ.get(self.spec.auth_env_var, "")
        if not key:
            raise AuthMissing(f"environment variable {self.spec.auth_env_var} is unset or empty")
        headers = {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}
        body = self.payload(prompt, sampling)
        client = self._client or httpx.Client(timeout=self.spec.timeout)
        try:
            return self._dispatch(client, headers, body, prompt, generation_index)
        finally:
            if self._client is None:
                client.close()

    def _dispatch(self, client, headers, body, prompt, generation_index):
        last_exc = None
        for attempt in range(self.spec.max_retries + 1):
            if attempt:
                time.sleep(self._backoff(attempt - 1))
            self.gate.wait()
            started = time.perf_counter()
            try:
                resp = client.post(self.spec.endpoint, json=body, headers=headers)
            except httpx.TimeoutException as exc:
                last_exc = Timeout(f"request timed out after {self.spec.timeout}s: {exc}")
                continue
            except httpx.TransportError as exc:
                last_exc = UpstreamError(0, str(exc))
                continue
            latency = (time.perf_counter() - started) * 1000.0
            if resp.status_code == 429:
                last_exc = RateLimited(f"HTTP 429 after {attempt + 1} attempts: {resp.text[:200]}")
                continue
            if resp.status_code >= 500:
                last_exc = UpstreamError(resp.status_code, resp.text)
                continue
            if resp.status_code != 200:
                raise UpstreamError(resp.status_code, resp.text)
            try:
                data = resp.json()
                message = data["choices"][0]["message"]
            except (ValueError, KeyError, IndexError, TypeError):
                raise UpstreamError(resp.status_code, resp.text) from None
            usage = _usage_fields(data.get("usage"))
            return self._record(
                prompt, message.get("content") or "", message.get("reasoning_content"),
                generation_index=generation_index, latency_ms=latency, **usage,
            )
        logger.warning("giving up after %d attempts: %s", self.spec.max_retries + 1, last_exc)
        raise last_exc


def make_provider(spec: ProviderSpec) -> Provider:
    if spec.kind == "mock_seasonal_naive":
        return SeasonalNaiveMock(spec.period)
    if spec.kind == "mock_noisy":
        return NoisyMock(spec.base, spec.period, spec.sigma, spec.seed)
    if spec.kind == "mock_scripted":
        return ScriptedMock(spec.fixture)
    return HttpChatProvider(spec)


def _as_provider(provider) -> Provider:
    return make_provider(provider) if isinstance(provider, ProviderSpec) else provider


def complete(prompt: HybridPrompt, sampling: SamplingParams, provider, generation_index: int = 0):
    return _as_provider(provider).complete(prompt, sampling, generation_index)


def cache_key(prompt: HybridPrompt, sampling: SamplingParams, provider_label: str, generation_index: int) -> str:
    canonical = json.dumps(
        {
            "prompt": prompt.text,
            "sampling": asdict(sampling),
            "provider": provider_label,
            "generation": generation_index,
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class CachedProvider(Provider):
    """Content-addressed response cache in front of another provider."""

    def __init__(self, inner, cache_dir: Union[str, Path]):
        self.inner = _as_provider(inner)
        self.label = self.inner.label
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.requests = 0
        self.cache_hits = 0
        self._lock = threading.Lock()

    def complete(self, prompt, sampling, generation_index=0):
        key = cache_key(prompt, sampling, self.label, generation_index)
        path = self.cache_dir / f"{key}.json"
        if path.exists():
            try:
                data = json.loads(path.read_text(encoding="utf-8"))
                record = GenerationRecord.from_dict(data.get("record") if isinstance(data, dict) else None)
            except (ValueError, CacheCorrupt) as exc:
                logger.warning("cache entry %s is corrupt (%s); treating as miss", path.name, exc)
            else:
                record.cache_hit = True
                with self._lock:
                    self.requests += 1
                    self.cache_hits += 1
                return record
        record = self.inner.complete(prompt, sampling, generation_index)
        record.cache_hit = False
        _atomic_write_text(path, json.dumps({"key": key, "record": record.to_dict()}, sort_keys=True))
        with self._lock:
            self.requests += 1
        return record


def cached_complete(prompt, sampling, provider, cache_dir, generation_index: int = 0):
    return CachedProvider(provider, cache_dir).complete(prompt, sampling, generation_index)
