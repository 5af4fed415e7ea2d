"""One-shot, decoupled and rollout reasoning over a completion backend, plus
k-generation mean aggregation."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .data import MissingMask, MissingVariant, apply_missing
from .exceptions import MissingFinalBlock, ParseFailure
from .parsing import _find_blocks, parse_with_repair
from .prompt import (
    FORECAST_CLOSE,
    FORECAST_OPEN,
    ContextDescriptor,
    HybridPrompt,
    PromptVariantConfig,
    build_prompt,
    denormalize_forecast,
)
from .providers import SamplingParams

STRATEGIES = ("one_shot", "decoupled", "rollout")

DECOUPLED_PROTOCOL = (
    "Work in three stages within this single response. First, write a draft forecast "
    "inside <DRAFT>...</DRAFT>. Second, critique the draft in one short paragraph, "
    "checking its level, trend and seasonality against the history. Third, give the "
    f"revised final forecast inside {FORECAST_OPEN}...{FORECAST_CLOSE}. Only the final "
    "block is scored."
)


@dataclass(frozen=True)
class StrategyConfig:
    strategy: str = "one_shot"
    rounds: int = 4
    generations_k: int = 3
    sampling: SamplingParams = field(default_factory=SamplingParams)
    max_parse_retries: int = 2
    max_workers: int = 1

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.strategy == "rollout" and self.rounds < 2:
            raise ValueError("rollout needs at least 2 rounds")
        if self.generations_k < 1:
            raise ValueError("generations_k must be >= 1")

    @property
    def label(self) -> str:
        return f"rollout(c={self.rounds})" if self.strategy == "rollout" else self.strategy


class StrategyResult(NamedTuple):
    forecast: np.ndarray
    records: list
    repairs: list


@dataclass
class ForecastBundle:
    per_generation: np.ndarray
    mean_forecast: np.ndarray
    per_step_std: np.ndarray
    records: list
    repairs: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.per_generation)


def rollout_partition(H: int, rounds: int) -> list:
    """Per-round horizons: ``H // rounds`` each, the last round takes the remainder."""
    if not 1 <= rounds <= H:
        raise ValueError(f"rounds must be in [1, H={H}], got {rounds}")
    step = H // rounds
    return [step] * (rounds - 1) + [H - (rounds - 1) * step]


def _prepare(window, variant: PromptVariantConfig, mask: Optional[MissingMask]) -> MissingVariant:
    if isinstance(window, MissingVariant):
        return window
    if variant.missing_mode == "full":
        return apply_missing(window, "full")
    return apply_missing(window, variant.missing_mode, mask)


def _generate(prompt: HybridPrompt, provider, cfg: StrategyConfig, generation_index: int,
              records: list, require_final: bool = False):
    record = provider.complete(prompt, cfg.sampling, generation_index)
    records.append(record)
    raw = record.raw_response
    if require_final and not _find_blocks(raw, FORECAST_OPEN, FORECAST_CLOSE):
        if _find_blocks(raw, "<DRAFT>", "</DRAFT>"):
            raise MissingFinalBlock("response has a draft but no final forecast block", raw_text=raw)

    def reprompt(correction: str) -> str:
        retry = provider.complete(prompt.with_correction(correction), cfg.sampling, generation_index)
        records.append(retry)
        return retry.raw_response

    parsed = parse_with_repair(raw, prompt.horizon, cfg.max_parse_retries, reprompt)
    values = denormalize_forecast(parsed.values, prompt.normalization_state)
    return values, parsed.repairs_applied


def run_one_shot(window, context: Optional[ContextDescriptor], variant: PromptVariantConfig,
                 strategy_cfg: StrategyConfig, provider, *, mask=None, train_stats=None,
                 generation_index: int = 0) -> StrategyResult:
    prepared = _prepare(window, variant, mask)
    prompt = build_prompt(prepared, context, variant, train_stats=train_stats)
    records: list = []
    values, repairs = _generate(prompt, provider, strategy_cfg, generation_index, records)
    return StrategyResult(values, records, repairs)


def run_decoupled(window, context, variant, strategy_cfg, provider, *, mask=None,
                  train_stats=None, generation_index: int = 0) -> StrategyResult:
    prepared = _prepare(window, variant, mask)
    prompt = build_prompt(prepared, context, variant, train_stats=train_stats,
                          protocol=DECOUPLED_PROTOCOL)
    records: list = []
    values, repairs = _generate(prompt, provider, strategy_cfg, generation_index, records,
                                require_final=True)
    return StrategyResult(values, records, repairs)


def run_rollout(window, context, variant, strategy_cfg, provider, *, mask=None,
                train_stats=None, generation_index: int = 0) -> StrategyResult:
    prepared = _prepare(window, variant, mask)
    horizon = prepared.window.horizon_timestamps
    history: list = []
    records: list = []
    repairs: list = []
    start = 0
    for round_index, h in enumerate(rollout_partition(len(horizon), strategy_cfg.rounds)):
        round_ts = horizon[start:start + h]
        prompt = build_prompt(prepared, context, variant, train_stats=train_stats,
                              history=history, horizon_timestamps=round_ts)
        try:
            values, round_repairs = _generate(prompt, provider, strategy_cfg, generation_index, records)
        except ParseFailure as exc:
            exc.round_index = round_index
            raise
        repairs.extend(f"round{round_index}:{r}" for r in round_repairs)
        history.extend(zip(round_ts, values))
        start += h
    forecast = np.array([v for _, v in history], dtype=float)
    return StrategyResult(forecast, records, repairs)


_RUNNERS = {"one_shot": run_one_shot, "decoupled": run_decoupled, "rollout": run_rollout}


def run_strategy(window, context, variant, strategy_cfg, provider, **kwargs) -> StrategyResult:
    return _RUNNERS[strategy_cfg.strategy](window, context, variant, strategy_cfg, provider, **kwargs)


def aggregate(forecasts) -> tuple:
    """Mean and population std across generations, per step."""
    stacked = np.asarray(forecasts, dtype=float)
    return stacked.mean(axis=0), stacked.std(axis=0)


def forecast_window(window, context, variant, strategy_cfg: StrategyConfig, provider, *,
                    mask=None, train_stats=None) -> ForecastBundle:
    """Run ``generations_k`` independent generations and average them.

    Any failing generation fails the whole bundle.
    """
    def one(index: int) -> StrategyResult:
        return run_strategy(window, context, variant, strategy_cfg, provider,
                            mask=mask, train_stats=train_stats, generation_index=index)

    indices = range(strategy_cfg.generations_k)
    if strategy_cfg.max_workers > 1:
        with ThreadPoolExecutor(max_workers=strategy_cfg.max_workers) as pool:
            results = list(pool.map(one, indices))
    else:
        results = [one(i) for i in indices]

    per_generation = np.array([r.forecast for r in results], dtype=float)
    mean, std = aggregate(per_generation)
    return ForecastBundle(
        per_generation=per_generation,
        mean_forecast=mean,
        per_step_std=std,
        records=[r.records for r in results],
        repairs=[r.repairs for r in results],
    )
