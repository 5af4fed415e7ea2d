"""Zero-shot time series forecasting with reasoning LLMs."""

from .data import (
    CsvSchema,
    MissingMask,
    SeriesFrame,
    WindowInstance,
    apply_missing,
    chronological_split,
    draw_mask,
    load_csv,
    slide_windows,
)
from .diagnostics import Diagnosis, Thresholds, diagnose
from .estimator import InstanceNormalizer, ReasoningForecaster, TrainZScore
from .metrics import mae, mse, per_step_std, quantile_band
from .prompt import (
    ContextDescriptor,
    HybridPrompt,
    PromptVariantConfig,
    build_prompt,
    load_context,
)
from .providers import GenerationRecord, ProviderSpec, SamplingParams, make_provider
from .strategies import ForecastBundle, StrategyConfig, forecast_window

__version__ = "0.1.0"

__all__ = [
    "CsvSchema", "MissingMask", "SeriesFrame", "WindowInstance", "apply_missing",
    "chronological_split", "draw_mask", "load_csv", "slide_windows",
    "Diagnosis", "Thresholds", "diagnose",
    "InstanceNormalizer", "ReasoningForecaster", "TrainZScore",
    "mae", "mse", "per_step_std", "quantile_band",
    "ContextDescriptor", "HybridPrompt", "PromptVariantConfig", "build_prompt", "load_context",
    "GenerationRecord", "ProviderSpec", "SamplingParams", "make_provider",
    "ForecastBundle", "StrategyConfig", "forecast_window",
]
