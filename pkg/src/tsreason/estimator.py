"""scikit-learn compatible wrappers around the forecasting pipeline."""

from __future__ import annotations

from datetime import datetime

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import WindowInstance, parse_frequency
from .metrics import mse
from .prompt import PromptVariantConfig, load_context
from .providers import CachedProvider, ProviderSpec, SamplingParams, make_provider
from .strategies import StrategyConfig, forecast_window


class InstanceNormalizer(TransformerMixin, BaseEstimator):
    """Per-row (per-window) standardization without affine parameters.

    ``transform`` records each row's mean and population std so that
    ``inverse_transform`` can map forecasts of the same rows back.
    """

    def fit(self, X, y=None):
        check_array(X)
        self.n_features_in_ = np.asarray(X).shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X)
        self.location_ = X.mean(axis=1, keepdims=True)
        self.scale_ = X.std(axis=1, keepdims=True)
        if np.any(self.scale_ == 0):
            raise ValueError("cannot normalize a constant window")
        return (X - self.location_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self, "scale_")
        X = check_array(X)
        return X * self.scale_ + self.location_


class TrainZScore(TransformerMixin, BaseEstimator):
    """Column-wise z-score with statistics from the training data."""

    def fit(self, X, y=None):
        X = check_array(X)
        self.mean_ = X.mean(axis=0)
        self.scale_ = X.std(axis=0)
        if np.any(self.scale_ == 0):
            raise ValueError("training data has a constant column")
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        return (check_array(X) - self.mean_) / self.scale_

    def inverse_transform(self, X):
        check_is_fitted(self, "mean_")
        return check_array(X) * self.scale_ + self.mean_


class ReasoningForecaster(RegressorMixin, BaseEstimator):
    """Zero-shot forecaster that prompts a completion backend per window.

    ``fit`` only records training statistics (needed for ``normalization="zscore"``).
    ``predict`` takes an ``(n_windows, L)`` array of lookbacks and returns the
    ``(n_windows, horizon)`` mean forecasts; the full bundles stay in
    ``bundles_``.

    Parameters
    ----------
    provider : ProviderSpec or dict
        Completion backend, e.g. ``{"kind": "mock_seasonal_naive", "period": 24}``.
    timestamps : array of datetimes, optional (passed to ``predict``)
        Required unless ``timestamp_mode="remove"``.
    """

    def __init__(self, provider=None, horizon=96, strategy="one_shot", rounds=4,
                 generations=3, temperature=0.6, top_p=0.7, max_tokens=8192, seed=None,
                 timestamp_mode="keep", shift_steps=0, context=None, normalization="raw",
                 precision=4, frequency="1h", cache_dir=None, max_parse_retries=2):
        self.provider = provider
        self.horizon = horizon
        self.strategy = strategy
        self.rounds = rounds
        self.generations = generations
        self.temperature = temperature
        self.top_p = top_p
        self.max_tokens = max_tokens
        self.seed = seed
        self.timestamp_mode = timestamp_mode
        self.shift_steps = shift_steps
        self.context = context
        self.normalization = normalization
        self.precision = precision
        self.frequency = frequency
        self.cache_dir = cache_dir
        self.max_parse_retries = max_parse_retries

    def fit(self, X, y=None):
        X = check_array(np.asarray(X, dtype=float).reshape(-1, 1) if np.ndim(X) == 1 else X)
        values = X.ravel()
        self.train_stats_ = (float(values.mean()), float(values.std()))
        self.n_features_in_ = X.shape[1]
        return self

    def _backend(self):
        spec = self.provider if self.provider is not None else {"kind": "mock_seasonal_naive"}
        if isinstance(spec, dict):
            spec = ProviderSpec(**spec)
        backend = make_provider(spec)
        return CachedProvider(backend, self.cache_dir) if self.cache_dir else backend

    def _configs(self, freq):
        sampling = SamplingParams(self.temperature, self.top_p, self.max_tokens, self.seed)
        strategy = StrategyConfig(self.strategy, self.rounds, self.generations, sampling,
                                  self.max_parse_retries)
        variant = PromptVariantConfig(
            timestamp_mode=self.timestamp_mode,
            shift=freq * self.shift_steps if self.timestamp_mode == "shift" else None,
            context_enabled=self.context is not None,
            normalization=self.normalization,
            value_precision=self.precision,
        )
        return strategy, variant

    def predict(self, X, timestamps=None):
        check_is_fitted(self, "train_stats_")
        X = check_array(X)
        freq = parse_frequency(self.frequency)
        if timestamps is None:
            if self.timestamp_mode != "remove":
                raise ValueError("timestamps are required unless timestamp_mode='remove'")
            epoch = datetime(2000, 1, 1)
            timestamps = [[epoch + freq * i for i in range(X.shape[1])]] * X.shape[0]
        strategy, variant = self._configs(freq)
        context = load_context(self.context) if isinstance(self.context, str) else self.context
        backend = self._backend()
        self.bundles_ = []
        out = np.empty((X.shape[0], self.horizon))
        for i, (row, ts) in enumerate(zip(X, timestamps)):
            ts = list(ts)
            horizon_ts = [ts[-1] + freq * (j + 1) for j in range(self.horizon)]
            window = WindowInstance(
                channel_id=0, lookback_values=row, lookback_timestamps=ts,
                horizon_timestamps=horizon_ts, truth=np.zeros(self.horizon),
                origin_index=i, frequency=freq,
            )
            bundle = forecast_window(window, context, variant, strategy, backend,
                                     train_stats=self.train_stats_)
            self.bundles_.append(bundle)
            out[i] = bundle.mean_forecast
        return out

    def score(self, X, y, timestamps=None):
        """Negative mean squared error over all windows and steps."""
        pred = self.predict(X, timestamps)
        return -mse(pred.ravel(), np.asarray(y, dtype=float).ravel())

