"""Run configuration: YAML documents with ``include`` for dataset/provider presets."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import timedelta
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml

from .data import MISSING_MODES, CsvSchema, parse_frequency
from .exceptions import ConfigInvalid
from .prompt import NORMALIZATIONS, TIMESTAMP_MODES, PromptVariantConfig
from .providers import PROVIDER_KINDS, ProviderSpec, SamplingParams
from .strategies import STRATEGIES, StrategyConfig

SWEEP_LENGTHS = (48, 72, 96, 120, 144, 168, 192)
PRESET_PREFIX = "preset:"


@dataclass(frozen=True)
class DatasetConfig:
    path: str = ""
    name: str = ""
    timestamp_column: str = "date"
    channels: Optional[tuple] = None
    timestamp_format: Optional[str] = None
    frequency: Optional[str] = None
    allow_gaps: bool = False
    context: Optional[str] = None
    domain_note: str = ""

    def schema(self) -> CsvSchema:
        return CsvSchema(
            timestamp_column=self.timestamp_column,
            channels=self.channels,
            timestamp_format=self.timestamp_format,
            frequency=self.frequency,
            allow_gaps=self.allow_gaps,
        )


@dataclass(frozen=True)
class VariantConfig:
    """Serializable prompt variant; ``shift_steps`` counts frequency steps."""

    label: str = "baseline"
    timestamps: str = "keep"
    shift_steps: int = 0
    context: bool = True
    normalization: str = "raw"
    missing: str = "full"
    missing_rate: float = 0.2
    precision: int = 4

    def prompt_config(self, frequency: timedelta) -> PromptVariantConfig:
        return PromptVariantConfig(
            timestamp_mode=self.timestamps,
            shift=frequency * self.shift_steps if self.timestamps == "shift" else None,
            context_enabled=self.context,
            normalization=self.normalization,
            missing_mode=self.missing,
            value_precision=self.precision,
        )


def ablation_variants(base: VariantConfig, shift_steps: int = 24) -> list:
    """The seven prompt-ablation rows, in table order."""
    return [
        replace(base, label="baseline"),
        replace(base, label="w/o timestamps", timestamps="remove"),
        replace(base, label="w/ forward shifting", timestamps="shift", shift_steps=shift_steps),
        replace(base, label="w/ backward shifting", timestamps="shift", shift_steps=-shift_steps),
        replace(base, label="w/o context", context=False),
        replace(base, label="w/ Z-score", normalization="zscore"),
        replace(base, label="w/ RevIN", normalization="revin"),
    ]


def missing_variants(base: VariantConfig) -> list:
    return [
        replace(base, label="Full", missing="full"),
        replace(base, label="No-Imp", missing="no_imp"),
        replace(base, label="None-Imp", missing="none_imp"),
        replace(base, label="Lin-Imp", missing="lin_imp"),
    ]


def named_variant(name: str, base: VariantConfig, shift_steps: int = 24) -> VariantConfig:
    for v in ablation_variants(base, shift_steps) + missing_variants(base):
        if v.label == name:
            return v
    raise ConfigInvalid("sweep.variant", f"unknown variant {name!r}")


@dataclass(frozen=True)
class SweepAxes:
    lookback: tuple = ()
    horizon: tuple = ()
    temperature: tuple = ()
    strategy: tuple = ()
    variant: tuple = ()

    def active(self) -> list:
        return [(f.name, getattr(self, f.name)) for f in fields(self) if getattr(self, f.name)]


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    split: tuple = (0.7, 0.1, 0.2)
    lookback: int = 96
    horizon: int = 96
    stride: Optional[int] = None
    channels_limit: Optional[int] = None
    max_windows: Optional[int] = None
    strategy: str = "one_shot"
    rounds: int = 4
    generations: int = 3
    sampling: SamplingParams = field(default_factory=SamplingParams)
    variant: VariantConfig = field(default_factory=VariantConfig)
    provider: ProviderSpec = field(default_factory=lambda: ProviderSpec("mock_seasonal_naive"))
    sweep: SweepAxes = field(default_factory=SweepAxes)
    output_dir: str = "runs"
    cache_dir: Optional[str] = ".tsreason-cache"
    max_parallel_requests: int = 4
    max_parse_retries: int = 2
    seed: int = 0
    failure_tolerance: float = 0.05
    max_grid: int = 64
    uncertainty_k: int = 50
    band_level: float = 0.8
    ablate_shift_steps: int = 24

    def __post_init__(self):
        _validate(self)

    @property
    def effective_stride(self) -> int:
        return self.horizon if self.stride is None else self.stride

    def strategy_config(self, generations: Optional[int] = None) -> StrategyConfig:
        return StrategyConfig(
            strategy=self.strategy,
            rounds=self.rounds,
            generations_k=self.generations if generations is None else generations,
            sampling=self.sampling,
            max_parse_retries=self.max_parse_retries,
        )

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:8]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _check(cond, name, reason):
    if not cond:
        raise ConfigInvalid(name, reason)


def _validate(cfg: RunConfig) -> None:
    _check(cfg.lookback >= 1, "lookback", f"must be >= 1, got {cfg.lookback}")
    _check(cfg.horizon >= 1, "horizon", f"must be >= 1, got {cfg.horizon}")
    _check(cfg.stride is None or cfg.stride >= 1, "stride", "must be >= 1")
    _check(len(cfg.split) == 3 and abs(sum(cfg.split) - 1) <= 1e-9, "split", "three ratios summing to 1")
    _check(cfg.strategy in STRATEGIES, "strategy", f"must be one of {STRATEGIES}")
    _check(cfg.strategy != "rollout" or 2 <= cfg.rounds <= cfg.horizon, "rounds",
           "rollout needs 2 <= rounds <= horizon")
    _check(cfg.generations >= 1, "generations", "must be >= 1")
    _check(cfg.uncertainty_k >= 2, "uncertainty_k", "must be >= 2")
    _check(0 < cfg.band_level < 1, "band_level", "must be in (0, 1)")
    _check(cfg.max_parallel_requests >= 1, "max_parallel_requests", "must be >= 1")
    _check(0 <= cfg.failure_tolerance <= 1, "failure_tolerance", "must be in [0, 1]")
    v = cfg.variant
    _check(v.timestamps in TIMESTAMP_MODES, "variant.timestamps", f"must be one of {TIMESTAMP_MODES}")
    _check(v.normalization in NORMALIZATIONS, "variant.normalization", f"must be one of {NORMALIZATIONS}")
    _check(v.missing in MISSING_MODES, "variant.missing", f"must be one of {MISSING_MODES}")
    _check(0 <= v.missing_rate < 1, "variant.missing_rate", "must be in [0, 1)")
    _check(v.precision >= 0, "variant.precision", "must be >= 0")
    for name, values in cfg.sweep.active():
        if name in ("lookback", "horizon"):
            _check(all(int(x) >= 1 for x in values), f"sweep.{name}", "values must be >= 1")
        if name == "temperature":
            _check(all(float(x) >= 0 for x in values), "sweep.temperature", "values must be >= 0")
        if name == "strategy":
            _check(all(x in STRATEGIES for x in values), "sweep.strategy", f"values must be in {STRATEGIES}")


def _load_document(source: str, base_dir: Path) -> tuple:
    if source.startswith(PRESET_PREFIX):
        name = source[len(PRESET_PREFIX):].replace("-", "_")
        res = resources.files("tsreason.resources.presets").joinpath(f"{name}.yaml")
        if not res.is_file():
            raise ConfigInvalid("include", f"no bundled preset {name!r}")
        return yaml.safe_load(res.read_text(encoding="utf-8")) or {}, base_dir
    path = Path(source)
    if not path.is_absolute():
        path = base_dir / path
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigInvalid("include", f"cannot read {path}: {exc}") from exc
    return yaml.safe_load(text) or {}, path.parent


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_document(doc: dict, base_dir: Path, _depth: int = 0) -> dict:
    """Expand ``include`` entries depth-first; the including document wins."""
    if _depth > 8:
        raise ConfigInvalid("include", "include nesting too deep")
    includes = doc.get("include") or []
    if isinstance(includes, str):
        includes = [includes]
    merged: dict = {}
    for inc in includes:
        sub, sub_dir = _load_document(str(inc), base_dir)
        merged = _merge(merged, resolve_document(sub, sub_dir, _depth + 1))
    own = {k: v for k, v in doc.items() if k != "include"}
    if isinstance(own.get("dataset"), dict) and own["dataset"].get("path"):
        p = Path(own["dataset"]["path"])
        if not p.is_absolute():
            own["dataset"] = dict(own["dataset"], path=str((base_dir / p).resolve()))
    if isinstance(own.get("provider"), dict) and own["provider"].get("fixture"):
        p = Path(own["provider"]["fixture"])
        if not p.is_absolute():
            own["provider"] = dict(own["provider"], fixture=str((base_dir / p).resolve()))
    return _merge(merged, own)


def _build(cls, data, name):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigInvalid(name, "expected a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigInvalid(name, f"unknown keys {sorted(unknown)}")
    data = {k: (tuple(v) if isinstance(v, list) else v) for k, v in data.items()}
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(name, str(exc)) from exc


def config_from_dict(doc: dict) -> RunConfig:
    doc = dict(doc)
    parts = {}
    for key, cls in (("dataset", DatasetConfig), ("sampling", SamplingParams),
                     ("variant", VariantConfig), ("sweep", SweepAxes)):
        if key in doc:
            parts[key] = _build(cls, doc.pop(key), key)
    if "provider" in doc:
        prov = doc.pop("provider")
        if isinstance(prov, dict) and prov.get("kind") not in PROVIDER_KINDS:
            raise ConfigInvalid("provider.kind", f"must be one of {PROVIDER_KINDS}")
        parts["provider"] = _build(ProviderSpec, prov, "provider")
    if "dataset" in parts and parts["dataset"].frequency is not None:
        try:
            parse_frequency(parts["dataset"].frequency)
        except ValueError as exc:
            raise ConfigInvalid("dataset.frequency", str(exc)) from exc
    known = {f.name for f in fields(RunConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigInvalid("config", f"unknown keys {sorted(unknown)}")
    doc = {k: (tuple(v) if isinstance(v, list) else v) for k, v in doc.items()}
    try:
        return RunConfig(**doc, **parts)
    except TypeError as exc:
        raise ConfigInvalid("config", str(exc)) from exc


def load_config(path, overrides: Optional[dict] = None) -> RunConfig:
    """Load a YAML run config, expand includes, then apply dotted-key overrides."""
    path = Path(path)
    doc, base_dir = _load_document(str(path.resolve()), path.parent)
    doc = resolve_document(doc, base_dir)
    for dotted, value in (overrides or {}).items():
        target = doc
        *parents, leaf = dotted.split(".")
        for p in parents:
            target = target.setdefault(p, {})
        target[leaf] = value
    return config_from_dict(doc)


def parse_provider_arg(arg: str) -> dict:
    """``kind[:key=value,...]`` or ``preset:<name>`` into a provider mapping."""
    if arg.startswith(PRESET_PREFIX):
        doc, _ = _load_document(arg, Path.cwd())
        return doc.get("provider", {})
    kind, _, rest = arg.partition(":")
    out: dict = {"kind": kind}
    for item in filter(None, rest.split(",")):
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigInvalid("--provider", f"expected key=value, got {item!r}")
        out[key.strip()] = yaml.safe_load(value)
    return out
