"""Experiment execution: forecast, sweep, uncertainty, ablation and offline diagnosis.

A run directory holds ``manifest.json``, ``records.jsonl`` (one line per
(window, channel) task), ``summary.csv`` and, depending on the command,
``uncertainty/*.csv``, ``heatmap.csv``, ``diagnosis_summary.csv`` and
``failures/*.txt``.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from .config import (
    RunConfig,
    SweepAxes,
    ablation_variants,
    missing_variants,
    named_variant,
)
from .data import (
    MissingMask,
    WindowInstance,
    chronological_split,
    draw_mask,
    load_csv,
    slide_windows,
)
from .diagnostics import Thresholds, diagnose
from .exceptions import (
    ConfigInvalid,
    GridTooLarge,
    ParseFailure,
    RunDirMissing,
    TSReasonError,
)
from .metrics import (
    QUANTILE_METHOD,
    EvalRecord,
    aggregate_dataset,
    cot_decile_heatmap,
    mae,
    mse,
    uncertainty_report,
    write_heatmap_csv,
    write_summary_csv,
)
from .parsing import trace_token_count
from .prompt import ContextDescriptor, load_context
from .providers import CachedProvider, Provider, _atomic_write_text, make_provider
from .strategies import forecast_window

logger = logging.getLogger(__name__)

FAILURE_MODES = ("peak_clipping", "phase_shift", "copy_paste", "constant_collapse")


@dataclass(frozen=True)
class Task:
    task_id: str
    window: WindowInstance
    train_stats: Optional[tuple]
    mask: Optional[MissingMask]


@dataclass
class RunResult:
    run_dir: Path
    manifest: dict
    summary: list
    exit_code: int


def run_id(cfg: RunConfig, now: Optional[datetime] = None) -> str:
    now = now or datetime.now(timezone.utc)
    return f"{now:%Y%m%dT%H%M%S%fZ}-{cfg.digest()}"


def _task_seed(seed: int, origin: int, channel: int) -> int:
    return int(np.random.SeedSequence([seed, origin, channel]).generate_state(1)[0])


def load_context_for(cfg: RunConfig) -> Optional[ContextDescriptor]:
    if cfg.dataset.context:
        return load_context(cfg.dataset.context)
    if cfg.dataset.domain_note:
        return ContextDescriptor(domain_text=cfg.dataset.domain_note)
    return None


def build_tasks(cfg: RunConfig) -> tuple:
    """Load the dataset and enumerate (window, channel) tasks on the test split."""
    if not cfg.dataset.path:
        raise ConfigInvalid("dataset.path", "required")
    frame = load_csv(cfg.dataset.path, cfg.dataset.schema(), domain_note=cfg.dataset.domain_note,
                     name=cfg.dataset.name or None)
    train, _, test = chronological_split(frame, cfg.split)
    channels = list(range(frame.d))
    if cfg.channels_limit is not None:
        channels = channels[:cfg.channels_limit]
    tasks = []
    for ch in channels:
        column = train.values[:, ch]
        std = float(column.std()) if train.T else 0.0
        train_stats = (float(column.mean()), std) if std > 0 else None
        windows = slide_windows(test, cfg.lookback, cfg.horizon, cfg.effective_stride, ch)
        if cfg.max_windows is not None:
            windows = windows[:cfg.max_windows]
        for w in windows:
            mask = None
            if cfg.variant.missing != "full":
                mask = draw_mask(cfg.lookback, cfg.variant.missing_rate,
                                 _task_seed(cfg.seed, w.origin_index, ch))
            tasks.append(Task(f"ch{ch}-o{w.origin_index}", w, train_stats, mask))
    return frame, tasks


class Manifest:
    """Run state, rewritten atomically on every change."""

    def __init__(self, path: Path, data: dict):
        self.path = path
        self.data = data
        self._lock = threading.Lock()

    @classmethod
    def create(cls, path: Path, rid: str, cfg: RunConfig, task_ids) -> "Manifest":
        data = {
            "run_id": rid,
            "config": cfg.to_dict(),
            "tasks": {t: "pending" for t in task_ids},
            "counts": {},
            "totals": {"requests": 0, "cache_hits": 0, "parse_failures": 0},
            "duration_s": 0.0,
            "quantile_method": QUANTILE_METHOD,
            "diagnosis_thresholds": asdict(Thresholds()),
            "evaluation": {"stride": cfg.effective_stride, "channels_limit": cfg.channels_limit},
        }
        m = cls(path, data)
        m.save()
        return m

    @classmethod
    def load(cls, path: Path) -> "Manifest":
        return cls(path, json.loads(path.read_text(encoding="utf-8")))

    def save(self) -> None:
        counts = {"pending": 0, "done": 0, "failed": 0}
        for status in self.data["tasks"].values():
            counts[status] += 1
        self.data["counts"] = counts
        _atomic_write_text(self.path, json.dumps(self.data, indent=2, sort_keys=True))

    def set_status(self, task_id: str, status: str, parse_failure: bool = False) -> None:
        with self._lock:
            self.data["tasks"][task_id] = status
            if parse_failure:
                self.data["totals"]["parse_failures"] += 1
            self.save()

    def add_totals(self, requests: int, cache_hits: int, duration: float) -> None:
        with self._lock:
            self.data["totals"]["requests"] += requests
            self.data["totals"]["cache_hits"] += cache_hits
            self.data["duration_s"] += duration
            self.save()


def _floats(values) -> list:
    return [float(v) for v in values]


def _record_line(task: Task, cfg: RunConfig, strategy_label: str) -> dict:
    w = task.window
    return {
        "task_id": task.task_id,
        "dataset": cfg.dataset.name or Path(cfg.dataset.path).stem,
        "channel_id": w.channel_id,
        "channel": w.channel_name,
        "origin_index": w.origin_index,
        "horizon_start": w.horizon_timestamps[0].isoformat(sep=" "),
        "strategy": strategy_label,
        "variant": cfg.variant.label,
        "lookback": _floats(w.lookback_values),
        "truth": _floats(w.truth),
    }


def _write_uncertainty_csv(path: Path, report, truth) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "mean", "lower", "upper", "std", "truth"])
        for i in range(len(truth)):
            writer.writerow([
                i + 1, repr(float(report.mean[i])), repr(float(report.band_lower[i])),
                repr(float(report.band_upper[i])), repr(float(report.per_step_std[i])),
                repr(float(truth[i])),
            ])


def _run_task(task, cfg, context, provider, run_dir, mode, k, level) -> dict:
    strategy_cfg = cfg.strategy_config(generations=k)
    line = _record_line(task, cfg, strategy_cfg.label)
    variant = cfg.variant.prompt_config(task.window.frequency)
    try:
        bundle = forecast_window(task.window, context, variant, strategy_cfg, provider,
                                 mask=task.mask, train_stats=task.train_stats)
    except ParseFailure as exc:
        failures = run_dir / "failures"
        failures.mkdir(exist_ok=True)
        (failures / f"{task.task_id}.txt").write_text(exc.raw_text, encoding="utf-8")
        return {**line, "status": "failed", "parse_failure": True,
                "error": f"{type(exc).__name__}: {exc}"}
    except TSReasonError as exc:
        return {**line, "status": "failed", "parse_failure": False,
                "error": f"{type(exc).__name__}: {exc}"}

    truth = task.window.truth
    generations = []
    for g in range(bundle.k):
        records = bundle.records[g]
        generations.append({
            "forecast": _floats(bundle.per_generation[g]),
            "mse": mse(bundle.per_generation[g], truth),
            "cot_tokens": int(sum(trace_token_count(r) for r in records)),
            "repairs": list(bundle.repairs[g]),
            "records": [r.to_dict() for r in records],
        })
    mean = bundle.mean_forecast
    line.update(
        status="done",
        mean_forecast=_floats(mean),
        per_step_std=_floats(bundle.per_step_std),
        eval={
            "mse": mse(mean, truth),
            "mae": mae(mean, truth),
            "cot_tokens": int(round(np.mean([g["cot_tokens"] for g in generations]))),
            "repairs": [r for g in generations for r in g["repairs"]],
        },
        diagnosis=diagnose(mean, task.window.lookback_values, truth).to_dict(),
        generations=generations,
    )
    if mode == "uncertainty":
        report = uncertainty_report(bundle.per_generation, truth, level)
        out = run_dir / "uncertainty"
        out.mkdir(exist_ok=True)
        _write_uncertainty_csv(out / f"{task.task_id}.csv", report, truth)
        line["uncertainty"] = {
            "level": level,
            "coverage": report.coverage,
            "mean_std": float(np.mean(report.per_step_std)),
            "band_lower": _floats(report.band_lower),
            "band_upper": _floats(report.band_upper),
        }
    return line


def read_records(path: Path) -> tuple:
    """Parsed JSONL lines and the count of malformed lines skipped."""
    lines, bad = [], 0
    if not path.exists():
        return lines, bad
    for raw in path.read_text(encoding="utf-8").splitlines():
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except ValueError:
            bad += 1
            continue
        if not isinstance(obj, dict) or "task_id" not in obj or "status" not in obj:
            bad += 1
            continue
        lines.append(obj)
    return lines, bad


def eval_record(line: dict) -> EvalRecord:
    failed = line["status"] != "done"
    ev = line.get("eval", {})
    return EvalRecord(
        dataset=line["dataset"],
        origin_index=line["origin_index"],
        channel_id=line["channel_id"],
        strategy=line["strategy"],
        variant=line["variant"],
        mse=None if failed else ev["mse"],
        mae=None if failed else ev["mae"],
        cot_tokens=0 if failed else ev["cot_tokens"],
        repairs=[] if failed else ev["repairs"],
        diagnosis={} if failed else line.get("diagnosis", {}),
        failed=failed,
        error=line.get("error", ""),
    )


class _Counting(Provider):
    """Request counter for uncached backends."""

    def __init__(self, inner):
        self.inner = inner
        self.label = inner.label
        self.requests = 0
        self.cache_hits = 0
        self._lock = threading.Lock()

    def complete(self, prompt, sampling, generation_index=0):
        record = self.inner.complete(prompt, sampling, generation_index)
        with self._lock:
            self.requests += 1
        return record


def execute_run(cfg: RunConfig, run_dir=None, *, mode: str = "forecast", provider=None,
                k: Optional[int] = None, level: Optional[float] = None) -> RunResult:
    """Run (or resume) every task of ``cfg`` into ``run_dir``.

    An existing ``run_dir`` with a manifest is resumed: finished tasks are kept
    and everything else is re-dispatched.
    """
    started = time.perf_counter()
    if mode == "uncertainty":
        k = cfg.uncertainty_k if k is None else k
        level = cfg.band_level if level is None else level
    _, tasks = build_tasks(cfg)
    context = load_context_for(cfg)
    rid = run_id(cfg)
    run_dir = Path(run_dir) if run_dir is not None else Path(cfg.output_dir) / rid
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = run_dir / "manifest.json"
    records_path = run_dir / "records.jsonl"
    order = {t.task_id: i for i, t in enumerate(tasks)}

    if manifest_path.exists():
        manifest = Manifest.load(manifest_path)
        kept = [ln for ln in read_records(records_path)[0]
                if ln["status"] == "done" and manifest.data["tasks"].get(ln["task_id"]) == "done"]
        done = {ln["task_id"] for ln in kept}
        for tid in manifest.data["tasks"]:
            if tid not in done:
                manifest.data["tasks"][tid] = "pending"
        manifest.save()
        _atomic_write_text(records_path, "".join(json.dumps(ln) + "\n" for ln in kept))
    else:
        manifest = Manifest.create(manifest_path, rid, cfg, [t.task_id for t in tasks])
        records_path.write_text("", encoding="utf-8")
        done = set()

    backend = provider if provider is not None else make_provider(cfg.provider)
    if cfg.cache_dir and not isinstance(backend, CachedProvider):
        backend = CachedProvider(backend, cfg.cache_dir)
    elif not isinstance(backend, CachedProvider):
        backend = _Counting(backend)
    before = (getattr(backend, "requests", 0), getattr(backend, "cache_hits", 0))

    write_lock = threading.Lock()

    def work(task: Task) -> None:
        line = _run_task(task, cfg, context, backend, run_dir, mode, k, level)
        with write_lock:
            with records_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(line) + "\n")
        manifest.set_status(task.task_id, line["status"], line.get("parse_failure", False))

    pending = [t for t in tasks if t.task_id not in done]
    try:
        with ThreadPoolExecutor(max_workers=cfg.max_parallel_requests) as pool:
            for fut in [pool.submit(work, t) for t in pending]:
                fut.result()
    finally:
        manifest.add_totals(
            getattr(backend, "requests", 0) - before[0],
            getattr(backend, "cache_hits", 0) - before[1],
            time.perf_counter() - started,
        )

    lines = sorted(read_records(records_path)[0], key=lambda ln: order.get(ln["task_id"], len(order)))
    _atomic_write_text(records_path, "".join(json.dumps(ln) + "\n" for ln in lines))
    records = [eval_record(ln) for ln in lines]
    summary = aggregate_dataset(records) if records else []
    write_summary_csv(summary, run_dir / "summary.csv")
    if mode == "uncertainty":
        _write_coverage_csv(run_dir / "uncertainty" / "coverage.csv", lines)

    failed = sum(r.failed for r in records)
    rate = failed / len(records) if records else 0.0
    exit_code = 1 if rate > cfg.failure_tolerance else 0
    return RunResult(run_dir, manifest.data, summary, exit_code)


def _write_coverage_csv(path: Path, lines) -> None:
    path.parent.mkdir(exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task_id", "level", "coverage", "mean_std"])
        for ln in lines:
            u = ln.get("uncertainty")
            if u:
                writer.writerow([ln["task_id"], u["level"], repr(u["coverage"]), repr(u["mean_std"])])


def cmd_forecast(cfg: RunConfig, run_dir=None, provider=None) -> RunResult:
    return execute_run(cfg, run_dir, mode="forecast", provider=provider)


def cmd_uncertainty(cfg: RunConfig, run_dir=None, provider=None, k: Optional[int] = None,
                    level: Optional[float] = None) -> RunResult:
    k = cfg.uncertainty_k if k is None else k
    if k < 2:
        raise ConfigInvalid("k", "uncertainty needs at least 2 generations")
    return execute_run(cfg, run_dir, mode="uncertainty", provider=provider, k=k, level=level)


def _slug(point: dict) -> str:
    parts = []
    for key, value in point.items():
        text = str(value).replace("/", "").replace(" ", "_")
        parts.append(f"{key}={text}")
    return "__".join(parts)


def _apply_point(cfg: RunConfig, point: dict) -> RunConfig:
    changes: dict = {"sweep": SweepAxes()}
    for key, value in point.items():
        if key == "lookback":
            changes["lookback"] = int(value)
        elif key == "horizon":
            changes["horizon"] = int(value)
        elif key == "temperature":
            changes["sampling"] = replace(cfg.sampling, temperature=float(value))
        elif key == "strategy":
            changes["strategy"] = value
        elif key == "variant":
            changes["variant"] = named_variant(value, cfg.variant, cfg.ablate_shift_steps)
    return replace(cfg, **changes)


def _write_rows(path: Path, rows, columns) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def cmd_sweep(cfg: RunConfig, out_dir=None, provider=None) -> tuple:
    """One child run per grid point; returns ``(sweep_dir, combined_rows)``."""
    axes = cfg.sweep.active()
    if not axes:
        raise ConfigInvalid("sweep", "no sweep axes given")
    names = [n for n, _ in axes]
    grid = list(itertools.product(*[vals for _, vals in axes]))
    if len(grid) > cfg.max_grid:
        raise GridTooLarge(f"grid has {len(grid)} points, cap is {cfg.max_grid}")
    sweep_dir = Path(out_dir) if out_dir else Path(cfg.output_dir) / f"{run_id(cfg)}-sweep"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for values in grid:
        point = dict(zip(names, values))
        child = _apply_point(cfg, point)
        result = cmd_forecast(child, sweep_dir / _slug(point), provider=provider)
        for row in result.summary:
            rows.append({**point, **row})
    columns = names + ["mse", "mae", "count", "attempts", "failure_rate"]
    _write_rows(sweep_dir / "combined.csv", rows, columns)
    return sweep_dir, rows


def cmd_ablate(cfg: RunConfig, out_dir=None, provider=None, table: str = "prompt") -> tuple:
    """Prompt-ablation (seven rows) or missing-data (four rows) table."""
    if table == "prompt":
        variants = ablation_variants(cfg.variant, cfg.ablate_shift_steps)
    elif table == "missing":
        variants = missing_variants(cfg.variant)
    else:
        raise ConfigInvalid("table", f"unknown ablation table {table!r}")
    dataset = cfg.dataset.name or Path(cfg.dataset.path).stem
    ablate_dir = Path(out_dir) if out_dir else Path(cfg.output_dir) / f"{run_id(cfg)}-ablate-{table}"
    ablate_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for v in variants:
        child = replace(cfg, variant=v, sweep=SweepAxes())
        result = cmd_forecast(child, ablate_dir / _slug({"variant": v.label}), provider=provider)
        row = result.summary[0] if result.summary else {"mse": float("nan"), "mae": float("nan"),
                                                        "failure_rate": 1.0}
        rows.append({
            "variant": v.label,
            f"{dataset}_mse": row["mse"],
            f"{dataset}_mae": row["mae"],
            "failure_rate": row["failure_rate"],
        })
    columns = ["variant", f"{dataset}_mse", f"{dataset}_mae", "failure_rate"]
    _write_rows(ablate_dir / f"ablation_{table}.csv", rows, columns)
    return ablate_dir, rows


def cmd_diagnose(run_dir, thresholds: Optional[Thresholds] = None) -> dict:
    """Re-run detectors over stored bundles and emit mode frequencies and the heatmap."""
    run_dir = Path(run_dir)
    records_path = run_dir / "records.jsonl"
    if not run_dir.is_dir() or not records_path.exists():
        raise RunDirMissing(f"{run_dir} has no records.jsonl")
    th = thresholds or Thresholds()
    lines, malformed = read_records(records_path)
    counts = {m: 0 for m in FAILURE_MODES}
    diagnosed = 0
    pairs = []
    for ln in lines:
        if ln.get("status") != "done":
            continue
        try:
            pred = np.asarray(ln["mean_forecast"], dtype=float)
            lookback = np.asarray(ln["lookback"], dtype=float)
            truth = np.asarray(ln["truth"], dtype=float)
            gens = [(g["cot_tokens"], g["mse"]) for g in ln["generations"]]
        except (KeyError, TypeError, ValueError):
            malformed += 1
            continue
        d = diagnose(pred, lookback, truth, th)
        diagnosed += 1
        for mode in d.flags:
            counts[mode] += 1
        pairs.extend(gens)

    rows = [
        {"mode": m, "count": counts[m], "frequency": counts[m] / diagnosed if diagnosed else 0.0}
        for m in FAILURE_MODES
    ]
    _write_rows(run_dir / "diagnosis_summary.csv", rows, ["mode", "count", "frequency"])
    _atomic_write_text(
        run_dir / "diagnosis_meta.json",
        json.dumps({"thresholds": asdict(th), "records": diagnosed, "malformed": malformed},
                   indent=2, sort_keys=True),
    )
    heat = None
    if len(pairs) >= 10:
        heat = cot_decile_heatmap(pairs)
        write_heatmap_csv(heat, run_dir / "heatmap.csv")
    else:
        logger.warning("only %d generations; heatmap needs at least 10", len(pairs))
    return {"frequencies": {r["mode"]: r["frequency"] for r in rows}, "counts": counts,
            "records": diagnosed, "malformed": malformed, "heatmap": heat}
