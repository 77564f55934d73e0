"""Monte Carlo operating characteristics for (scenario x method) cells.

Replicate ``r`` of scenario ``s`` draws everything from the stream keyed
``(seed, s, r)``: its dataset from child ``(0,)`` and its inference from
child ``(1,)``. All methods in a run analyse the same datasets. Results do
not depend on the number of workers or on scheduling.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import __version__
from .fp_model import select_fp
from .inference import BOOT_METHODS, METHODS, BootstrapConfig, bootstrap_fits, recommend
from .scenarios import (PAPER_GRID_POINTS, SCENARIO_IDS, TrialDesign, accepted_on_truth,
                        generate_dataset, true_curve, true_optimal)
from .streams import child_stream, make_stream
from .targets import EstimationTarget

log = logging.getLogger(__name__)

Z_MC = 1.96
CHUNK = 8

SUMMARY_COLUMNS = (
    "scenario", "method", "target", "reps", "partial_power", "full_power", "type1",
    "type1_ci_lo", "type1_ci_hi", "true_min_duration", "rec_min", "rec_p2_5", "rec_median",
    "true_optimal_integer", "failures", "config_hash", "seed", "version",
)


@dataclass(frozen=True)
class SimulationConfig:
    scenarios: tuple[int, ...]
    design: TrialDesign
    methods: tuple[str, ...]
    target: EstimationTarget
    reps: int
    bootstrap: BootstrapConfig = BootstrapConfig()
    seed: int = 1
    workers: int | None = 1
    truth_grid: int | None = PAPER_GRID_POINTS

    def __post_init__(self):
        object.__setattr__(self, "scenarios", tuple(int(s) for s in self.scenarios))
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        bad = [s for s in self.scenarios if s not in SCENARIO_IDS]
        if bad or not self.scenarios:
            raise ValueError(f"invalid scenario ids {bad}")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown or not self.methods:
            raise ValueError(f"unknown methods {unknown}; choose from {METHODS}")

    def as_dict(self) -> dict:
        """Everything that determines the results (worker count excluded)."""
        b = self.bootstrap
        return {
            "scenarios": list(self.scenarios),
            "design": self.design.as_dict(),
            "methods": list(self.methods),
            "target": self.target.spec(),
            "reps": self.reps,
            "bootstrap": {"m": b.m, "interval": b.interval, "level": b.level,
                          "max_retries": b.max_retries, "jackknife_groups": b.jackknife_groups,
                          "fp": b.fp, "contiguous": b.contiguous},
            "seed": self.seed,
            "truth_grid": self.truth_grid,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class ReplicateResult(NamedTuple):
    scenario: int
    replicate: int
    method: str
    d_recommended: int | None
    pi_true: float | None
    accepted: bool | None
    ok: bool
    error: str | None = None


def _judge(scenario, design, target, method, replicate, rec) -> ReplicateResult:
    d = rec.d_recommended
    ok_truth = bool(accepted_on_truth(scenario, target, design, d)[0])
    return ReplicateResult(scenario, replicate, method, int(d), float(true_curve(scenario, d)), ok_truth, True)


def _failure(scenario, replicate, method, exc) -> ReplicateResult:
    return ReplicateResult(scenario, replicate, method, None, None, None, False, f"{type(exc).__name__}: {exc}")


def run_replicate(scenario: int, design: TrialDesign, method: str, target: EstimationTarget,
                  cfg: BootstrapConfig, stream, replicate: int = 0) -> ReplicateResult:
    """Simulate one trial, analyse it with one method, judge against the truth.

    Errors are captured in the result and never raised.
    """
    try:
        data = generate_dataset(scenario, design, child_stream(stream, 0))
        rec = recommend(method, data, target, design, cfg, child_stream(stream, 1))
        return _judge(scenario, design, target, method, replicate, rec)
    except Exception as exc:  # noqa: BLE001 - replicate failures are data
        return _failure(scenario, replicate, method, exc)


def _run_all_methods(scenario: int, replicate: int, config: SimulationConfig) -> list[ReplicateResult]:
    stream = make_stream(config.seed, scenario, replicate)
    design, target, cfg = config.design, config.target, config.bootstrap
    try:
        data = generate_dataset(scenario, design, child_stream(stream, 0))
    except Exception as exc:  # noqa: BLE001
        return [_failure(scenario, replicate, m, exc) for m in config.methods]
    infer = child_stream(stream, 1)
    original = fits = None
    out = []
    for method in config.methods:
        try:
            if method in BOOT_METHODS and fits is None:
                fits = bootstrap_fits(data, cfg, infer)
            if method != "boot-duration" and original is None:
                original = select_fp(data, cfg.fp)
            rec = recommend(method, data, target, design, cfg, infer, original=original, fits=fits)
            out.append(_judge(scenario, design, target, method, replicate, rec))
        except Exception as exc:  # noqa: BLE001
            out.append(_failure(scenario, replicate, method, exc))
    return out


def _run_chunk(args) -> list[ReplicateResult]:
    scenario, start, stop, config = args
    res = []
    for r in range(start, stop):
        res.extend(_run_all_methods(scenario, r, config))
    return res


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CellMetrics:
    scenario: int
    method: str
    target: str
    reps: int
    n_accepted: int
    n_full: int | None
    type1: float
    type1_ci: tuple[float, float]
    full_power: float | None
    partial_power: float
    true_min_duration: float
    true_optimal_integer: int | None
    rec_min: int | None
    rec_p2_5: int | None
    rec_median: int | None
    rec_histogram: dict[int, int]
    failures: int
    errors: dict[str, int] = field(default_factory=dict)


def wald_interval(p: float, n: int, z: float = Z_MC) -> tuple[float, float]:
    """Wald interval for a proportion, clipped to [0, 1]."""
    half = z * math.sqrt(p * (1 - p) / n) if n > 0 else 0.0
    return max(p - half, 0.0), min(p + half, 1.0)


def _order_stat(sorted_vals: np.ndarray, q: float) -> int:
    # inverse empirical CDF: an observed (integer) recommendation
    return int(np.quantile(sorted_vals, q, method="inverted_cdf"))


def compute_metrics(results: Sequence[ReplicateResult], scenario: int, design: TrialDesign,
                    target: EstimationTarget, truth_grid: int | None = PAPER_GRID_POINTS,
                    method: str | None = None) -> CellMetrics:
    """Type-1 error, full and partial power and the recommendation
    distribution for one cell (percentages)."""
    results = list(results)
    ok = [r for r in results if r.ok]
    failures = len(results) - len(ok)
    errors: dict[str, int] = {}
    for r in results:
        if not r.ok:
            key = (r.error or "error").split(":")[0]
            errors[key] = errors.get(key, 0) + 1
    if not ok:
        raise RuntimeError(f"all {len(results)} replicates failed for scenario {scenario}")
    truth = true_optimal(scenario, target, design, truth_grid)
    n = len(ok)
    recs = np.sort(np.array([r.d_recommended for r in ok]))
    n_acc = sum(bool(r.accepted) for r in ok)
    type1_frac = (n - n_acc) / n
    lo, hi = wald_interval(type1_frac, n)
    n_full = None if truth.d_star_integer is None else int(np.sum(recs == truth.d_star_integer))
    values, counts = np.unique(recs, return_counts=True)
    return CellMetrics(
        scenario=scenario,
        method=method or ok[0].method,
        target=target.spec(),
        reps=n,
        n_accepted=n_acc,
        n_full=n_full,
        type1=100.0 * (n - n_acc) / n,
        type1_ci=(100.0 * lo, 100.0 * hi),
        full_power=None if n_full is None else 100.0 * n_full / n,
        partial_power=100.0 * n_acc / n,
        true_min_duration=truth.d_star,
        true_optimal_integer=truth.d_star_integer,
        rec_min=int(recs[0]),
        rec_p2_5=_order_stat(recs, 0.025),
        rec_median=_order_stat(recs, 0.5),
        rec_histogram={int(v): int(c) for v, c in zip(values, counts)},
        failures=failures,
        errors=errors,
    )


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

@dataclass
class SimulationSummary:
    config: SimulationConfig
    cells: list[CellMetrics]
    failed_cells: list[tuple[int, str]]

    @property
    def provenance(self) -> dict:
        return {"config_hash": self.config.config_hash(), "seed": self.config.seed, "version": __version__}


def _resolve_workers(workers: int | None) -> int:
    if workers is None or workers <= 0:
        return os.cpu_count() or 1
    return int(workers)


def run_simulation(config: SimulationConfig) -> SimulationSummary:
    """Run every (scenario, method) cell; failed cells are recorded, not raised."""
    tasks = [(s, start, min(start + CHUNK, config.reps), config)
             for s in config.scenarios for start in range(0, config.reps, CHUNK)]
    workers = _resolve_workers(config.workers)
    if workers == 1 or len(tasks) == 1:
        chunks = [_run_chunk(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_chunk, tasks))
    by_cell: dict[tuple[int, str], list[ReplicateResult]] = {}
    for chunk in chunks:
        for r in chunk:
            by_cell.setdefault((r.scenario, r.method), []).append(r)
    cells, failed = [], []
    for s in config.scenarios:
        for m in config.methods:
            results = sorted(by_cell.get((s, m), []), key=lambda r: r.replicate)
            try:
                cells.append(compute_metrics(results, s, config.design, config.target, config.truth_grid, m))
            except RuntimeError as exc:
                log.warning("%s", exc)
                failed.append((s, m))
    return SimulationSummary(config, cells, failed)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _fmt(x, digits: int = 2) -> str:
    if x is None:
        return "NA"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if not math.isfinite(x):
        return "not-attained"
    return f"{x:.{digits}f}"


def summary_rows(summary: SimulationSummary) -> list[dict]:
    prov = summary.provenance
    rows = []
    for c in summary.cells:
        rows.append({
            "scenario": c.scenario, "method": c.method, "target": c.target, "reps": c.reps,
            "partial_power": _fmt(c.partial_power), "full_power": _fmt(c.full_power),
            "type1": _fmt(c.type1), "type1_ci_lo": _fmt(c.type1_ci[0]), "type1_ci_hi": _fmt(c.type1_ci[1]),
            "true_min_duration": _fmt(c.true_min_duration, 3), "rec_min": _fmt(c.rec_min),
            "rec_p2_5": _fmt(c.rec_p2_5), "rec_median": _fmt(c.rec_median),
            "true_optimal_integer": _fmt(c.true_optimal_integer), "failures": c.failures,
            **prov,
        })
    return rows


def summary_csv(summary: SimulationSummary) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(summary_rows(summary))
    return buf.getvalue()


def _cell_json(c: CellMetrics) -> dict:
    def num(x):
        return None if x is None else (x if math.isfinite(x) else "not-attained")
    return {
        "scenario": c.scenario, "method": c.method, "target": c.target, "reps": c.reps,
        "n_accepted": c.n_accepted, "n_full": c.n_full,
        "type1": num(c.type1), "type1_ci": list(c.type1_ci),
        "full_power": c.full_power, "partial_power": c.partial_power,
        "true_min_duration": num(c.true_min_duration), "true_optimal_integer": c.true_optimal_integer,
        "rec_min": c.rec_min, "rec_p2_5": c.rec_p2_5, "rec_median": c.rec_median,
        "rec_histogram": {str(k): v for k, v in sorted(c.rec_histogram.items())},
        "failures": c.failures, "errors": dict(sorted(c.errors.items())),
    }


def summary_json(summary: SimulationSummary) -> str:
    doc = {
        "provenance": summary.provenance,
        "cells": [_cell_json(c) for c in summary.cells],
        "failed_cells": [{"scenario": s, "method": m} for s, m in summary.failed_cells],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_summary(summary: SimulationSummary, outdir: str | Path) -> dict[str, Path]:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "summary.csv", "json": out / "summary.json", "config": out / "config.json"}
    paths["csv"].write_text(summary_csv(summary))
    paths["json"].write_text(summary_json(summary))
    paths["config"].write_text(json.dumps(summary.config.as_dict(), indent=2, sort_keys=True) + "\n")
    return paths
