"""Command-line interface: ``simulate``, ``analyze`` and ``scenarios``.

Exit codes: 0 success, 2 bad flags or malformed input, 3 every simulation
cell failed, 4 the curve could not be fitted.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .fp_model import FP_ALGORITHMS, FitError, TrialDataset, pointwise_band, select_fp
from .inference import (BOOT_METHODS, METHODS, BootstrapConfig, bootstrap_fits,
                        percentile_interval, recommend, round_up_strict)
from .mc_engine import SimulationConfig, run_simulation, summary_csv, write_summary
from .scenarios import (DEFAULT_ARMS, PAPER_GRID_POINTS, SCENARIO_IDS, TrialDesign, true_curve,
                        true_optimal)
from .streams import make_stream
from .targets import Frontier, MaxGradient, _gradient_sup, frontier_allowed_loss, parse_target, threshold

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_ALL_FAILED, EXIT_FIT = 0, 2, 3, 4
CURVE_STEP = 0.1


class UsageError(Exception):
    """Bad flag value or malformed input; maps to exit status 2."""


# ---------------------------------------------------------------------------
# Flag parsing helpers
# ---------------------------------------------------------------------------

def parse_scenarios(text: str) -> tuple[int, ...]:
    """``1-16``, ``1,4,9`` or a mix such as ``1-3,7``."""
    out: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        a, dash, b = part.partition("-")
        try:
            ids = range(int(a), int(b) + 1) if dash else [int(a)]
        except ValueError:
            raise UsageError(f"bad scenario list {text!r}") from None
        out.extend(ids)
    bad = [s for s in out if s not in SCENARIO_IDS]
    if not out or bad:
        raise UsageError(f"scenario ids must lie in 1-16, got {text!r}")
    return tuple(dict.fromkeys(out))


def parse_floats(text: str, what: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in str(text).split(",") if x.strip())
    except ValueError:
        raise UsageError(f"bad {what} {text!r}") from None


def parse_methods(values) -> tuple[str, ...]:
    if isinstance(values, str):
        values = [values]
    methods = tuple(m.strip() for v in values for m in str(v).split(",") if m.strip())
    bad = [m for m in methods if m not in METHODS]
    if not methods or bad:
        raise UsageError(f"unknown method(s) {bad}; choose from {', '.join(METHODS)}")
    return methods


def _target(text: str):
    try:
        return parse_target(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _knots(text: str) -> Frontier:
    return _target("frontier:" + text)


def _workers(text) -> int:
    if str(text) in ("auto", "max", "0"):
        return 0
    try:
        n = int(text)
    except ValueError:
        raise UsageError(f"--workers must be a count or 'auto', got {text!r}") from None
    if n < 0:
        raise UsageError("--workers must be non-negative")
    return n


def _bootstrap(args) -> BootstrapConfig:
    try:
        return BootstrapConfig(m=args.boot_m, interval=args.interval, level=args.level, fp=args.fp,
                               jackknife_groups=args.jackknife_groups, contiguous=args.contiguous)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    arms = parse_floats(args.arms, "--arms")
    try:
        design = TrialDesign.equal(arms, args.n)
        config = SimulationConfig(
            scenarios=parse_scenarios(args.scenarios), design=design,
            methods=parse_methods(args.method), target=_target(args.target), reps=args.reps,
            bootstrap=_bootstrap(args), seed=args.seed, workers=_workers(args.workers),
            truth_grid=args.truth_grid or None)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    summary = run_simulation(config)
    write_summary(summary, args.out)
    sys.stdout.write(summary_csv(summary))
    if not summary.cells:
        print("error: every cell failed", file=sys.stderr)
        return EXIT_ALL_FAILED
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def read_trial_csv(path: str | Path, lax: bool = False) -> TrialDataset:
    """Read a ``duration,cure`` CSV, one row per patient.

    Row numbers in error messages count data rows from 1 (the header is
    not counted). Extra columns are rejected unless ``lax``.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        raise UsageError(f"{path}: empty file")
    header = [h.strip() for h in header]
    if "duration" not in header or "cure" not in header:
        raise UsageError(f"{path}: header must contain 'duration,cure', got {','.join(header)}")
    if not lax and header != ["duration", "cure"]:
        raise UsageError(f"{path}: header must be exactly 'duration,cure' (use --lax to ignore extra columns)")
    i_d, i_c = header.index("duration"), header.index("cure")
    durations, cures = [], []
    for row_no, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise UsageError(f"row {row_no}: expected {len(header)} fields, got {len(row)}")
        try:
            d = float(row[i_d])
        except ValueError:
            raise UsageError(f"row {row_no}: duration {row[i_d]!r} is not a number") from None
        if not math.isfinite(d) or d <= 0:
            raise UsageError(f"row {row_no}: duration must be positive, got {row[i_d].strip()}")
        c = row[i_c].strip()
        if c not in ("0", "1"):
            raise UsageError(f"row {row_no}: cure must be 0 or 1, got {c!r}")
        durations.append(d)
        cures.append(int(c))
    if not durations:
        raise UsageError(f"{path}: no data rows")
    return TrialDataset(np.asarray(durations), np.asarray(cures, dtype=np.int8))


def write_trial_csv(dataset: TrialDataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["duration", "cure"])
        for d, c in dataset.records:
            w.writerow([f"{d:.17g}", c])


def design_from_data(dataset: TrialDataset) -> TrialDesign:
    levels, _, trials = dataset.aggregate()
    return TrialDesign(tuple(levels.tolist()), tuple(int(t) for t in trials))


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else "not-attained"


def analyze_dataset(dataset: TrialDataset, target, method: str, cfg: BootstrapConfig, seed: int,
                    frontier: Frontier | None = None) -> tuple[dict, str]:
    """Fit, run one recommender and assemble (report dict, curve CSV text).

    Raises FitError when the curve cannot be identified.
    """
    design = design_from_data(dataset)
    if len(design.arms) < 2:
        raise FitError("a single arm cannot identify a duration-response curve")
    original = select_fp(dataset, cfg.fp)
    stream = make_stream(seed)
    fits = bootstrap_fits(dataset, cfg, stream) if method in BOOT_METHODS else None
    rec = recommend(method, dataset, target, design, cfg, stream, original=original, fits=fits)

    grid = np.round(np.arange(design.d_min, design.d_max + CURVE_STEP / 2, CURVE_STEP), 10)
    pi = original.eval(grid)
    lower, upper = pointwise_band(original, grid, cfg.level)
    grad = original.gradient(grid)
    pi_dmax = original.eval(design.d_max)
    if isinstance(target, MaxGradient):
        rhs = np.full(grid.size, target.delta)
        sup = _gradient_sup(original, grid, design.d_max)
    else:
        rhs = threshold(target, pi_dmax, grid)
        sup = None
    overlay = frontier or (target if isinstance(target, Frontier) else None)
    loss = frontier_allowed_loss(overlay, grid) if overlay is not None else None

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["duration", "pi_hat", "band_lower", "band_upper", "gradient", "threshold"]
    if sup is not None:
        cols.append("gradient_sup")
    if loss is not None:
        cols += ["allowed_loss", "frontier_threshold"]
    w.writerow(cols)
    for i, d in enumerate(grid):
        row = [f"{d:.1f}", f"{pi[i]:.6f}", f"{lower[i]:.6f}", f"{upper[i]:.6f}", f"{grad[i]:.6f}", f"{rhs[i]:.6f}"]
        if sup is not None:
            row.append(f"{sup[i]:.6f}")
        if loss is not None:
            row += [f"{loss[i]:.6f}", f"{pi_dmax - loss[i]:.6f}"]
        w.writerow(row)

    rec_d = rec.as_dict()
    rec_d["d_star_hat"] = _num(rec.d_star_hat)
    rec_d["ci"] = [_num(c) for c in rec.ci]
    report = {
        "provenance": {"seed": seed, "boot_m": cfg.m, "method": method, "target": target.spec(),
                       "fp": cfg.fp, "level": cfg.level, "interval": cfg.interval,
                       "version": __version__, "data_sha256": _data_hash(dataset)},
        "design": {**design.as_dict(), "d_min": design.d_min, "d_max": design.d_max},
        "fit": original.summary(),
        "recommendation": rec_d,
        "frontier": None if overlay is None else {
            "knots": [list(k) for k in overlay.knots],
            "points": [[float(d), float(v)] for d, v in zip(design.integer_durations,
                                                            frontier_allowed_loss(overlay, design.integer_durations))]},
        "curve_file": "curve.csv",
    }
    return report, buf.getvalue()


def _data_hash(dataset: TrialDataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(dataset.durations, dtype=float).tobytes())
    h.update(np.ascontiguousarray(dataset.cures, dtype=np.int8).tobytes())
    return h.hexdigest()


def rederive_recommendation(report: dict) -> int:
    """Re-apply the method's decision rule to the report's own numbers."""
    rec = report["recommendation"]
    method, table, diag = rec["method"], rec.get("table"), rec.get("diagnostics", {})
    d_min, d_max = report["design"]["d_min"], report["design"]["d_max"]
    if method in ("delta", "boot-diff"):
        ds = np.asarray(table["duration"], float)
        ok = np.asarray(table["upper"], float) < np.asarray(table["bound"], float)
        if diag.get("contiguous"):
            ok = np.logical_and.accumulate(ok[::-1])[::-1]
        return int(ds[np.argmax(ok)]) if ok.any() else math.floor(d_max)
    if method == "boot-duration":
        if diag.get("interval", "percentile") == "percentile" and len(table["d_star_replicates"]) >= 2:
            hi = percentile_interval(table["d_star_replicates"], report["provenance"]["level"])[1]
        else:
            hi = rec["ci"][1]
        return round_up_strict(float(hi), d_min, d_max)
    cut = rec["d_star_hat"]
    return round_up_strict(math.inf if cut in (None, "not-attained") else float(cut), d_min, d_max)


def cmd_analyze(args) -> int:
    if not args.data:
        raise UsageError("--data is required")
    dataset = read_trial_csv(args.data, args.lax)
    frontier = _knots(args.frontier) if args.frontier else None
    target = _target(args.target) if args.target else (frontier or _target("risk-diff:0.10"))
    if args.method not in METHODS:
        raise UsageError(f"unknown method {args.method!r}; choose from {', '.join(METHODS)}")
    cfg = _bootstrap(args)
    try:
        report, curve_text = analyze_dataset(dataset, target, args.method, cfg, args.seed, frontier)
    except FitError as exc:
        print(f"error: fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report["rederived_recommendation"] = rederive_recommendation(report)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "curve.csv").write_text(curve_text)
    print(f"recommended_duration={report['recommendation']['recommended_duration']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------

def scenarios_table(emit: str, target=None, step: float = 0.5, design: TrialDesign | None = None,
                    truth_grid: int | None = PAPER_GRID_POINTS, scenarios=SCENARIO_IDS) -> str:
    design = design or TrialDesign.default()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if emit == "truth":
        if not step > 0:
            raise UsageError("--grid must be positive")
        n = int(math.floor((design.d_max - design.d_min) / step + 1e-9)) + 1
        grid = design.d_min + step * np.arange(n)
        w.writerow(["scenario", "duration", "pi"])
        for s in scenarios:
            for d, p in zip(grid, true_curve(s, grid)):
                w.writerow([s, f"{d:g}", f"{p:.6f}"])
        return buf.getvalue()
    w.writerow(["scenario", "target", "true_min_duration", "true_optimal_integer"])
    for s in scenarios:
        opt = true_optimal(s, target, design, truth_grid)
        d = f"{opt.d_star:.4f}" if math.isfinite(opt.d_star) else "not-attained"
        w.writerow([s, target.spec(), d, "not-attained" if opt.d_star_integer is None else opt.d_star_integer])
    return buf.getvalue()


def cmd_scenarios(args) -> int:
    if args.emit not in ("truth", "optima"):
        raise UsageError("--emit must be 'truth' or 'optima'")
    target = _target(args.target)
    design = TrialDesign.equal(parse_floats(args.arms, "--arms"), 500)
    text = scenarios_table(args.emit, target, args.grid, design, args.truth_grid or None,
                           parse_scenarios(args.scenarios))
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

DEFAULT_ARMS_TEXT = ",".join(f"{a:g}" for a in DEFAULT_ARMS)


def _add_inference_flags(p: argparse.ArgumentParser, target_default="risk-diff:0.10"):
    p.add_argument("--target", default=target_default, help="e.g. risk-diff:0.10, frontier:8=0.10,18=0.05")
    p.add_argument("--boot-m", type=int, default=500, help="bootstrap replicates")
    p.add_argument("--fp", choices=FP_ALGORITHMS, default="exact2")
    p.add_argument("--interval", choices=("bca", "percentile"), default=None,
                   help="bootstrap interval (default: bca for boot-diff, percentile for boot-duration)")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--jackknife-groups", type=int, default=50)
    p.add_argument("--contiguous", action="store_true",
                   help="require every longer duration to pass as well")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--config", help="JSON file of flag values; explicit flags win")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="durations", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="Monte Carlo operating characteristics")
    sim.add_argument("--scenarios", default="1-16")
    sim.add_argument("--n", type=int, default=500, help="patients per trial")
    sim.add_argument("--arms", default=DEFAULT_ARMS_TEXT, help="comma-separated arm durations")
    sim.add_argument("--reps", type=int, default=1000)
    sim.add_argument("--method", action="append", help="repeatable or comma-separated")
    _add_inference_flags(sim)
    sim.add_argument("--workers", default="1", help="process count or 'auto'")
    sim.add_argument("--truth-grid", type=int, default=PAPER_GRID_POINTS,
                     help="points in the truth grid; 0 solves continuously")
    sim.add_argument("--out", default="simulation")
    sim.set_defaults(func=cmd_simulate)

    ana = sub.add_parser("analyze", help="recommend a duration from trial data")
    ana.add_argument("--data", help="CSV with header duration,cure")
    ana.add_argument("--lax", action="store_true", help="ignore extra columns")
    ana.add_argument("--method", default="boot-duration", choices=METHODS)
    _add_inference_flags(ana, None)
    ana.add_argument("--frontier", help="knots DAYS=LOSS,... for the overlay (and target if --target unset)")
    ana.add_argument("--out", default="analysis")
    ana.set_defaults(func=cmd_analyze)

    sc = sub.add_parser("scenarios", help="true curves and optimal durations")
    sc.add_argument("--emit", choices=("truth", "optima"))
    sc.add_argument("--target", default="risk-diff:0.10")
    sc.add_argument("--grid", type=float, default=0.5, help="duration step for --emit truth")
    sc.add_argument("--truth-grid", type=int, default=PAPER_GRID_POINTS,
                    help="points in the optima grid; 0 solves continuously")
    sc.add_argument("--scenarios", default="1-16")
    sc.add_argument("--arms", default=DEFAULT_ARMS_TEXT)
    sc.add_argument("--out")
    sc.add_argument("--config", help="JSON file of flag values; explicit flags win")
    sc.set_defaults(func=cmd_scenarios)
    return parser


def _apply_config(parser, sub_name: str, argv: list[str], args):
    """Reparse with values from ``--config`` as defaults so explicit flags win."""
    try:
        values = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(values, dict):
        raise UsageError("config must be a JSON object")
    subparser = parser._subparsers._group_actions[0].choices[sub_name]
    dests = {a.dest for a in subparser._actions}
    cleaned = {}
    for k, v in values.items():
        key = k.lstrip("-").replace("-", "_")
        if key not in dests or key in ("config", "func", "help"):
            raise UsageError(f"unknown config key {k!r}")
        if key == "scenarios" and isinstance(v, list):
            v = ",".join(str(x) for x in v)
        if key == "arms" and isinstance(v, list):
            v = ",".join(f"{float(x):g}" for x in v)
        if key == "method" and isinstance(v, str) and sub_name == "simulate":
            v = [v]
        cleaned[key] = v
    subparser.set_defaults(**cleaned)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "config", None):
            args = _apply_config(parser, args.command, argv, args)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "simulate" and not args.method:
            args.method = ["boot-duration"]
        if getattr(args, "reps", 1) < 1:
            raise UsageError("--reps must be at least 1")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
