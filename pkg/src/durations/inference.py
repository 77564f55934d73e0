"""Turning a duration-response fit into an integer duration recommendation.

Five recommenders share one rounding rule: the recommended duration is the
smallest integer strictly above the method's real-valued cut point, except
that a cut point sitting exactly on the shortest duration recommends that
duration.

========================  ===================================================
``conf-bands``            lower pointwise band of the fitted curve
``delta``                 delta-method CI of pi(d_max) - pi(D_i) per integer D_i
``boot-diff``             bootstrap (BCa) CI of the same differences
``boot-duration``         bootstrap percentile CI of D* itself
``gradient-point``        point estimate under a maximum-gradient target
========================  ===================================================
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import expit
from scipy.stats import norm

from .fp_model import (CurveBatch, FittedCurve, TrialDataset, pointwise_band,
                       select_batch, select_fp)
from .streams import as_stream, child_stream
from .targets import (EstimationTarget, FixedRate, Frontier, MaxGradient,
                      RiskDifference, RiskRatio, allowed_loss, first_crossing, solve_dstar,
                      solve_dstar_batch, threshold)

METHODS = ("conf-bands", "delta", "boot-diff", "boot-duration", "gradient-point")
BOOT_METHODS = ("boot-diff", "boot-duration")
Z0_CLAMP = 4.0
UNRELIABLE_DROP_FRACTION = 0.10


@dataclass(frozen=True)
class BootstrapConfig:
    """Bootstrap settings.

    ``interval=None`` uses each method's own default: BCa for ``boot-diff``,
    percentile for ``boot-duration``.
    """

    m: int = 500
    interval: str | None = None
    level: float = 0.95
    max_retries: int = 5
    jackknife_groups: int = 50
    fp: str = "exact2"
    contiguous: bool = False

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("need at least 2 bootstrap replicates")
        if not 0 < self.level < 1:
            raise ValueError("confidence level must lie in (0, 1)")
        if self.interval not in (None, "bca", "percentile"):
            raise ValueError(f"unknown interval {self.interval!r}")
        if self.jackknife_groups < 2:
            raise ValueError("need at least 2 jackknife groups")


@dataclass(frozen=True)
class Recommendation:
    d_recommended: int
    d_star_hat: float | None
    ci: tuple[float, float]
    method: str
    diagnostics: dict = field(default_factory=dict)
    table: dict | None = None

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "recommended_duration": self.d_recommended,
            "d_star_hat": self.d_star_hat,
            "ci": list(self.ci),
            "diagnostics": self.diagnostics,
            "table": self.table,
        }


def z_value(level: float) -> float:
    return float(norm.ppf(0.5 + level / 2))


def round_up_strict(cut: float, d_min: float, d_max: float) -> int:
    """Smallest integer duration strictly above ``cut``, within the design.

    A cut point equal to ``d_min`` recommends ``d_min``; a cut point that was
    never attained (infinite) recommends ``d_max``.
    """
    lo, hi = math.ceil(d_min), math.floor(d_max)
    if not np.isfinite(cut):
        return hi
    if cut <= d_min:
        return lo
    return int(min(max(math.floor(cut) + 1, lo), hi))


def _first_accepted(durations: NDArray, accepted: NDArray, contiguous: bool) -> float | None:
    if contiguous:
        # every longer duration must pass as well
        tail_ok = np.logical_and.accumulate(accepted[::-1])[::-1]
        accepted = tail_ok
    return float(durations[np.argmax(accepted)]) if accepted.any() else None


# ---------------------------------------------------------------------------
# Pointwise confidence bands
# ---------------------------------------------------------------------------

def recommend_conf_bands(curve: FittedCurve, target: EstimationTarget, design, level: float = 0.95,
                         scale: str = "probability") -> Recommendation:
    """Recommend from where the lower pointwise band meets the target."""
    if isinstance(target, MaxGradient):
        raise ValueError("confidence bands need a cure-rate target")
    pi_dmax = curve.eval(design.d_max)

    def margin(D):
        d = D.ravel()
        lower, _ = pointwise_band(curve, d, level, scale)
        return (lower - threshold(target, pi_dmax, d)).reshape(D.shape)

    cut = float(first_crossing(margin, design.d_min, design.d_max)[0])
    attained = np.isfinite(cut)
    rec = round_up_strict(cut, design.d_min, design.d_max)
    return Recommendation(
        rec, cut if attained else None, (cut, cut) if attained else (design.d_max, design.d_max),
        "conf-bands", {"not_attained": not attained, "clamped_dmin": bool(attained and cut <= design.d_min)})


# ---------------------------------------------------------------------------
# Delta-method CI of differences
# ---------------------------------------------------------------------------

class DeltaCI(NamedTuple):
    diff: float
    se: float
    lower: float
    upper: float


def delta_jacobian(curve: FittedCurve, d1: float, d2: float) -> NDArray:
    """Gradient of pi(d1) - pi(d2) with respect to the coefficients."""
    X = curve.design_row([d1, d2])
    pi = expit(X @ curve.coef)
    w = pi * (1 - pi)  # inverse-logit derivative e^eta / (1 + e^eta)^2
    return w[0] * X[0] - w[1] * X[1]


def delta_diff_ci(curve: FittedCurve, d1: float, d2: float, level: float = 0.95) -> DeltaCI:
    """Delta-method CI for pi(d1) - pi(d2)."""
    diff = float(curve.eval(d1) - curve.eval(d2))
    J = delta_jacobian(curve, d1, d2)
    se = float(np.sqrt(max(J @ curve.covariance @ J, 0.0)))
    z = z_value(level)
    return DeltaCI(diff, se, diff - z * se, diff + z * se)


def _require_difference_target(target, method):
    if not isinstance(target, (RiskDifference, Frontier)):
        raise ValueError(f"{method} needs a risk-difference or frontier target, got {target.spec()}")


def recommend_delta(curve: FittedCurve, target: EstimationTarget, design, level: float = 0.95,
                    contiguous: bool = False) -> Recommendation:
    """Shortest integer duration whose delta-method upper bound on the loss
    versus the control is strictly below the allowed loss."""
    _require_difference_target(target, "delta")
    ds = design.integer_durations
    cis = [delta_diff_ci(curve, design.d_max, d, level) for d in ds]
    upper = np.array([c.upper for c in cis])
    bound = allowed_loss(target, ds)
    accepted = upper < bound
    first = _first_accepted(ds, accepted, contiguous)
    rec = int(first) if first is not None else math.floor(design.d_max)
    table = {
        "duration": ds.tolist(),
        "estimate": [c.diff for c in cis],
        "se": [c.se for c in cis],
        "lower": [c.lower for c in cis],
        "upper": upper.tolist(),
        "bound": bound.tolist(),
        "accepted": accepted.tolist(),
    }
    i = int(np.searchsorted(ds, rec))
    return Recommendation(rec, None, (cis[i].lower, cis[i].upper), "delta",
                          {"not_attained": first is None, "contiguous": contiguous}, table)


# ---------------------------------------------------------------------------
# Bootstrap machinery
# ---------------------------------------------------------------------------

def bootstrap_resample(dataset: TrialDataset, stream) -> TrialDataset:
    """N records drawn uniformly with replacement."""
    rng = as_stream(stream)
    n = len(dataset)
    idx = rng.integers(0, n, n)
    return TrialDataset(dataset.durations[idx], dataset.cures[idx])


class BootInterval(NamedTuple):
    lower: float
    upper: float
    z0: float
    acceleration: float
    degenerate: bool = False
    z0_clamped: bool = False


def percentile_interval(boot: ArrayLike, level: float = 0.95) -> tuple[float, float]:
    """Equal-tailed percentile interval, linear interpolation between order
    statistics (the type-7 sample quantile)."""
    b = np.asarray(boot, float)
    if b.size < 2:
        raise ValueError("need at least 2 bootstrap estimates")
    lo, hi = np.quantile(b, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


def jackknife_acceleration(jack: ArrayLike) -> float:
    j = np.asarray(jack, float)
    d = j.mean() - j
    den = 6.0 * np.sum(d**2) ** 1.5
    return float(np.sum(d**3) / den) if den > 0 else 0.0


def bca_interval(boot: ArrayLike, original: float, jackknife: ArrayLike, level: float = 0.95,
                 z0: float | None = None, acceleration: float | None = None) -> BootInterval:
    """Bias-corrected and accelerated bootstrap interval.

    Bias correction counts bootstrap estimates equal to the original as half
    below it. The adjusted tail probabilities ``a1``, ``a2`` pick the order
    statistics ``floor((M+1)·a1)`` and ``ceil((M+1)·a2)`` (1-based, clamped
    to 1..M). ``z0``/``acceleration`` may be forced, e.g. to zero.
    """
    b = np.sort(np.asarray(boot, float))
    M = b.size
    if M < 2:
        raise ValueError("need at least 2 bootstrap estimates")
    if b[0] == b[-1]:
        return BootInterval(float(b[0]), float(b[0]), 0.0, 0.0, degenerate=True)
    clamped = False
    if z0 is None:
        prop = (np.sum(b < original) + 0.5 * np.sum(b == original)) / M
        if prop <= 0 or prop >= 1:
            z0, clamped = math.copysign(Z0_CLAMP, prop - 0.5), True
        else:
            z0 = float(np.clip(norm.ppf(prop), -Z0_CLAMP, Z0_CLAMP))
    a = jackknife_acceleration(jackknife) if acceleration is None else float(acceleration)
    alphas = []
    for zq in (norm.ppf((1 - level) / 2), norm.ppf((1 + level) / 2)):
        den = 1 - a * (z0 + zq)
        if den <= 0:
            alphas.append(1.0 if zq > 0 else 0.0)
        else:
            alphas.append(float(norm.cdf(z0 + (z0 + zq) / den)))
    k_lo = min(max(math.floor((M + 1) * alphas[0]), 1), M)
    k_hi = min(max(math.ceil((M + 1) * alphas[1]), 1), M)
    return BootInterval(float(b[k_lo - 1]), float(b[k_hi - 1]), float(z0), a, False, clamped)


@dataclass
class BootstrapFits:
    """Refitted curves for the successful bootstrap replicates."""

    curves: CurveBatch
    drawn: int
    retries: int
    dropped: int

    @property
    def unreliable(self) -> bool:
        return self.dropped > UNRELIABLE_DROP_FRACTION * self.drawn

    def diagnostics(self) -> dict:
        return {"replicates": self.drawn, "retries": self.retries, "failures": self.dropped,
                "unreliable": self.unreliable}


def _counts(levels_idx: NDArray, cures: NDArray, k: int, idx: NDArray) -> tuple[NDArray, NDArray]:
    cell = levels_idx[idx]
    trials = np.bincount(cell, minlength=k).astype(float)
    succ = np.bincount(cell, weights=cures[idx], minlength=k)
    return succ, trials


def bootstrap_fits(dataset: TrialDataset, cfg: BootstrapConfig, stream) -> BootstrapFits:
    """Resample and re-run FP selection ``cfg.m`` times.

    Replicate ``b`` draws from the child stream ``(1, b)`` of ``stream``; a
    replicate whose selection fails is redrawn from the same child stream up
    to ``cfg.max_retries`` times and then dropped.
    """
    rng = as_stream(stream)
    levels, inv = dataset.cell_index()
    cures = dataset.cures.astype(float)
    n, k = len(dataset), levels.size
    children = [child_stream(rng, 1, b) for b in range(cfg.m)]
    succ = np.empty((cfg.m, k))
    trials = np.empty((cfg.m, k))
    for b, child in enumerate(children):
        succ[b], trials[b] = _counts(inv, cures, k, child.integers(0, n, n))
    curves, found = select_batch(cfg.fp, levels, succ, trials)
    retries = 0
    for _ in range(cfg.max_retries):
        bad = np.flatnonzero(~found)
        if bad.size == 0:
            break
        retries += bad.size
        for b in bad:
            succ[b], trials[b] = _counts(inv, cures, k, children[b].integers(0, n, n))
        redo, ok = select_batch(cfg.fp, levels, succ[bad], trials[bad])
        for j, b in enumerate(bad):
            if ok[j]:
                curves.p1[b], curves.p2[b] = redo.p1[j], redo.p2[j]
                curves.coef[b], curves.covariance[b] = redo.coef[j], redo.covariance[j]
                curves.deviance[b] = redo.deviance[j]
                found[b] = True
    keep = np.flatnonzero(found)
    return BootstrapFits(curves.take(keep), cfg.m, retries, int(cfg.m - keep.size))


def jackknife_curves(dataset: TrialDataset, groups: int, stream, fp: str = "exact2") -> CurveBatch:
    """Grouped delete-a-group jackknife refits.

    Records are shuffled with child stream ``(2,)`` and dealt round-robin
    into ``groups`` groups; each refit drops one group.
    """
    rng = child_stream(as_stream(stream), 2)
    levels, inv = dataset.cell_index()
    cures = dataset.cures.astype(float)
    k = levels.size
    groups = min(groups, len(dataset))
    perm = rng.permutation(len(dataset))
    full_succ, full_trials = _counts(inv, cures, k, np.arange(len(dataset)))
    succ = np.empty((groups, k))
    trials = np.empty((groups, k))
    for g in range(groups):
        s, t = _counts(inv, cures, k, perm[g::groups])
        succ[g], trials[g] = full_succ - s, full_trials - t
    curves, found = select_batch(fp, levels, succ, trials)
    return curves.take(np.flatnonzero(found))


# ---------------------------------------------------------------------------
# Bootstrap CI of differences
# ---------------------------------------------------------------------------

def comparison_quantity(target: EstimationTarget, curves, durations: NDArray, d_max: float):
    """Per-curve quantity whose CI upper bound must fall below ``bound``.

    Risk difference and frontier compare pi(d_max) - pi(D_i) with the allowed
    loss; risk ratio uses delta·pi(d_max) - pi(D_i) and fixed rate uses
    pi* - pi(D_i), both against 0.

    Returns (quantity of shape (B, n), bound of shape (n,)).
    """
    B = len(curves)
    D = np.broadcast_to(durations, (B, durations.size))
    pi = curves.eval(D)
    pi_max = curves.eval(np.full(B, d_max))[:, None]
    if isinstance(target, (RiskDifference, Frontier)):
        return pi_max - pi, allowed_loss(target, durations)
    if isinstance(target, RiskRatio):
        return target.delta * pi_max - pi, np.zeros(durations.size)
    if isinstance(target, FixedRate):
        return target.rate - pi, np.zeros(durations.size)
    raise ValueError(f"boot-diff cannot use target {target.spec()}")


def recommend_boot_diff(dataset: TrialDataset, target: EstimationTarget, design, cfg: BootstrapConfig,
                        stream, fits: BootstrapFits | None = None,
                        original: FittedCurve | None = None) -> Recommendation:
    """Shortest integer duration whose bootstrap CI upper bound clears the
    allowed loss, re-selecting the FP model in every replicate."""
    rng = as_stream(stream)
    original = original or select_fp(dataset, cfg.fp)
    fits = fits or bootstrap_fits(dataset, cfg, rng)
    ds = design.integer_durations
    orig_q, bound = comparison_quantity(target, CurveBatch.from_curve(original), ds, design.d_max)
    orig_q = orig_q[0]
    boot_q, _ = comparison_quantity(target, fits.curves, ds, design.d_max)
    interval = cfg.interval or "bca"
    diag = fits.diagnostics()
    if len(fits.curves) < 2:
        lower = np.full(ds.size, -np.inf)
        upper = np.full(ds.size, np.inf)
        diag["degenerate"] = ds.tolist()
        diag["unreliable"] = True
    elif interval == "bca":
        jack = jackknife_curves(dataset, cfg.jackknife_groups, rng, cfg.fp)
        jack_q, _ = comparison_quantity(target, jack, ds, design.d_max)
        ints = [bca_interval(boot_q[:, i], orig_q[i], jack_q[:, i], cfg.level) for i in range(ds.size)]
        lower = np.array([r.lower for r in ints])
        upper = np.array([r.upper for r in ints])
        diag["degenerate"] = [float(d) for d, r in zip(ds, ints) if r.degenerate]
        diag["z0_clamped"] = [float(d) for d, r in zip(ds, ints) if r.z0_clamped]
        diag["jackknife_groups"] = len(jack)
    else:
        pairs = [percentile_interval(boot_q[:, i], cfg.level) for i in range(ds.size)]
        lower = np.array([p[0] for p in pairs])
        upper = np.array([p[1] for p in pairs])
    accepted = upper < bound
    first = _first_accepted(ds, accepted, cfg.contiguous)
    rec = int(first) if first is not None else math.floor(design.d_max)
    diag.update({"not_attained": first is None, "interval": interval, "contiguous": cfg.contiguous})
    table = {
        "duration": ds.tolist(),
        "estimate": orig_q.tolist(),
        "lower": lower.tolist(),
        "upper": upper.tolist(),
        "bound": bound.tolist(),
        "accepted": accepted.tolist(),
    }
    i = int(np.searchsorted(ds, rec))
    return Recommendation(rec, None, (float(lower[i]), float(upper[i])), "boot-diff", diag, table)


# ---------------------------------------------------------------------------
# Bootstrap CI of the optimal duration
# ---------------------------------------------------------------------------

def recommend_boot_duration(dataset: TrialDataset, target: EstimationTarget, design, cfg: BootstrapConfig,
                            stream, fits: BootstrapFits | None = None,
                            original: FittedCurve | None = None) -> Recommendation:
    """Round up the upper bootstrap confidence limit of D*."""
    if isinstance(target, MaxGradient):
        raise ValueError("boot-duration does not support the maximum-gradient target")
    rng = as_stream(stream)
    fits = fits or bootstrap_fits(dataset, cfg, rng)
    diag = fits.diagnostics()
    dstar = solve_dstar_batch(fits.curves, target, design.d_min, design.d_max)
    not_att = ~np.isfinite(dstar)
    dstar = np.where(not_att, design.d_max, dstar)
    diag["not_attained_replicates"] = int(not_att.sum())
    interval = cfg.interval or "percentile"
    if dstar.size < 2:
        lo, hi = design.d_min, design.d_max
        diag["unreliable"] = True
    elif interval == "bca":
        original = original or select_fp(dataset, cfg.fp)
        orig = solve_dstar(original, target, design)
        orig = design.d_max if not np.isfinite(orig) else orig
        jack = jackknife_curves(dataset, cfg.jackknife_groups, rng, cfg.fp)
        jd = solve_dstar_batch(jack, target, design.d_min, design.d_max)
        jd = np.where(np.isfinite(jd), jd, design.d_max)
        res = bca_interval(dstar, orig, jd, cfg.level)
        lo, hi = res.lower, res.upper
        diag["degenerate"] = res.degenerate
    else:
        lo, hi = percentile_interval(dstar, cfg.level)
    rec = round_up_strict(hi, design.d_min, design.d_max)
    diag.update({"interval": interval, "clamped_dmin": bool(hi <= design.d_min)})
    table = {"d_star_replicates": dstar.tolist()}
    mean = float(dstar.mean()) if dstar.size else None
    return Recommendation(rec, mean, (float(lo), float(hi)), "boot-duration", diag, table)


# ---------------------------------------------------------------------------
# Maximum gradient: point estimate only
# ---------------------------------------------------------------------------

def recommend_gradient_point(curve, target: MaxGradient, design) -> Recommendation:
    if not isinstance(target, MaxGradient):
        raise ValueError("gradient-point needs a max-grad target")
    cut = solve_dstar(curve, target, design)
    attained = bool(np.isfinite(cut))
    rec = round_up_strict(cut, design.d_min, design.d_max)
    point = cut if attained else float(design.d_max)
    return Recommendation(rec, cut if attained else None, (point, point), "gradient-point",
                          {"not_attained": not attained})


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

def recommend(method: str, dataset: TrialDataset, target: EstimationTarget, design,
              cfg: BootstrapConfig | None = None, stream=None,
              original: FittedCurve | None = None, fits: BootstrapFits | None = None) -> Recommendation:
    """Run one recommendation method on a dataset.

    ``original`` and ``fits`` let callers share the point fit and the
    bootstrap refits between methods on the same data.
    """
    cfg = cfg or BootstrapConfig()
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if method in BOOT_METHODS:
        rng = as_stream(stream)
        fits = fits or bootstrap_fits(dataset, cfg, rng)
        if method == "boot-diff":
            return recommend_boot_diff(dataset, target, design, cfg, rng, fits, original)
        return recommend_boot_duration(dataset, target, design, cfg, rng, fits, original)
    original = original or select_fp(dataset, cfg.fp)
    if method == "conf-bands":
        return recommend_conf_bands(original, target, design, cfg.level)
    if method == "delta":
        return recommend_delta(original, target, design, cfg.level, cfg.contiguous)
    return recommend_gradient_point(original, target, design)
