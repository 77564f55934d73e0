"""Estimation targets and the solver for the optimal duration D*.

Every target is reduced to an acceptance *margin*: a function of duration
that is non-negative exactly where the duration is acceptable. Curves only
need ``eval(D)`` and ``gradient(D)`` methods that broadcast over arrays, so
the same code runs on fitted curves, batches of bootstrap curves and the
true scenario curves.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
from numpy.typing import NDArray

SCAN_STEP = 0.01
BISECT_STEPS = 40
NOT_ATTAINED = float("inf")


@dataclass(frozen=True)
class RiskDifference:
    delta: float

    def __post_init__(self):
        _check_prob(self.delta, "risk-difference margin")

    def spec(self) -> str:
        return f"risk-diff:{self.delta:g}"


@dataclass(frozen=True)
class FixedRate:
    rate: float

    def __post_init__(self):
        _check_prob(self.rate, "target cure rate")

    def spec(self) -> str:
        return f"fixed-rate:{self.rate:g}"


@dataclass(frozen=True)
class RiskRatio:
    delta: float

    def __post_init__(self):
        if not 0 < self.delta <= 1:
            raise ValueError(f"risk-ratio fraction must lie in (0, 1], got {self.delta}")

    def spec(self) -> str:
        return f"risk-ratio:{self.delta:g}"


@dataclass(frozen=True)
class Frontier:
    """Duration-dependent allowed loss, piecewise linear through ``knots``."""

    knots: tuple[tuple[float, float], ...]

    def __post_init__(self):
        knots = tuple((float(d), float(v)) for d, v in self.knots)
        if not knots:
            raise ValueError("frontier needs at least one knot")
        ds = [d for d, _ in knots]
        if any(b <= a for a, b in zip(ds, ds[1:])):
            raise ValueError("frontier knots must be strictly increasing in duration")
        for _, v in knots:
            _check_prob(v, "frontier loss")
        object.__setattr__(self, "knots", knots)

    def spec(self) -> str:
        return "frontier:" + ",".join(f"{d:g}={v:g}" for d, v in self.knots)


@dataclass(frozen=True)
class MaxGradient:
    """Gradient cap in probability per day."""

    delta: float

    def __post_init__(self):
        if not self.delta >= 0:
            raise ValueError(f"gradient cap must be non-negative, got {self.delta}")

    def spec(self) -> str:
        return f"max-grad:{self.delta:g}"


EstimationTarget = Union[RiskDifference, FixedRate, RiskRatio, Frontier, MaxGradient]
LEVEL_TARGETS = (RiskDifference, FixedRate, RiskRatio, Frontier)


def _check_prob(x: float, what: str):
    if not 0 <= x <= 1:
        raise ValueError(f"{what} must lie in [0, 1], got {x}")


def parse_target(text: str) -> EstimationTarget:
    """Parse ``risk-diff:0.10``, ``fixed-rate:0.85``, ``risk-ratio:0.9``,
    ``frontier:8=0.10,18=0.05`` or ``max-grad:0.02``."""
    name, sep, arg = text.strip().partition(":")
    if not sep or not arg:
        raise ValueError(f"target {text!r} must look like NAME:VALUE")
    try:
        if name == "frontier":
            knots = []
            for item in arg.split(","):
                d, eq, v = item.partition("=")
                if not eq:
                    raise ValueError(f"frontier knot {item!r} must look like DAYS=LOSS")
                knots.append((float(d), float(v)))
            return Frontier(tuple(knots))
        value = float(arg)
    except ValueError as exc:
        raise ValueError(f"bad target {text!r}: {exc}") from None
    kinds = {"risk-diff": RiskDifference, "fixed-rate": FixedRate,
             "risk-ratio": RiskRatio, "max-grad": MaxGradient}
    if name not in kinds:
        raise ValueError(f"unknown target {name!r}; choose from {sorted(kinds) + ['frontier']}")
    return kinds[name](value)


def frontier_allowed_loss(frontier: Frontier | tuple, D):
    """Allowed cure-rate loss at ``D``.

    Linear interpolation between knots; before the first knot the first value
    is held; past the last knot the final segment is extended, floored at 0.
    """
    knots = frontier.knots if isinstance(frontier, Frontier) else Frontier(tuple(frontier)).knots
    xs = np.array([k[0] for k in knots])
    ys = np.array([k[1] for k in knots])
    d = np.asarray(D, float)
    out = np.interp(d, xs, ys)
    if xs.size > 1:
        slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
        out = np.where(d > xs[-1], np.maximum(ys[-1] + slope * (d - xs[-1]), 0.0), out)
    return float(out) if out.ndim == 0 else out


def allowed_loss(target: EstimationTarget, D):
    """Allowed loss relative to the control for difference-type targets."""
    if isinstance(target, RiskDifference):
        return np.broadcast_to(target.delta, np.shape(D)).astype(float)
    if isinstance(target, Frontier):
        return np.asarray(frontier_allowed_loss(target, D), float)
    raise TypeError(f"{type(target).__name__} is not a difference-type target")


def threshold(target: EstimationTarget, pi_dmax, D):
    """Cure rate a duration must reach; ``pi_dmax`` is the control rate."""
    pi_dmax = np.asarray(pi_dmax, float)
    if isinstance(target, RiskDifference):
        return pi_dmax - target.delta + 0.0 * np.asarray(D, float)
    if isinstance(target, FixedRate):
        return np.broadcast_to(target.rate, np.broadcast(pi_dmax, np.asarray(D)).shape).astype(float)
    if isinstance(target, RiskRatio):
        return target.delta * pi_dmax + 0.0 * np.asarray(D, float)
    if isinstance(target, Frontier):
        return pi_dmax - frontier_allowed_loss(target, D)
    raise TypeError(f"{type(target).__name__} has no cure-rate threshold")


def _gradient_sup(curve, D: NDArray, d_max: float) -> NDArray:
    """sup of dπ/dD over [D, d_max] on a 0.01-day grid (plus D itself).

    The grid is anchored at ``d_max`` so its nodes do not depend on ``D``.
    ``D`` has shape ``(B, g)`` or ``(g,)``.
    """
    D = np.asarray(D, float)
    lead = D.shape[:-1]
    n = int(np.ceil((d_max - float(D.min())) / SCAN_STEP - 1e-9)) + 1
    grid = d_max - SCAN_STEP * np.arange(n)[::-1]  # anchored at d_max
    g = curve.gradient(np.broadcast_to(grid, lead + grid.shape))
    suffix = np.maximum.accumulate(g[..., ::-1], axis=-1)[..., ::-1]
    idx = np.clip(np.searchsorted(grid, D - 1e-12, side="left"), 0, grid.size - 1)
    tail = np.take_along_axis(np.broadcast_to(suffix, lead + grid.shape), idx, axis=-1)
    tail = np.where(grid[idx] >= D - 1e-12, tail, -np.inf)
    return np.maximum(curve.gradient(D), tail)


def acceptance_threshold(target: EstimationTarget, curve, d_max: float, D):
    """The (lhs, rhs) pair compared by the target's condition at ``D``.

    Level targets accept when lhs >= rhs; ``MaxGradient`` accepts when
    lhs <= rhs.
    """
    batch = _as_batch(curve)
    D = np.asarray(D, float)
    Dg = np.atleast_1d(D)[None, :]
    if isinstance(target, MaxGradient):
        lhs = _gradient_sup(batch, Dg, d_max)[0]
        rhs = np.full_like(lhs, target.delta)
    else:
        pi_dmax = batch.eval(np.full((1,), d_max))[:, None]
        lhs = batch.eval(Dg)[0]
        rhs = threshold(target, pi_dmax, Dg)[0]
    if D.ndim == 0:
        return float(lhs[0]), float(rhs[0])
    return lhs, rhs


def margin_fn(target: EstimationTarget, curve, d_max: float) -> Callable[[NDArray], NDArray]:
    """``f(D) >= 0`` exactly where ``D`` is acceptable; ``D`` shaped ``(B, g)``."""
    if isinstance(target, MaxGradient):
        return lambda D: target.delta - _gradient_sup(curve, D, d_max)

    def f(D):
        pi_dmax = curve.eval(np.full(D.shape[:-1], d_max))[..., None]
        return curve.eval(D) - threshold(target, pi_dmax, D)
    return f


def first_crossing(margin: Callable[[NDArray], NDArray], d_min: float, d_max: float,
                   batch: int = 1, step: float = SCAN_STEP, bisect: int = BISECT_STEPS) -> NDArray:
    """Smallest D in [d_min, d_max] with ``margin(D) >= 0``, per batch row.

    Upward grid scan to bracket the first crossing, then bisection. Rows
    where the condition holds at ``d_min`` return ``d_min``; rows where it
    never holds return ``NOT_ATTAINED``.
    """
    grid = np.arange(d_min, d_max + step / 2, step)
    grid[-1] = d_max
    vals = margin(np.broadcast_to(grid, (batch, grid.size)))
    ok = vals >= 0
    any_ok = ok.any(axis=1)
    k = np.argmax(ok, axis=1)
    out = np.where(any_ok, grid[k], NOT_ATTAINED)
    need = any_ok & (k > 0)
    if need.any():
        lo = grid[np.maximum(k - 1, 0)].astype(float)
        hi = grid[k].astype(float)
        for _ in range(bisect):
            mid = 0.5 * (lo + hi)
            m = margin(mid[:, None])[:, 0] >= 0
            hi = np.where(m, mid, hi)
            lo = np.where(m, lo, mid)
        out = np.where(need, hi, out)
    return out


def solve_dstar_batch(curves, target: EstimationTarget, d_min: float, d_max: float) -> NDArray:
    return first_crossing(margin_fn(target, curves, d_max), d_min, d_max, batch=len(curves))


def solve_dstar(curve, target: EstimationTarget, design) -> float:
    """Smallest acceptable duration on ``curve`` (``NOT_ATTAINED`` if none).

    ``design`` is anything with ``d_min``/``d_max`` attributes.
    """
    batch = _as_batch(curve)
    return float(solve_dstar_batch(batch, target, design.d_min, design.d_max)[0])


def _as_batch(curve):
    from .fp_model import CurveBatch, FittedCurve
    if isinstance(curve, FittedCurve):
        return CurveBatch.from_curve(curve)
    if hasattr(curve, "__len__"):
        return curve
    return _Broadcast(curve)


class _Broadcast:
    """Adapts a single curve (e.g. a true scenario curve) to the batch protocol."""

    def __init__(self, curve):
        self.curve = curve

    def __len__(self):
        return 1

    def eval(self, D):
        return self.curve.eval(D)

    def gradient(self, D):
        return self.curve.gradient(D)


def accepts(target: EstimationTarget, curve, d_max: float, D) -> NDArray:
    """Boolean acceptance of durations ``D`` (1-d) on a single curve."""
    D = np.atleast_1d(np.asarray(D, float))
    return margin_fn(target, _as_batch(curve), d_max)(D[None, :])[0] >= 0
