"""The sixteen simulation scenarios, trial designs and truth oracles.

Scenario formulas are written on the 8-20 day axis, most of them in the
shifted argument ``u = D - 8``. Two of the probability-scale scenarios leave
[0, 1] inside that range (14 rises above 1 after about 13.5 days, 15 drops
below 0 after about 18.6 days); the curve is clipped to [0, 1] so it can be
used as a Bernoulli probability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import expit

from .fp_model import TrialDataset
from .streams import as_stream
from .targets import NOT_ATTAINED, EstimationTarget, accepts, first_crossing, margin_fn

SCENARIO_IDS = tuple(range(1, 17))

SCENARIO_NAMES = {
    1: "Linear on log-odds",
    2: "Quadratic + linear on log-odds",
    3: "Quadratic on log-odds",
    4: "Constant response",
    5: "Logarithmic on log-odds",
    6: "Square root on log-odds",
    7: "Cubic on log-odds",
    8: "Cubic + quadratic on log-odds",
    9: "Logistic growth, early",
    10: "Logistic growth, later",
    11: "Gompertz A",
    12: "Gompertz B",
    13: "Gompertz C",
    14: "Quadratic on probability scale (convex)",
    15: "Quadratic on probability scale (concave)",
    16: "Linear spline",
}

DEFAULT_ARMS = (8.0, 10.0, 12.0, 14.0, 16.0, 18.0, 20.0)


@dataclass(frozen=True)
class TrialDesign:
    """Randomisation grid: arm durations and patients per arm."""

    arms: tuple[float, ...]
    allocation: tuple[int, ...]

    def __post_init__(self):
        arms = tuple(float(a) for a in self.arms)
        alloc = tuple(int(n) for n in self.allocation)
        if len(arms) < 1 or len(arms) != len(alloc):
            raise ValueError("need one allocation count per arm")
        if any(b <= a for a, b in zip(arms, arms[1:])):
            raise ValueError("arms must be strictly increasing")
        if arms[0] <= 0:
            raise ValueError("durations must be positive")
        if any(n < 1 for n in alloc):
            raise ValueError("every arm needs at least one patient")
        object.__setattr__(self, "arms", arms)
        object.__setattr__(self, "allocation", alloc)

    @classmethod
    def equal(cls, arms: Sequence[float] = DEFAULT_ARMS, n_total: int = 500) -> "TrialDesign":
        """Equal allocation; leftover patients go to the shortest arms."""
        k = len(arms)
        base, extra = divmod(int(n_total), k)
        return cls(tuple(arms), tuple(base + (i < extra) for i in range(k)))

    @classmethod
    def default(cls, n_total: int = 500) -> "TrialDesign":
        return cls.equal(DEFAULT_ARMS, n_total)

    @property
    def d_min(self) -> float:
        return self.arms[0]

    @property
    def d_max(self) -> float:
        return self.arms[-1]

    @property
    def n_total(self) -> int:
        return sum(self.allocation)

    @property
    def integer_durations(self) -> NDArray:
        return np.arange(math.ceil(self.d_min), math.floor(self.d_max) + 1, dtype=float)

    def as_dict(self) -> dict:
        return {"arms": list(self.arms), "allocation": list(self.allocation), "n_total": self.n_total}


def _check_id(scenario: int) -> int:
    if scenario not in SCENARIO_IDS:
        raise ValueError(f"unknown scenario {scenario!r}; valid ids are 1-16")
    return int(scenario)


def _gompertz(D, rate, shift):
    return 0.9 * np.exp(-np.exp(-rate * (D - shift)))


def _raw_curve(s: int, D: NDArray) -> NDArray:
    u = D - 8.0
    with np.errstate(divide="ignore", invalid="ignore"):
        if s == 1:
            return expit(0.85 + 0.17 * u)
        if s == 2:
            return expit(0.62 + 0.13 * u + 0.01 * u**2)
        if s == 3:
            return expit(0.85 + 0.01 * u**2)
        if s == 4:
            return np.full_like(D, 0.95)
        if s == 5:
            return expit(0.85 + 1.19 * np.log(u))
        if s == 6:
            return expit(0.62 + 0.67 * np.sqrt(u))
        if s == 7:
            return expit(1.10 + 0.002 * u**3)
        if s == 8:
            return expit(1.39 + 0.002 * u**2 + 0.001 * u**3)
        if s == 9:
            return 0.05 + 0.9 * expit(2 * D - 23)
        if s == 10:
            return 0.05 + 0.9 * expit(2 * D - 28)
        if s == 11:
            return _gompertz(D, 0.5, 13)
        if s == 12:
            return _gompertz(D, 1.0, 9)
        if s == 13:
            return _gompertz(D, 2.0, 7)
        if s == 14:
            return 0.7 + 0.01 * u**2
        if s == 15:
            return 0.7 - 0.01 * u**2 + 0.04 * u
        # 16: knots take the right-hand piece
        return np.where(D < 11, 0.5 + 0.10 * u,
                        np.where(D < 14, 0.8 + 0.04 * (D - 11), 0.94 + 0.01 * (D - 14)))


def _raw_gradient(s: int, D: NDArray) -> NDArray:
    u = D - 8.0
    with np.errstate(divide="ignore", invalid="ignore"):
        if s in (1, 2, 3, 5, 6, 7, 8):
            deta = {
                1: lambda: 0.17 + 0 * u,
                2: lambda: 0.13 + 0.02 * u,
                3: lambda: 0.02 * u,
                5: lambda: 1.19 / u,
                6: lambda: 0.335 / np.sqrt(u),
                7: lambda: 0.006 * u**2,
                8: lambda: 0.004 * u + 0.003 * u**2,
            }[s]()
            pi = _raw_curve(s, D)
            g = pi * (1 - pi) * deta
            if s == 5:
                g = np.where(u <= 0, 0.0, g)  # π ~ u^1.19 near 8 days
            if s == 6:
                g = np.where(u <= 0, np.inf, g)
            return g
        if s == 4:
            return np.zeros_like(D)
        if s in (9, 10):
            e = expit(2 * D - (23 if s == 9 else 28))
            return 1.8 * e * (1 - e)
        if s in (11, 12, 13):
            rate, shift = {11: (0.5, 13), 12: (1.0, 9), 13: (2.0, 7)}[s]
            return _gompertz(D, rate, shift) * rate * np.exp(-rate * (D - shift))
        if s == 14:
            return 0.02 * u
        if s == 15:
            return 0.04 - 0.02 * u
        return np.where(D < 11, 0.10, np.where(D < 14, 0.04, 0.01))


def true_curve(scenario: int, D: ArrayLike, clip: bool = True):
    """True cure probability of a scenario at duration(s) ``D``.

    ``clip=False`` returns the formula value even where it leaves [0, 1].
    """
    s = _check_id(scenario)
    d = np.asarray(D, dtype=float)
    out = _raw_curve(s, d)
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def true_gradient(scenario: int, D: ArrayLike, clip: bool = True):
    """Analytic dπ/dD of the (clipped) true curve."""
    s = _check_id(scenario)
    d = np.asarray(D, dtype=float)
    g = _raw_gradient(s, d)
    if clip:
        raw = _raw_curve(s, d)
        g = np.where((raw > 1) | (raw < 0), 0.0, g)
    return float(g) if g.ndim == 0 else g


class ScenarioCurve:
    """A true scenario curve exposing the ``eval``/``gradient`` curve protocol."""

    def __init__(self, scenario: int, clip: bool = True):
        self.scenario = _check_id(scenario)
        self.clip = clip

    def __len__(self):
        return 1

    def eval(self, D):
        return np.asarray(true_curve(self.scenario, D, self.clip))

    def gradient(self, D):
        return np.asarray(true_gradient(self.scenario, D, self.clip))

    __call__ = eval


def generate_dataset(scenario: int, design: TrialDesign, stream) -> TrialDataset:
    """Independent Bernoulli outcomes per patient under the scenario's truth."""
    rng = as_stream(stream)
    durations = np.repeat(np.asarray(design.arms), design.allocation)
    p = true_curve(scenario, durations)
    cures = (rng.random(durations.size) < p).astype(np.int8)
    return TrialDataset(durations, cures)


class TrueOptimum(NamedTuple):
    d_star: float
    d_star_integer: int | None


PAPER_GRID_POINTS = 100


def true_optimal(scenario: int, target: EstimationTarget, design: TrialDesign | None = None,
                 grid_points: int | None = PAPER_GRID_POINTS) -> TrueOptimum:
    """Smallest acceptable duration on the true curve.

    ``d_star`` is the first acceptable point of a ``grid_points``-point
    equally spaced grid over [d_min, d_max] (100 by default). With
    ``grid_points=None`` (or 0) it is solved continuously instead: a
    0.01-day scan refined by bisection.

    ``d_star_integer`` is the smallest integer duration in range at which the
    condition holds, or ``None`` if no duration qualifies.
    """
    design = design or TrialDesign.default()
    curve = ScenarioCurve(scenario)
    if not grid_points:
        d_star = float(first_crossing(margin_fn(target, curve, design.d_max), design.d_min, design.d_max)[0])
    else:
        grid = np.linspace(design.d_min, design.d_max, int(grid_points))
        ok = accepts(target, curve, design.d_max, grid)
        d_star = float(grid[np.argmax(ok)]) if ok.any() else NOT_ATTAINED
    ints = design.integer_durations
    ok_int = accepts(target, curve, design.d_max, ints)
    d_int = int(ints[np.argmax(ok_int)]) if ok_int.any() else None
    return TrueOptimum(d_star, d_int)


def accepted_on_truth(scenario: int, target: EstimationTarget, design: TrialDesign, D: ArrayLike) -> NDArray:
    """Whether each duration in ``D`` meets the target on the true curve."""
    return accepts(target, ScenarioCurve(scenario), design.d_max, np.atleast_1d(D))
