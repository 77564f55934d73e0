"""Fractional-polynomial logistic regression for duration-response data.

Binary outcomes are fitted on their binomial aggregate (one row per distinct
duration), which has the same likelihood as the per-patient Bernoulli model
and keeps the design matrix at a handful of rows. Every candidate power pair
is fitted in one batched Newton/IRLS pass so that bootstrap re-selection
stays cheap.

Batched curves are stored with padded coefficients: absent FP terms carry a
NaN power, contribute a zero column and a zero coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import expit
from scipy.stats import chi2, norm

POWERS: tuple[float, ...] = (-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 3.0)

MAX_ITER = 50
TOL = 1e-8
PROB_CLAMP = 1e-10
RIDGE = 1e-8
DIVERGENCE = 50.0

# closed-test degrees of freedom: FP2 vs null, vs linear, vs best FP1
CLOSED_TEST_DF = (4, 3, 2)


class FitError(RuntimeError):
    """No usable fit could be produced for a dataset."""


class SingularInformationError(FitError, np.linalg.LinAlgError):
    """Weighted normal equations are singular even after the ridge guard."""


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FPPowers:
    """Selected FP powers in canonical (nondecreasing) order.

    ``p1=None`` is the null (intercept-only) model; ``p2=None`` is FP1, with
    ``FPPowers(1)`` doubling as the linear model of the closed test.
    """

    p1: float | None = None
    p2: float | None = None

    def __post_init__(self):
        p1, p2 = self.p1, self.p2
        if p1 is None and p2 is not None:
            p1, p2 = p2, None
        for p in (p1, p2):
            if p is not None and not np.isfinite(p):
                raise ValueError(f"invalid FP power {p!r}")
        if p1 is not None and p2 is not None and p2 < p1:
            p1, p2 = p2, p1
        object.__setattr__(self, "p1", None if p1 is None else float(p1))
        object.__setattr__(self, "p2", None if p2 is None else float(p2))

    @property
    def n_terms(self) -> int:
        return (self.p1 is not None) + (self.p2 is not None)

    @property
    def kind(self) -> str:
        if self.p1 is None:
            return "null"
        if self.p2 is None:
            return "linear" if self.p1 == 1.0 else "fp1"
        return "fp2"

    def as_array(self) -> tuple[float, float]:
        return (np.nan if self.p1 is None else self.p1,
                np.nan if self.p2 is None else self.p2)

    def __str__(self):
        if self.p1 is None:
            return "null"
        if self.p2 is None:
            return f"({self.p1:g})"
        return f"({self.p1:g},{self.p2:g})"


def fp2_candidates(powers: Sequence[float] = POWERS) -> list[FPPowers]:
    """All canonical FP2 pairs, in lexicographic order (36 for the default set)."""
    return [FPPowers(a, b) for a, b in combinations_with_replacement(sorted(powers), 2)]


def fp1_candidates(powers: Sequence[float] = POWERS) -> list[FPPowers]:
    return [FPPowers(p) for p in sorted(powers)]


@dataclass(frozen=True)
class TrialDataset:
    """Per-patient (duration, cure) records."""

    durations: NDArray[np.float64]
    cures: NDArray[np.int8]

    def __post_init__(self):
        d = np.array(self.durations, dtype=float).ravel()
        y = np.array(self.cures).ravel()
        if d.shape != y.shape:
            raise ValueError("durations and cures must have the same length")
        if d.size and not np.all(d > 0):
            raise ValueError("durations must be strictly positive")
        if y.size and not np.all((y == 0) | (y == 1)):
            raise ValueError("cure outcomes must be 0 or 1")
        y = y.astype(np.int8)
        d.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "durations", d)
        object.__setattr__(self, "cures", y)

    @classmethod
    def from_records(cls, records) -> "TrialDataset":
        records = list(records)
        if not records:
            return cls(np.empty(0), np.empty(0, dtype=np.int8))
        d, y = zip(*records)
        return cls(np.asarray(d, float), np.asarray(y))

    def __len__(self):
        return self.durations.size

    @property
    def records(self) -> list[tuple[float, int]]:
        return list(zip(self.durations.tolist(), self.cures.tolist()))

    def aggregate(self) -> tuple[NDArray, NDArray, NDArray]:
        """Distinct durations with their cure counts and patient counts."""
        levels, inverse = np.unique(self.durations, return_inverse=True)
        trials = np.bincount(inverse, minlength=levels.size).astype(float)
        cures = np.bincount(inverse, weights=self.cures, minlength=levels.size)
        return levels, cures, trials

    def cell_index(self) -> tuple[NDArray, NDArray]:
        """Distinct durations and each record's index into them."""
        levels, inverse = np.unique(self.durations, return_inverse=True)
        return levels, inverse


# ---------------------------------------------------------------------------
# Transforms and design matrices
# ---------------------------------------------------------------------------

def fp_transform(D: ArrayLike, p: float) -> NDArray | float:
    """``D**p``, with the FP convention ``ln(D)`` for ``p == 0``."""
    d = np.asarray(D, dtype=float)
    if np.any(d <= 0):
        raise ValueError("FP transforms need strictly positive durations")
    out = np.log(d) if p == 0 else d ** p
    return float(out) if out.ndim == 0 else out


def _term_columns(d: NDArray, p1: NDArray, p2: NDArray) -> tuple[NDArray, NDArray]:
    """Second and third design columns for (possibly batched) powers.

    ``d`` broadcasts against ``p1``/``p2``; NaN powers give zero columns.
    """
    logd = np.log(d)
    with np.errstate(invalid="ignore"):
        f1 = np.where(p1 == 0, logd, d ** np.where(np.isnan(p1), 1.0, p1))
        f2 = np.where(p2 == 0, logd, d ** np.where(np.isnan(p2), 1.0, p2))
    f2 = np.where(p2 == p1, f1 * logd, f2)
    f1 = np.where(np.isnan(p1), 0.0, f1)
    f2 = np.where(np.isnan(p2), 0.0, f2)
    return f1, f2


def _term_derivatives(d: NDArray, p1: NDArray, p2: NDArray) -> tuple[NDArray, NDArray]:
    """d/dD of the two FP columns."""
    logd = np.log(d)
    q1 = np.where(np.isnan(p1), 1.0, p1)
    q2 = np.where(np.isnan(p2), 1.0, p2)
    g1 = np.where(p1 == 0, 1.0 / d, q1 * d ** (q1 - 1.0))
    g2 = np.where(p2 == 0, 1.0 / d, q2 * d ** (q2 - 1.0))
    f1 = np.where(p1 == 0, logd, d ** q1)
    g2 = np.where(p2 == p1, g1 * logd + f1 / d, g2)
    g1 = np.where(np.isnan(p1), 0.0, g1)
    g2 = np.where(np.isnan(p2), 0.0, g2)
    return g1, g2


def _padded_design(d: ArrayLike, p1: ArrayLike, p2: ArrayLike) -> NDArray:
    """Design rows ``[1, f1, f2]`` with shape ``broadcast(d, p1, p2) + (3,)``."""
    d = np.asarray(d, float)
    if np.any(d <= 0):
        raise ValueError("FP transforms need strictly positive durations")
    p1 = np.asarray(p1, float)
    p2 = np.asarray(p2, float)
    f1, f2 = _term_columns(d, p1, p2)
    f1, f2 = np.broadcast_arrays(f1, f2)
    return np.stack([np.ones_like(f1), f1, f2], axis=-1)


def build_design_matrix(durations: ArrayLike, powers: FPPowers) -> NDArray:
    """Intercept plus one column per FP term.

    A repeated power ``p1 == p2`` gives the columns ``[f(D, p), f(D, p) ln D]``.
    """
    d = np.atleast_1d(np.asarray(durations, float))
    X = _padded_design(d, *powers.as_array())
    return X[:, : 1 + powers.n_terms]


# ---------------------------------------------------------------------------
# IRLS
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IRLSResult:
    coef: NDArray
    covariance: NDArray
    deviance: float
    converged: bool
    n_iter: int


def _irls_batch(X: NDArray, succ: NDArray, trials: NDArray, *, max_iter: int = MAX_ITER,
                tol: float = TOL, ridge: float = RIDGE, active: NDArray | None = None):
    """Newton/IRLS on a stack of binomial-logit problems.

    ``X`` has shape ``(..., k, p)``; ``succ``/``trials`` have shape ``(..., k)``.
    Columns are rescaled to unit max-abs before solving and mapped back at
    the end. Zero columns (padding) are pinned at coefficient 0.

    Returns coef, covariance, deviance, converged, n_iter (all batched).
    """
    X = np.asarray(X, float)
    succ = np.asarray(succ, float)
    trials = np.asarray(trials, float)
    batch = X.shape[:-2]
    p = X.shape[-1]
    scale = np.abs(X).max(axis=-2)
    live = scale > 0
    scale = np.where(live, scale, 1.0)
    Xs = X / scale[..., None, :]

    total = trials.sum(axis=-1)
    rate = np.clip(succ.sum(axis=-1) / np.where(total > 0, total, 1.0), 0.01, 0.99)
    beta = np.zeros(batch + (p,))
    beta[..., 0] = np.log(rate / (1 - rate))

    converged = np.zeros(batch, dtype=bool)
    diverged = np.zeros(batch, dtype=bool)
    n_iter = np.zeros(batch, dtype=int)
    running = np.ones(batch, dtype=bool) if active is None else np.asarray(active, bool).copy()
    eye = np.eye(p)
    pin = (~live)[..., :, None] * eye  # unit diagonal for padded columns

    for it in range(max_iter):
        if not running.any():
            break
        eta = np.einsum("...kp,...p->...k", Xs, beta)
        mu = np.clip(expit(eta), PROB_CLAMP, 1 - PROB_CLAMP)
        w = trials * mu * (1 - mu)
        score = np.einsum("...kp,...k->...p", Xs, succ - trials * mu)
        info = np.einsum("...kp,...k,...kq->...pq", Xs, w, Xs)
        info = info + ridge * eye + pin
        score = np.where(live, score, 0.0)
        try:
            step = np.linalg.solve(info, score[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.einsum("...pq,...q->...p", np.linalg.pinv(info), score)
        step = np.where(running[..., None] & np.isfinite(step), step, 0.0)
        beta = beta + step
        n_iter = n_iter + running
        delta = np.abs(step / scale).max(axis=-1)
        eta_new = np.abs(np.einsum("...kp,...p->...k", Xs, beta)).max(axis=-1)
        newly_div = running & (eta_new > DIVERGENCE)
        newly_conv = running & ~newly_div & (delta < tol)
        diverged |= newly_div
        converged |= newly_conv
        running &= ~(newly_div | newly_conv)

    eta = np.einsum("...kp,...p->...k", Xs, beta)
    mu = np.clip(expit(eta), PROB_CLAMP, 1 - PROB_CLAMP)
    w = trials * mu * (1 - mu)
    info = np.einsum("...kp,...k,...kq->...pq", Xs, w, Xs) + ridge * eye + pin
    with np.errstate(all="ignore"):
        try:
            cov_s = np.linalg.inv(info)
        except np.linalg.LinAlgError:
            cov_s = np.linalg.pinv(info)
    cov_s = np.where(live[..., :, None] & live[..., None, :], cov_s, 0.0)
    cov = cov_s / (scale[..., :, None] * scale[..., None, :])
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    coef = np.where(live, beta / scale, 0.0)
    ll = succ * np.log(mu) + (trials - succ) * np.log(1 - mu)
    deviance = -2.0 * ll.sum(axis=-1)
    ok = converged & ~diverged & np.isfinite(deviance) & np.all(np.isfinite(coef), axis=-1)
    return coef, cov, deviance, ok, n_iter


def fit_logistic_irls(X: ArrayLike, y: ArrayLike, trials: ArrayLike | None = None,
                      **controls) -> IRLSResult:
    """Maximum-likelihood logistic regression by IRLS.

    Parameters
    ----------
    X : (n, p) design matrix, intercept included.
    y : binary outcomes, or success counts when ``trials`` is given.
    trials : optional binomial denominators per row.

    The covariance is the inverse observed information at the returned
    coefficients. ``converged`` is False when the iteration cap or the
    divergence guard (|linear predictor| > 50, i.e. separation) triggers;
    the last iterate is returned regardless.
    """
    X = np.atleast_2d(np.asarray(X, float))
    y = np.asarray(y, float).ravel()
    if X.shape[0] != y.size:
        raise ValueError("rows(X) must equal len(y)")
    n = np.ones_like(y) if trials is None else np.asarray(trials, float).ravel()
    if np.any(y < 0) or np.any(y > n):
        raise ValueError("outcomes must lie in [0, trials]")
    if trials is None and not np.all((y == 0) | (y == 1)):
        raise ValueError("binary outcomes must be 0 or 1")
    if np.linalg.matrix_rank(X / np.maximum(np.abs(X).max(axis=0), 1e-300)) < X.shape[1]:
        raise SingularInformationError("design matrix is rank deficient")
    coef, cov, dev, ok, n_iter = _irls_batch(X, y, n, **controls)
    return IRLSResult(coef, cov, float(dev), bool(ok), int(n_iter))


# ---------------------------------------------------------------------------
# Fitted curves
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FittedCurve:
    """An FP logistic duration-response curve with its sampling covariance."""

    powers: FPPowers
    coef: NDArray
    covariance: NDArray
    deviance: float
    converged: bool = True
    n_obs: int = 0

    def __post_init__(self):
        coef = np.array(self.coef, float)
        cov = np.array(self.covariance, float)
        k = 1 + self.powers.n_terms
        if coef.shape != (k,) or cov.shape != (k, k):
            raise ValueError(f"powers {self.powers} need {k} coefficients and a {k}x{k} covariance")
        coef.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, "coef", coef)
        object.__setattr__(self, "covariance", cov)

    def design_row(self, D: ArrayLike) -> NDArray:
        return build_design_matrix(np.atleast_1d(D), self.powers)

    def linear_predictor(self, D: ArrayLike) -> NDArray:
        return self.design_row(D) @ self.coef

    def __call__(self, D):
        return curve_eval(self, D)

    def eval(self, D):
        return curve_eval(self, D)

    def gradient(self, D):
        return curve_gradient(self, D)

    def padded(self) -> tuple[NDArray, NDArray, NDArray, NDArray]:
        """(p1, p2, coef[3], cov[3,3]) in the zero-padded batch layout."""
        k = 1 + self.powers.n_terms
        coef = np.zeros(3)
        cov = np.zeros((3, 3))
        coef[:k] = self.coef
        cov[:k, :k] = self.covariance
        p1, p2 = self.powers.as_array()
        return np.array(p1), np.array(p2), coef, cov

    def summary(self) -> dict:
        return {
            "powers": [self.powers.p1, self.powers.p2],
            "model": self.powers.kind,
            "coef": self.coef.tolist(),
            "covariance": self.covariance.tolist(),
            "deviance": self.deviance,
            "converged": self.converged,
            "n_obs": self.n_obs,
        }


def _scalar_or_array(x: NDArray, D):
    return float(x[0]) if np.ndim(D) == 0 else x


def curve_eval(curve: FittedCurve, D: ArrayLike):
    """Fitted cure probability at ``D`` (inverse-logit of the linear predictor)."""
    return _scalar_or_array(expit(curve.linear_predictor(D)), D)


def curve_gradient(curve: FittedCurve, D: ArrayLike):
    """Analytic dπ/dD = π(1-π)·dη/dD."""
    d = np.atleast_1d(np.asarray(D, float))
    p1, p2 = curve.powers.as_array()
    g1, g2 = _term_derivatives(d, np.array(p1), np.array(p2))
    coef = np.zeros(3)
    coef[: curve.coef.size] = curve.coef
    deta = coef[1] * g1 + coef[2] * g2
    pi = expit(curve.linear_predictor(d))
    return _scalar_or_array(pi * (1 - pi) * deta, D)


def pointwise_se(curve: FittedCurve, D: ArrayLike, scale: str = "probability"):
    """Delta-method standard error of the fitted curve at ``D``.

    ``scale="probability"`` gives the SE of π̂(D); ``"linear-predictor"``
    gives the SE of η̂(D), for bands built on the logit scale.
    """
    X = curve.design_row(D)
    var_eta = np.einsum("ip,pq,iq->i", X, curve.covariance, X)
    se_eta = np.sqrt(np.maximum(var_eta, 0.0))
    if scale == "linear-predictor":
        return _scalar_or_array(se_eta, D)
    if scale != "probability":
        raise ValueError(f"unknown scale {scale!r}")
    pi = expit(X @ curve.coef)
    return _scalar_or_array(pi * (1 - pi) * se_eta, D)


def pointwise_band(curve: FittedCurve, D: ArrayLike, level: float = 0.95,
                   scale: str = "probability") -> tuple[NDArray, NDArray]:
    """Lower and upper pointwise confidence band at ``D``."""
    z = norm.ppf(0.5 + level / 2)
    d = np.atleast_1d(np.asarray(D, float))
    if scale == "linear-predictor":
        eta = curve.linear_predictor(d)
        se = pointwise_se(curve, d, scale)
        return expit(eta - z * se), expit(eta + z * se)
    pi = curve_eval(curve, d)
    se = pointwise_se(curve, d)
    return pi - z * se, pi + z * se


# ---------------------------------------------------------------------------
# Batched curves (bootstrap replicates, candidate fits)
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CurveBatch:
    """A stack of FP curves in padded layout; evaluates with broadcasting.

    ``eval(D)`` takes ``D`` of shape ``(B,)`` or ``(B, g)`` (or anything that
    broadcasts against a trailing grid axis) and returns the same shape.
    """

    p1: NDArray
    p2: NDArray
    coef: NDArray
    covariance: NDArray | None = None
    deviance: NDArray | None = None

    def __len__(self):
        return self.p1.shape[0]

    @classmethod
    def from_curve(cls, curve: FittedCurve) -> "CurveBatch":
        p1, p2, coef, cov = curve.padded()
        return cls(p1[None], p2[None], coef[None], cov[None], np.array([curve.deviance]))

    def _expand(self, D):
        D = np.asarray(D, float)
        if D.ndim == 0:
            D = np.broadcast_to(D, self.p1.shape)
        extra = D.ndim - 1
        shape = (-1,) + (1,) * extra
        return D, self.p1.reshape(shape), self.p2.reshape(shape), self.coef.reshape(shape[:1] + (1,) * extra + (3,))

    def eta(self, D):
        D, p1, p2, coef = self._expand(D)
        f1, f2 = _term_columns(D, p1, p2)
        return coef[..., 0] + coef[..., 1] * f1 + coef[..., 2] * f2

    def eval(self, D):
        return expit(self.eta(D))

    def gradient(self, D):
        D, p1, p2, coef = self._expand(D)
        g1, g2 = _term_derivatives(D, p1, p2)
        pi = self.eval(D)
        return pi * (1 - pi) * (coef[..., 1] * g1 + coef[..., 2] * g2)

    def take(self, idx) -> "CurveBatch":
        return CurveBatch(self.p1[idx], self.p2[idx], self.coef[idx],
                          None if self.covariance is None else self.covariance[idx],
                          None if self.deviance is None else self.deviance[idx])

    def curve(self, i: int, n_obs: int = 0) -> FittedCurve:
        powers = FPPowers(None if np.isnan(self.p1[i]) else self.p1[i],
                          None if np.isnan(self.p2[i]) else self.p2[i])
        k = 1 + powers.n_terms
        cov = np.zeros((k, k)) if self.covariance is None else self.covariance[i][:k, :k]
        dev = np.nan if self.deviance is None else float(self.deviance[i])
        return FittedCurve(powers, self.coef[i][:k], cov, dev, True, n_obs)


@dataclass
class _CandidateFits:
    """Fits of every candidate model on every dataset in a batch."""

    candidates: list[FPPowers]
    p1: NDArray          # (C,)
    p2: NDArray          # (C,)
    coef: NDArray        # (B, C, 3)
    cov: NDArray         # (B, C, 3, 3)
    deviance: NDArray    # (B, C)
    ok: NDArray          # (B, C)


def _fit_candidates(levels: NDArray, succ: NDArray, trials: NDArray,
                    candidates: Sequence[FPPowers]) -> _CandidateFits:
    powers = np.array([c.as_array() for c in candidates])
    p1, p2 = powers[:, 0], powers[:, 1]
    X = _padded_design(levels[None, :], p1[:, None], p2[:, None])  # (C, k, 3)
    succ = np.atleast_2d(succ)
    trials = np.atleast_2d(trials)
    B, C = succ.shape[0], len(candidates)
    Xb = np.broadcast_to(X, (B,) + X.shape)
    sb = np.broadcast_to(succ[:, None, :], (B, C, succ.shape[-1]))
    tb = np.broadcast_to(trials[:, None, :], (B, C, trials.shape[-1]))
    coef, cov, dev, ok, _ = _irls_batch(Xb, sb, tb)
    return _CandidateFits(list(candidates), p1, p2, coef, cov, dev, ok)


def _pick(fits: _CandidateFits, mask: NDArray) -> tuple[NDArray, NDArray]:
    """Index of the minimum-deviance usable candidate per dataset.

    Ties within 1e-8 go to the earliest candidate (canonical order).
    """
    dev = np.where(fits.ok & mask, fits.deviance, np.inf)
    best = dev.min(axis=1, keepdims=True)
    tied = dev <= best + 1e-8
    idx = np.argmax(tied, axis=1)
    return idx, np.isfinite(best[:, 0])


def _assemble(fits: _CandidateFits, idx: NDArray, found: NDArray) -> CurveBatch:
    rows = np.arange(idx.size)
    return CurveBatch(fits.p1[idx].copy(), fits.p2[idx].copy(), fits.coef[rows, idx].copy(),
                      fits.cov[rows, idx].copy(), np.where(found, fits.deviance[rows, idx], np.nan))


def _check_identifiable(levels: NDArray):
    if levels.size < 3:
        raise FitError(f"need at least 3 distinct durations to fit an FP2 curve, got {levels.size}")


def select_fp2_batch(levels: NDArray, succ: NDArray, trials: NDArray,
                     powers: Sequence[float] = POWERS) -> tuple[CurveBatch, NDArray]:
    """Exhaustive FP2 selection on a stack of aggregated datasets.

    Returns the selected curves and a boolean mask of datasets for which at
    least one candidate converged (the others hold NaN deviance).
    """
    _check_identifiable(levels)
    fits = _fit_candidates(levels, succ, trials, fp2_candidates(powers))
    idx, found = _pick(fits, np.ones(len(fits.candidates), bool)[None, :])
    return _assemble(fits, idx, found), found


def closed_test_batch(levels: NDArray, succ: NDArray, trials: NDArray, sig_level: float = 0.05,
                      powers: Sequence[float] = POWERS) -> tuple[CurveBatch, NDArray]:
    """Royston-Altman closed-test FP selection on a stack of datasets.

    Best FP2 is tested against the null model (4 df), then against the
    linear model (3 df), then against the best FP1 (2 df); the first
    non-significant comparison selects the simpler model.
    """
    _check_identifiable(levels)
    fp2 = fp2_candidates(powers)
    fp1 = fp1_candidates(powers)
    cands = fp2 + fp1 + [FPPowers(None)]
    fits = _fit_candidates(levels, succ, trials, cands)
    kinds = np.array([0] * len(fp2) + [1] * len(fp1) + [2])
    is_linear = np.array([c.kind == "linear" for c in cands])

    i2, ok2 = _pick(fits, (kinds == 0)[None, :])
    i1, ok1 = _pick(fits, (kinds == 1)[None, :])
    il, okl = _pick(fits, is_linear[None, :])
    i0, ok0 = _pick(fits, (kinds == 2)[None, :])
    rows = np.arange(i2.size)
    dev = lambda i, ok: np.where(ok, fits.deviance[rows, i], np.inf)  # noqa: E731
    d2, d1, dl, d0 = dev(i2, ok2), dev(i1, ok1), dev(il, okl), dev(i0, ok0)

    crit = [chi2.ppf(1 - sig_level, df) if sig_level < 1 else -np.inf for df in CLOSED_TEST_DF]
    with np.errstate(invalid="ignore"):
        sig_null = ~ok0 | (d0 - d2 > crit[0])
        sig_lin = ~okl | (dl - d2 > crit[1])
        sig_fp1 = ~ok1 | (d1 - d2 > crit[2])
    choice = np.where(~ok2, np.where(ok1, i1, np.where(okl, il, i0)),
                      np.where(~sig_null, i0, np.where(~sig_lin, il, np.where(~sig_fp1, i1, i2))))
    found = ok2 | ok1 | okl | ok0
    return _assemble(fits, choice, found), found


def _single(batch: CurveBatch, found: NDArray, n_obs: int) -> FittedCurve:
    if not found[0]:
        raise FitError("no candidate FP model converged")
    return batch.curve(0, n_obs)


def select_fp2_exhaustive(dataset: TrialDataset, powers: Sequence[float] = POWERS) -> FittedCurve:
    """Best of all FP2 power pairs by deviance (the modified FP algorithm)."""
    levels, succ, trials = dataset.aggregate()
    batch, found = select_fp2_batch(levels, succ[None], trials[None], powers)
    return _single(batch, found, len(dataset))


def select_fp_closed_test(dataset: TrialDataset, sig_level: float = 0.05,
                          powers: Sequence[float] = POWERS) -> FittedCurve:
    """Standard FP function selection (up to two terms) by closed test."""
    levels, succ, trials = dataset.aggregate()
    batch, found = closed_test_batch(levels, succ[None], trials[None], sig_level, powers)
    return _single(batch, found, len(dataset))


def fit_fp(dataset: TrialDataset, powers: FPPowers) -> FittedCurve:
    """Fit one fixed FP model."""
    levels, succ, trials = dataset.aggregate()
    X = build_design_matrix(levels, powers)
    res = fit_logistic_irls(X, succ, trials)
    return FittedCurve(powers, res.coef, res.covariance, res.deviance, res.converged, len(dataset))


FP_ALGORITHMS = ("exact2", "closed-test")


def select_batch(algorithm: str, levels, succ, trials, sig_level: float = 0.05):
    if algorithm == "exact2":
        return select_fp2_batch(levels, succ, trials)
    if algorithm == "closed-test":
        return closed_test_batch(levels, succ, trials, sig_level)
    raise ValueError(f"unknown FP algorithm {algorithm!r}; choose from {FP_ALGORITHMS}")


def select_fp(dataset: TrialDataset, algorithm: str = "exact2", sig_level: float = 0.05) -> FittedCurve:
    levels, succ, trials = dataset.aggregate()
    batch, found = select_batch(algorithm, levels, succ[None], trials[None], sig_level)
    return _single(batch, found, len(dataset))
