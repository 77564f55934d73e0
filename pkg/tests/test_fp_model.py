import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit, logit

from durations.fp_model import (POWERS, CurveBatch, FitError, FittedCurve, FPPowers, TrialDataset,
                                build_design_matrix, curve_eval, curve_gradient, fit_fp,
                                fit_logistic_irls, fp2_candidates, fp_transform, pointwise_se,
                                select_fp, select_fp2_exhaustive, select_fp_closed_test)
from durations.scenarios import true_curve

from conftest import big_dataset

ARMS = np.array([8.0, 10, 12, 14, 16, 18, 20])


def test_fp_transform_examples():
    assert fp_transform(10, 1) == 10
    assert fp_transform(1, 0) == 0
    assert fp_transform(8, -0.5) == pytest.approx(0.3535533905932738, rel=1e-12)


def test_fp_transform_rejects_nonpositive():
    with pytest.raises(ValueError):
        fp_transform(0.0, 1)
    with pytest.raises(ValueError):
        fp_transform(-2.0, 0.5)


def test_design_matrix_examples():
    np.testing.assert_array_equal(build_design_matrix([8, 20], FPPowers(1)), [[1, 8], [1, 20]])
    np.testing.assert_allclose(build_design_matrix([math.e], FPPowers(0, 0)), [[1, 1, 1]])
    np.testing.assert_allclose(build_design_matrix([10], FPPowers(1, 2)), [[1, 10, 100]])


def test_repeated_power_adds_log_column():
    X = build_design_matrix([9.0], FPPowers(2, 2))
    np.testing.assert_allclose(X, [[1, 81, 81 * math.log(9)]])


def test_powers_canonical_order():
    assert FPPowers(2, -1) == FPPowers(-1, 2)
    assert FPPowers(None, 3) == FPPowers(3)
    assert FPPowers().kind == "null"
    assert FPPowers(1).kind == "linear"
    assert FPPowers(0.5).kind == "fp1"


def test_36_candidates():
    cands = fp2_candidates()
    assert len(cands) == 36
    assert sum(c.p1 == c.p2 for c in cands) == 8
    assert len(set(cands)) == 36


def test_intercept_only_fit_is_logit_of_mean():
    y = np.r_[np.ones(70), np.zeros(30)]
    res = fit_logistic_irls(np.ones((100, 1)), y)
    assert res.converged
    assert res.coef[0] == pytest.approx(logit(0.7), abs=1e-8)
    assert res.coef[0] == pytest.approx(0.8473, abs=1e-4)


def test_intercept_only_se_matches_binomial():
    data = TrialDataset(np.r_[np.full(50, 10.0), np.full(50, 12.0)], np.r_[np.ones(35), np.zeros(15),
                                                                          np.ones(35), np.zeros(15)])
    curve = fit_fp(data, FPPowers())
    assert pointwise_se(curve, 11.0) == pytest.approx(math.sqrt(0.7 * 0.3 / 100), abs=1e-4)


def test_separation_flags_nonconvergence():
    X = np.c_[np.ones(40), np.repeat([8.0, 12.0], 20)]
    res = fit_logistic_irls(X, np.ones(40))
    assert not res.converged
    p = expit(X @ res.coef)
    assert np.all(p <= 1.0) and np.all(p > 0.5)


def test_rank_deficient_design_raises():
    X = np.c_[np.ones(10), np.ones(10)]
    with pytest.raises(FitError):
        fit_logistic_irls(X, np.r_[np.ones(5), np.zeros(5)])


def test_score_zero_and_covariance_psd(s1_data):
    levels, succ, trials = s1_data.aggregate()
    X = build_design_matrix(levels, FPPowers(0.5, 2))
    res = fit_logistic_irls(X, succ, trials)
    assert res.converged
    score = X.T @ (succ - trials * expit(X @ res.coef))
    assert np.max(np.abs(score)) < 1e-6 * len(s1_data)
    cov = res.covariance
    np.testing.assert_allclose(cov, cov.T, rtol=1e-10, atol=0)
    assert np.linalg.eigvalsh(0.5 * (cov + cov.T)).min() >= -1e-8


def test_large_sample_linear_coefficients():
    data = big_dataset(1, 100_000)
    curve = fit_fp(data, FPPowers(1))
    assert curve.coef[0] == pytest.approx(0.85 - 0.17 * 8, abs=0.02 * 8)
    assert curve.coef[1] == pytest.approx(0.17, abs=0.02)


def test_exhaustive_recovers_truth_large_sample():
    curve = select_fp2_exhaustive(big_dataset(1, 100_000))
    assert np.max(np.abs(curve(ARMS) - true_curve(1, ARMS))) < 0.01


def test_exhaustive_is_minimum_deviance(s1_data):
    best = select_fp2_exhaustive(s1_data)
    devs = [fit_fp(s1_data, p).deviance for p in fp2_candidates()]
    assert best.deviance <= min(devs) + 1e-8


def test_pair_order_does_not_change_fit(s1_data):
    a = fit_fp(s1_data, FPPowers(-1, 2))
    b = fit_fp(s1_data, FPPowers(2, -1))
    assert a.deviance == pytest.approx(b.deviance, abs=1e-8)


def test_row_permutation_invariance(s1_data):
    perm = np.random.default_rng(0).permutation(len(s1_data))
    shuffled = TrialDataset(s1_data.durations[perm], s1_data.cures[perm])
    a = fit_fp(s1_data, FPPowers(1, 1))
    b = fit_fp(shuffled, FPPowers(1, 1))
    np.testing.assert_allclose(a.coef, b.coef, rtol=1e-10)


def test_flat_cure_rate_gives_flat_curve():
    n = 10_000 // 7
    durs = np.repeat(ARMS, n)
    cures = np.tile(np.r_[np.ones(int(0.9 * n)), np.zeros(n - int(0.9 * n))], 7)
    curve = select_fp2_exhaustive(TrialDataset(durs, cures))
    assert np.max(np.abs(curve(ARMS) - curve(20.0))) < 0.005


def test_two_arms_not_identifiable():
    data = TrialDataset(np.repeat([8.0, 20.0], 50), np.tile([0, 1], 50))
    with pytest.raises(FitError):
        select_fp2_exhaustive(data)


def test_closed_test_flat_truth_not_significant():
    curve = select_fp_closed_test(big_dataset(4, 50_000))
    assert curve.powers.kind in ("null", "linear")


def test_closed_test_keeps_duration_on_steep_truth():
    curve = select_fp_closed_test(big_dataset(1, 50_000))
    assert curve.powers.kind != "null"


def test_closed_test_at_sig_one_equals_exhaustive(s1_data):
    a = select_fp_closed_test(s1_data, sig_level=1.0)
    b = select_fp2_exhaustive(s1_data)
    assert a.powers == b.powers
    np.testing.assert_allclose(a(ARMS), b(ARMS), rtol=1e-12)


def _linear_curve(a, b, cov=None):
    return FittedCurve(FPPowers(1), np.array([a, b]), np.zeros((2, 2)) if cov is None else cov, 0.0, True, 0)


def test_curve_eval_examples():
    zero = FittedCurve(FPPowers(0.5, 2), np.zeros(3), np.zeros((3, 3)), 0.0, True, 0)
    assert curve_eval(zero, 13.0) == 0.5
    s1 = _linear_curve(0.85 - 0.17 * 8, 0.17)
    assert curve_eval(s1, 20.0) == pytest.approx(0.9473, abs=1e-4)
    assert curve_eval(s1, 10.0) < curve_eval(s1, 11.0)


def test_curve_gradient_examples():
    flat = FittedCurve(FPPowers(0, 3), np.array([1.0, 0.0, 0.0]), np.zeros((3, 3)), 0.0, True, 0)
    assert curve_gradient(flat, 12.0) == 0.0
    s1 = _linear_curve(0.85 - 0.17 * 8, 0.17)
    assert curve_gradient(s1, 8.0) == pytest.approx(0.03566, abs=1e-5)


def test_zero_covariance_se_is_zero():
    assert pointwise_se(_linear_curve(0.1, 0.05), 12.0) == 0.0


powers_st = st.sampled_from(POWERS)


@settings(max_examples=100, deadline=None)
@given(p1=powers_st, p2=powers_st, c=st.lists(st.floats(-2, 2), min_size=3, max_size=3),
       d=st.floats(8, 20))
def test_gradient_matches_finite_difference(p1, p2, c, d):
    pw = FPPowers(p1, p2)
    # keep the linear predictor moderate whatever the power scale
    scale = np.abs(build_design_matrix(ARMS, pw)).max(axis=0)
    coef = np.asarray(c) / scale
    curve = FittedCurve(pw, coef, np.zeros((3, 3)), 0.0, True, 0)
    h = 1e-5
    fd = (curve_eval(curve, d + h) - curve_eval(curve, d - h)) / (2 * h)
    g = curve_gradient(curve, d)
    assert g == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_batch_matches_single(s1_data):
    curve = select_fp(s1_data)
    batch = CurveBatch.from_curve(curve)
    grid = np.linspace(8, 20, 25)
    np.testing.assert_allclose(batch.eval(grid[None, :])[0], curve(grid), rtol=1e-12)
    np.testing.assert_allclose(batch.gradient(grid[None, :])[0], curve.gradient(grid), rtol=1e-10)


def test_fitted_curve_in_unit_interval(s1_data):
    curve = select_fp(s1_data)
    p = curve(np.linspace(8, 20, 121))
    assert np.all((p > 0) & (p < 1))
    assert len(curve.coef) == 1 + curve.powers.n_terms
