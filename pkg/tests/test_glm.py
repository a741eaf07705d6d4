import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.special import expit, logit

from ecpc import (
    ConvergenceError,
    DataError,
    PenaltyState,
    ResponseFamily,
    breslow_cumhaz,
    estimate_global_variance,
    fit_weighted_ridge,
    martingale_residuals,
)
from ecpc.glm import (
    family_loglik,
    moment_weights,
    stratified_folds,
    weight_matrix,
)


def rand_problem(seed, n, p):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    y = rng.standard_normal(n)
    return X, y


class TestGaussianRidge:
    def test_identity_design_closed_form(self):
        rng = np.random.default_rng(0)
        n = 7
        y = rng.standard_normal(n)
        lam = 2.5
        state = PenaltyState.uniform(1.0 / lam, n)
        fit = fit_weighted_ridge(np.eye(n), ResponseFamily.gaussian(y, sigma2=1.0), state)
        assert np.allclose(fit.beta, y / (1 + lam), atol=1e-10)

    @pytest.mark.parametrize("n,p", [(20, 8), (8, 20)])
    def test_matches_closed_form(self, n, p):
        X, y = rand_problem(1, n, p)
        s2 = 1.7
        state = PenaltyState(
            tau_global=0.5,
            tau_local=np.linspace(0.5, 2.0, p),
            unpenalized_mask=np.zeros(p, dtype=bool),
        )
        fit = fit_weighted_ridge(X, ResponseFamily.gaussian(y, sigma2=s2), state)
        omega = state.precision_diag
        ref = np.linalg.solve(X.T @ X + s2 * np.diag(omega), X.T @ y)
        assert np.allclose(fit.beta, ref, atol=1e-8)
        assert np.allclose(fit.linear_predictor, X @ fit.beta, atol=1e-10)

    def test_primal_and_dual_paths_agree(self):
        # same problem solved with p <= n and, after duplicating columns of
        # zeros into extra rows, p > n: compare against the closed form both ways
        X, y = rand_problem(2, 12, 9)
        state = PenaltyState.uniform(0.7, 9)
        fit_primal = fit_weighted_ridge(X, ResponseFamily.gaussian(y, sigma2=1.0), state)
        X2, y2 = rand_problem(3, 6, 11)
        state2 = PenaltyState.uniform(0.7, 11)
        fit_dual = fit_weighted_ridge(X2, ResponseFamily.gaussian(y2, sigma2=1.0), state2)
        ref2 = np.linalg.solve(X2.T @ X2 + np.diag(state2.precision_diag), X2.T @ y2)
        assert np.allclose(fit_dual.beta, ref2, atol=1e-8)
        ref1 = np.linalg.solve(X.T @ X + np.diag(state.precision_diag), X.T @ y)
        assert np.allclose(fit_primal.beta, ref1, atol=1e-8)

    def test_column_rescaling_equivariance(self):
        X, y = rand_problem(4, 15, 6)
        tau_local = np.full(6, 1.3)
        c = 3.7
        state = PenaltyState(
            tau_global=0.9, tau_local=tau_local, unpenalized_mask=np.zeros(6, dtype=bool)
        )
        fit = fit_weighted_ridge(X, ResponseFamily.gaussian(y, sigma2=1.0), state)
        X2 = X.copy()
        X2[:, 2] *= c
        tl2 = tau_local.copy()
        tl2[2] /= c**2
        state2 = PenaltyState(
            tau_global=0.9, tau_local=tl2, unpenalized_mask=np.zeros(6, dtype=bool)
        )
        fit2 = fit_weighted_ridge(X2, ResponseFamily.gaussian(y, sigma2=1.0), state2)
        assert np.allclose(fit.linear_predictor, fit2.linear_predictor, atol=1e-8)

    def test_requires_sigma2(self):
        X, y = rand_problem(5, 10, 4)
        with pytest.raises(DataError):
            fit_weighted_ridge(X, ResponseFamily.gaussian(y), PenaltyState.uniform(1.0, 4))


class TestBinomialRidge:
    def test_matches_bfgs_oracle(self):
        rng = np.random.default_rng(6)
        X = rng.standard_normal((50, 5))
        y = (rng.uniform(size=50) < expit(X @ rng.standard_normal(5))).astype(float)
        state = PenaltyState.uniform(0.4, 5)
        fit = fit_weighted_ridge(X, ResponseFamily.binomial(y), state)
        om = state.precision_diag

        def obj(b):
            lp = X @ b
            return -(y * lp - np.logaddexp(0, lp)).sum() + 0.5 * (om * b**2).sum()

        ref = minimize(obj, np.zeros(5), method="BFGS", options={"gtol": 1e-12}).x
        assert fit.converged
        assert np.allclose(fit.beta, ref, atol=1e-6)

    def test_infinite_penalty_with_intercept(self):
        rng = np.random.default_rng(7)
        X = np.hstack([rng.standard_normal((80, 3)), np.ones((80, 1))])
        y = (rng.uniform(size=80) < 0.7).astype(float)
        mask = np.array([False, False, False, True])
        state = PenaltyState(
            tau_global=1e-12, tau_local=np.ones(4), unpenalized_mask=mask
        )
        fit = fit_weighted_ridge(X, ResponseFamily.binomial(y), state)
        assert np.abs(fit.beta[:3]).max() < 1e-6
        assert abs(fit.beta[3] - logit(y.mean())) < 1e-4

    def test_separation_flagged(self):
        X = np.linspace(-1, 1, 20).reshape(-1, 1)
        y = (X[:, 0] > 0).astype(float)
        state = PenaltyState.uniform(1e6, 1)
        fit = fit_weighted_ridge(X, ResponseFamily.binomial(y), state)
        assert fit.separation

    def test_penalized_objective_nonincreasing_result(self):
        # the returned point must not be improvable by small perturbations
        rng = np.random.default_rng(8)
        X = rng.standard_normal((30, 4))
        y = (rng.uniform(size=30) < 0.5).astype(float)
        state = PenaltyState.uniform(1.0, 4)
        fit = fit_weighted_ridge(X, ResponseFamily.binomial(y), state)
        om = state.precision_diag
        resp = ResponseFamily.binomial(y)

        def obj(b):
            return family_loglik(resp, X @ b) - 0.5 * (om * b**2).sum()

        base = obj(fit.beta)
        for _ in range(10):
            assert obj(fit.beta + 1e-4 * rng.standard_normal(4)) <= base + 1e-9


class TestCox:
    def test_breslow_toy(self):
        H = breslow_cumhaz(np.array([1.0, 2.0, 3.0]), np.array([1.0, 1.0, 1.0]), np.zeros(3))
        assert np.allclose(H, [1 / 3, 5 / 6, 11 / 6], atol=1e-12)

    def test_breslow_all_censored(self):
        H = breslow_cumhaz(np.array([1.0, 2.0]), np.zeros(2), np.zeros(2))
        assert np.array_equal(H, np.zeros(2))

    def test_breslow_single_event(self):
        H = breslow_cumhaz(np.array([1.0]), np.array([1.0]), np.zeros(1))
        assert np.allclose(H, [1.0])

    def test_breslow_nondecreasing_in_time(self):
        rng = np.random.default_rng(9)
        t = rng.exponential(size=40)
        d = (rng.uniform(size=40) < 0.6).astype(float)
        lp = rng.standard_normal(40)
        H = breslow_cumhaz(t, d, lp)
        order = np.argsort(t)
        assert (np.diff(H[order]) >= -1e-12).all()

    def test_martingale_toy(self):
        t = np.array([1.0, 2.0, 3.0])
        d = np.ones(3)
        H = breslow_cumhaz(t, d, np.zeros(3))
        res = martingale_residuals(t, d, np.zeros(3), H)
        assert abs(res[0] - 2 / 3) < 1e-12

    @given(st.integers(0, 50))
    @settings(max_examples=25, deadline=None)
    def test_martingale_sum_zero(self, seed):
        rng = np.random.default_rng(seed)
        n = rng.integers(3, 30)
        t = rng.exponential(size=n) + 0.01
        d = (rng.uniform(size=n) < 0.7).astype(float)
        lp = rng.standard_normal(n)
        H = breslow_cumhaz(t, d, lp)
        res = martingale_residuals(t, d, lp, H)
        assert abs(res.sum()) < 1e-8

    def test_all_censored_residuals_zero(self):
        t = np.array([1.0, 2.0])
        d = np.zeros(2)
        H = breslow_cumhaz(t, d, np.zeros(2))
        assert np.array_equal(martingale_residuals(t, d, np.zeros(2), H), np.zeros(2))

    def test_fit_matches_newton_oracle(self):
        rng = np.random.default_rng(10)
        n, p = 6, 2
        t = rng.exponential(size=n) + 0.1
        d = np.array([1.0, 1.0, 0.0, 1.0, 1.0, 0.0])
        X = rng.standard_normal((n, p))
        resp = ResponseFamily.cox(t, d)
        state = PenaltyState.uniform(0.8, p)
        fit = fit_weighted_ridge(X, resp, state)
        om = state.precision_diag

        def obj(b):
            return -family_loglik(resp, X @ b) + 0.5 * (om * b**2).sum()

        # brute-force Newton with numerical derivatives
        b = np.zeros(p)
        for _ in range(200):
            eps = 1e-6
            g = np.array(
                [
                    (obj(b + eps * np.eye(p)[j]) - obj(b - eps * np.eye(p)[j])) / (2 * eps)
                    for j in range(p)
                ]
            )
            H = np.zeros((p, p))
            for j in range(p):
                for k in range(p):
                    ej, ek = eps * np.eye(p)[j], eps * np.eye(p)[k]
                    H[j, k] = (
                        obj(b + ej + ek) - obj(b + ej - ek) - obj(b - ej + ek) + obj(b - ej - ek)
                    ) / (4 * eps**2)
            step = np.linalg.solve(H, g)
            b = b - step
            if np.abs(step).max() < 1e-10:
                break
        assert np.allclose(fit.beta, b, atol=1e-6)

    def test_ties_share_risk_set(self):
        t = np.array([1.0, 1.0, 2.0])
        d = np.ones(3)
        H = breslow_cumhaz(t, d, np.zeros(3))
        # hazard at t=1 is 2/3 (two events over risk set of 3), at t=2 adds 1
        assert np.allclose(H, [2 / 3, 2 / 3, 2 / 3 + 1.0], atol=1e-12)


class TestWeights:
    def test_binomial_null_weights(self):
        rng = np.random.default_rng(11)
        y = (rng.uniform(size=9) < 0.5).astype(float)
        resp = ResponseFamily.binomial(y)

        class Fit:
            linear_predictor = np.zeros(9)

        assert np.allclose(weight_matrix(resp, Fit), 0.25)

    def test_gaussian_weight_is_sigma2(self):
        resp = ResponseFamily.gaussian(np.zeros(3), sigma2=2.0)

        class Fit:
            linear_predictor = np.zeros(3)

        assert np.allclose(weight_matrix(resp, Fit), 2.0)
        assert np.allclose(moment_weights(resp, Fit), 0.5)

    def test_cox_weight_is_cumhaz_at_null(self):
        t = np.array([1.0, 2.0, 3.0])
        d = np.ones(3)
        lp = np.zeros(3)
        H = breslow_cumhaz(t, d, lp)
        resp = ResponseFamily.cox(t, d)

        class Fit:
            linear_predictor = lp

        assert np.allclose(weight_matrix(resp, Fit, H0=H), H)

    def test_cox_requires_h0(self):
        resp = ResponseFamily.cox(np.array([1.0]), np.array([1.0]))

        class Fit:
            linear_predictor = np.zeros(1)

        with pytest.raises(DataError):
            weight_matrix(resp, Fit)


class TestStratifiedFolds:
    def test_class_balance(self):
        y = np.array([0.0] * 12 + [1.0] * 8)
        folds = stratified_folds(ResponseFamily.binomial(y), 4, seed=0)
        for k in range(4):
            assert (y[folds == k] == 1).sum() == 2
            assert (y[folds == k] == 0).sum() == 3

    def test_deterministic(self):
        y = (np.arange(30) % 2).astype(float)
        f1 = stratified_folds(ResponseFamily.binomial(y), 5, seed=9)
        f2 = stratified_folds(ResponseFamily.binomial(y), 5, seed=9)
        assert np.array_equal(f1, f2)


class TestGlobalVariance:
    def test_gaussian_recovery(self):
        hits = 0
        for rep in range(10):
            rng = np.random.default_rng(100 + rep)
            n, p = 100, 300
            beta0 = rng.normal(0, np.sqrt(0.1), p)
            X = rng.standard_normal((n, p))
            y = X @ beta0 + rng.normal(0, 1, n)
            gv = estimate_global_variance(X, ResponseFamily.gaussian(y))
            if 0.05 <= gv.tau_global <= 0.2:
                hits += 1
        assert hits >= 7

    def test_zero_response_gives_vanishing_tau(self):
        rng = np.random.default_rng(12)
        X = rng.standard_normal((20, 10))
        gv = estimate_global_variance(X, ResponseFamily.gaussian(np.zeros(20)))
        assert gv.tau_global < 1e-6

    def test_fixed_sigma2_respected(self):
        rng = np.random.default_rng(13)
        X = rng.standard_normal((30, 10))
        y = rng.standard_normal(30)
        gv = estimate_global_variance(X, ResponseFamily.gaussian(y, sigma2=1.0))
        assert gv.sigma2 == 1.0

    def test_binomial_duplication_invariance(self):
        rng = np.random.default_rng(14)
        n, p = 40, 10
        X = rng.standard_normal((n, p))
        y = (rng.uniform(size=n) < expit(X[:, 0])).astype(float)
        gv1 = estimate_global_variance(X, ResponseFamily.binomial(y), n_folds=4, seed=0)
        # duplicate every row; assign each copy of sample i to the same fold
        folds = stratified_folds(ResponseFamily.binomial(y), 4, seed=0)
        X2 = np.vstack([X, X])
        y2 = np.concatenate([y, y])
        folds2 = np.concatenate([folds, folds])
        gv2 = estimate_global_variance(
            X2, ResponseFamily.binomial(y2), n_folds=4, seed=0, folds=folds2
        )
        # the per-observation penalty level is the duplication-invariant
        # quantity; the total penalty doubles with the doubled sample count
        per_obs1 = gv1.lambda_star / n
        per_obs2 = gv2.lambda_star / (2 * n)
        step = gv1.grid[1] / gv1.grid[0]
        assert per_obs2 / per_obs1 < step**2 and per_obs1 / per_obs2 < step**2

    def test_binomial_tau_is_reciprocal_lambda(self):
        rng = np.random.default_rng(15)
        X = rng.standard_normal((40, 8))
        y = (rng.uniform(size=40) < 0.5).astype(float)
        gv = estimate_global_variance(X, ResponseFamily.binomial(y), n_folds=4, seed=1)
        assert np.isclose(gv.tau_global, 1.0 / gv.lambda_star)


class TestFamilyChecks:
    def test_binomial_rejects_nonbinary(self):
        with pytest.raises(DataError):
            ResponseFamily.binomial(np.array([0.0, 0.5]))

    def test_cox_rejects_nonpositive_times(self):
        with pytest.raises(DataError):
            ResponseFamily.cox(np.array([0.0, 1.0]), np.array([1.0, 0.0]))

    def test_unknown_family(self):
        with pytest.raises(DataError):
            ResponseFamily("poisson", y=np.zeros(3))
