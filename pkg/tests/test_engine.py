import math
import warnings

import numpy as np
import pytest
from scipy.stats import nbinom

from epimob.basis import SmoothSpec, absorb_sum_to_zero, pspline_block, ridge_block
from epimob.engine import (
    CProfile,
    EngineError,
    Family,
    ModelFrame,
    caic,
    effective_dof,
    fit_model,
    nb_loglik,
    optimize_smoothing,
    pirls,
    profile_c,
    reml_criterion,
)

NB = Family("negative_binomial")
QUASI = Family("quasi")
GAUSS = Family("gaussian")


def make_frame(y, fixed, names, blocks=(), offset=None, ar=None):
    return ModelFrame(y=y, fixed=fixed, fixed_names=list(names),
                      blocks=list(blocks), offset=offset, ar_rates=ar)


class TestNbLoglik:
    def test_point_value(self):
        # P(Y=0) for mu=1, phi=1 is 1/2
        assert nb_loglik([0], [1.0], 1.0) == pytest.approx(math.log(0.5), abs=1e-12)

    def test_normalization(self):
        y = np.arange(0, 10 ** 6)
        ll = (np.vectorize(lambda v: nb_loglik([v], [5.0], 2.0))(np.arange(60)))
        # direct summation over the effective support; the tail beyond 60
        # is smaller than 1e-14 for mu=5, phi=2
        total = np.exp(ll).sum()
        tail = 1.0 - nbinom.cdf(59, 2.0, 2.0 / 7.0)
        assert total + tail == pytest.approx(1.0, abs=1e-12)
        assert len(y) == 10 ** 6  # support grid used to bound the tail

    def test_poisson_limit(self):
        rng = np.random.default_rng(0)
        y = rng.poisson(4.0, 50).astype(float)
        mu = rng.uniform(1, 8, 50)
        pois = float(np.sum(y * np.log(mu) - mu
                            - [math.lgamma(v + 1) for v in y]))
        assert nb_loglik(y, mu, 1e8) == pytest.approx(pois, abs=1e-4)

    def test_matches_scipy_parameterization(self):
        rng = np.random.default_rng(1)
        y = rng.integers(0, 30, 40).astype(float)
        mu = rng.uniform(0.5, 10, 40)
        phi = 3.7
        expected = nbinom.logpmf(y, phi, phi / (phi + mu)).sum()
        assert nb_loglik(y, mu, phi) == pytest.approx(expected, abs=1e-10)

    def test_nonfinite_mean_rejected(self):
        with pytest.raises(EngineError, match="finite"):
            nb_loglik([1.0], [np.nan], 2.0)


def nb_iwls_oracle(X, S, y, offset, phi):
    # from-scratch iterated weighted least squares with working response
    eta = np.log(y + 0.5)
    for _ in range(500):
        mu = np.exp(eta)
        w = mu * phi / (phi + mu)
        z = eta - offset + (y - mu) / mu
        WX = X * w[:, None]
        theta = np.linalg.solve(X.T @ WX + S, WX.T @ z)
        eta_new = X @ theta + offset
        if np.abs(eta_new - eta).max() < 1e-13:
            return theta
        eta = eta_new
    return theta


class TestPirls:
    def test_intercept_only_reproduces_mean(self):
        rng = np.random.default_rng(2)
        y = rng.poisson(6.0, 80).astype(float)
        frame = make_frame(y, np.ones((80, 1)), ["intercept"])
        fit = pirls(frame, [], 4.0, None, NB)
        assert math.exp(fit.theta[0]) == pytest.approx(y.mean(), rel=1e-6)

    def test_matches_iwls_oracle(self):
        rng = np.random.default_rng(3)
        n = 30
        x = rng.normal(size=n)
        labels = list(rng.integers(0, 3, n))
        block = ridge_block(labels)
        fixed = np.column_stack([np.ones(n), x])
        eta_true = 1.0 + 0.4 * x
        y = rng.poisson(np.exp(eta_true)).astype(float)
        offset = rng.normal(0, 0.1, n)
        frame = make_frame(y, fixed, ["intercept", "x"], [block], offset=offset)
        tau = [1.7]
        fit = pirls(frame, tau, 5.0, None, NB)
        X = frame.design(None)
        S = frame.penalty_matrix(tau)
        oracle = nb_iwls_oracle(X, S, y, offset, 5.0)
        assert fit.theta == pytest.approx(oracle, abs=1e-7)

    def test_infinite_shrinkage_zeroes_ridge_block(self):
        rng = np.random.default_rng(4)
        n = 60
        labels = list(rng.integers(0, 4, n))
        y = rng.poisson(3.0, n).astype(float)
        frame = make_frame(y, np.ones((n, 1)), ["intercept"], [ridge_block(labels)])
        fit = pirls(frame, [1e12], 2.0, None, NB)
        assert np.abs(fit.theta[1:]).max() < 1e-5

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        n = 40
        x = rng.normal(size=n)
        block = absorb_sum_to_zero(pspline_block(x, SmoothSpec("pspline", k=6)))
        fixed = np.column_stack([np.ones(n), x])
        y = rng.poisson(np.exp(0.5 + 0.3 * x)).astype(float)
        frame = make_frame(y, fixed, ["intercept", "x"], [block])
        tau, phi = [2.0], 3.0
        X = frame.design(None)
        S = frame.penalty_matrix(tau)
        theta = rng.normal(0, 0.2, X.shape[1])

        def llp(th):
            mu = np.exp(X @ th)
            return nb_loglik(y, mu, phi) - 0.5 * th @ S @ th

        analytic = X.T @ (phi * (y - np.exp(X @ theta)) / (phi + np.exp(X @ theta))) \
            - S @ theta
        fd = np.empty_like(theta)
        for j in range(len(theta)):
            h = 1e-6 * max(1.0, abs(theta[j]))
            e = np.zeros_like(theta)
            e[j] = h
            fd[j] = (llp(theta + e) - llp(theta - e)) / (2 * h)
        assert analytic == pytest.approx(fd, rel=1e-5)

    def test_penalized_loglik_nondecreasing(self):
        rng = np.random.default_rng(6)
        n = 70
        x = rng.normal(size=n)
        y = rng.negative_binomial(3, 3 / (3 + np.exp(1 + 0.5 * x))).astype(float)
        block = absorb_sum_to_zero(pspline_block(x, SmoothSpec("pspline", k=7)))
        frame = make_frame(y, np.ones((n, 1)), ["intercept"], [block])
        fit = pirls(frame, [0.5], 3.0, None, NB)
        diffs = np.diff(fit.trace)
        assert np.all(diffs >= -1e-9 * (1 + np.abs(fit.trace[:-1])))

    def test_rescaled_column_rescales_coefficient(self):
        rng = np.random.default_rng(7)
        n = 50
        x = rng.normal(size=n)
        y = rng.poisson(np.exp(0.8 + 0.5 * x)).astype(float)
        f1 = make_frame(y, np.column_stack([np.ones(n), x]), ["i", "x"])
        f2 = make_frame(y, np.column_stack([np.ones(n), 10.0 * x]), ["i", "x10"])
        fit1 = pirls(f1, [], 4.0, None, NB)
        fit2 = pirls(f2, [], 4.0, None, NB)
        assert fit2.theta[1] == pytest.approx(fit1.theta[1] / 10.0, rel=1e-7)
        assert fit2.mu == pytest.approx(fit1.mu, abs=1e-8)

    def test_unidentifiable_design_rejected(self):
        y = np.arange(1.0, 21.0)
        X = np.column_stack([np.ones(20), np.ones(20)])
        frame = make_frame(y, X, ["a", "b"])
        with pytest.raises(EngineError, match="positive definite"):
            pirls(frame, [], 2.0, None, NB)

    def test_quasi_root_is_poisson_maximizer(self):
        rng = np.random.default_rng(8)
        n = 60
        x = rng.normal(size=n)
        y = rng.poisson(np.exp(1 + 0.4 * x)).astype(float)
        frame = make_frame(y, np.column_stack([np.ones(n), x]), ["i", "x"])
        for phi in (0.5, 1.0, 7.0):
            fit = pirls(frame, [], phi, None, QUASI)
            score = frame.design(None).T @ (y - fit.mu)
            assert np.abs(score).max() < 1e-6 * (1 + abs(fit.loglik))


def gaussian_reml_oracle(y, X0, Z, tau, sigma2):
    """Classical restricted log-likelihood via the marginal covariance."""
    n = len(y)
    V = sigma2 * np.eye(n) + (Z @ Z.T) / tau
    Vi = np.linalg.inv(V)
    A = X0.T @ Vi @ X0
    P = Vi - Vi @ X0 @ np.linalg.solve(A, X0.T @ Vi)
    _, ld_V = np.linalg.slogdet(V)
    _, ld_A = np.linalg.slogdet(A)
    p0 = X0.shape[1]
    return float(-0.5 * (y @ P @ y) - 0.5 * ld_V - 0.5 * ld_A
                 - 0.5 * (n - p0) * math.log(2 * math.pi))


class TestRemlCriterion:
    def _toy_frame(self, seed=9, n=45):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=n)
        labels = list(rng.integers(0, 6, n))
        block = ridge_block(labels)
        u = rng.normal(0, 0.8, 6)
        y = 2.0 + 0.5 * x + np.array([u[l] for l in labels]) + rng.normal(0, 0.6, n)
        fixed = np.column_stack([np.ones(n), x])
        frame = make_frame(y, fixed, ["intercept", "x"], [block])
        return frame, fixed, block

    def test_matches_gaussian_restricted_likelihood(self):
        frame, fixed, block = self._toy_frame()
        for tau, sigma2 in [(2.7, 1.3), (0.4, 0.9), (11.0, 2.2)]:
            value = reml_criterion(frame, [tau], sigma2, None, GAUSS)
            oracle = gaussian_reml_oracle(frame.y, fixed, block.design, tau, sigma2)
            assert value == pytest.approx(oracle, abs=1e-8)

    def test_invariant_to_column_reordering(self):
        frame, fixed, block = self._toy_frame(seed=10)
        swapped = make_frame(frame.y, fixed[:, ::-1], ["x", "intercept"], [block])
        a = reml_criterion(frame, [1.5], 1.0, None, GAUSS)
        b = reml_criterion(swapped, [1.5], 1.0, None, GAUSS)
        assert a == pytest.approx(b, abs=1e-10)

    def test_local_optimality_at_estimate(self):
        frame, _, _ = self._toy_frame(seed=11)
        sm = optimize_smoothing(frame, None, GAUSS)
        base = sm.criterion
        for factor in (0.75, 1.25):
            assert reml_criterion(frame, sm.tau * factor, sm.phi, None, GAUSS) \
                <= base + 1e-6
            assert reml_criterion(frame, sm.tau, sm.phi * factor, None, GAUSS) \
                <= base + 1e-6


class TestOptimizeSmoothing:
    def test_tau_matches_grid_oracle(self):
        rng = np.random.default_rng(12)
        n = 90
        x = np.sort(rng.uniform(0, 1, n))
        f = np.sin(2 * np.pi * x)
        y = rng.poisson(np.exp(0.8 + f)).astype(float)
        block = absorb_sum_to_zero(pspline_block(x, SmoothSpec("pspline", k=12)))
        frame = make_frame(y, np.ones((n, 1)), ["intercept"], [block])
        sm = optimize_smoothing(frame, None, NB)
        grid = np.logspace(-6, 6, 41)
        values = []
        for t in grid:
            try:
                values.append(reml_criterion(frame, [t], sm.phi, None, NB))
            except EngineError:
                values.append(-np.inf)
        values = np.array(values)
        best = grid[np.argmax(values)]
        cell = 12.0 / 40.0  # grid spacing in log10
        assert abs(math.log10(sm.tau[0]) - math.log10(best)) <= cell
        assert sm.criterion >= values.max() - 1e-6

    def test_pure_noise_smooth_shrinks_to_nullspace(self):
        # on iid noise the criterion should push the smooth toward its
        # nullspace; the selected dof has a sampling distribution, so we
        # check its shape rather than demand collapse in every replicate
        rng = np.random.default_rng(13)
        reps = 50
        edfs = []
        for _ in range(reps):
            n = 80
            x = rng.uniform(0, 1, n)
            y = rng.negative_binomial(5, 5 / (5 + math.e), size=n).astype(float)
            block = absorb_sum_to_zero(pspline_block(x, SmoothSpec("pspline", k=8)))
            frame = make_frame(y, np.ones((n, 1)), ["intercept"], [block])
            sm = optimize_smoothing(frame, None, NB)
            edfs.append(sm.edf[block.label])
        edfs = np.sort(edfs)
        floor = 1.0  # nullspace after the sum-to-zero constraint
        assert np.median(edfs) <= floor + 0.25
        assert np.mean(edfs <= floor + 1.0) >= 0.7
        assert edfs[-1] <= 0.8 * (8 - 1)

    def test_unpenalized_edf_equals_column_count(self):
        rng = np.random.default_rng(14)
        n = 70
        x = rng.uniform(0, 1, n)
        y = rng.poisson(4.0, n).astype(float)
        block = absorb_sum_to_zero(pspline_block(x, SmoothSpec("pspline", k=7)))
        frame = make_frame(y, np.ones((n, 1)), ["intercept"], [block])
        fit = pirls(frame, [0.0], 3.0, None, NB)
        edf = effective_dof(frame, [0.0], 3.0, None, NB, fit)
        assert edf["total"] == pytest.approx(frame.ncol, abs=1e-8)


def simulate_ar_panel(rng, n_units=8, T=12, theta_ar=0.5, c_true=0.5,
                      intercept=0.6, phi=8.0):
    """Sequential NB counts whose epidemic term uses log(lagged rate + c)."""
    pop = rng.integers(20000, 60000, n_units).astype(float)
    e = pop / 1e4
    y = np.zeros((n_units, T))
    rate = np.zeros((n_units, T))
    for t in range(T):
        if t == 0:
            mu = np.exp(intercept) * e
        else:
            mu = np.exp(intercept + theta_ar * np.log(rate[:, t - 1] + c_true)) * e
        p = phi / (phi + mu)
        y[:, t] = rng.negative_binomial(phi, p)
        rate[:, t] = 1e4 * y[:, t] / pop
    ys, ars, offs = [], [], []
    for t in range(1, T):
        ys.append(y[:, t])
        ars.append(rate[:, t - 1])
        offs.append(np.log(e))
    return (np.concatenate(ys), np.concatenate(ars), np.concatenate(offs))


class TestProfileC:
    def test_profile_peak_interior_and_curve_recorded(self):
        rng = np.random.default_rng(15)
        y, ar, off = simulate_ar_panel(rng, n_units=10, T=14)
        frame = make_frame(y, np.ones((len(y), 1)), ["intercept"],
                           offset=off, ar=ar)
        prof = profile_c(frame, NB)
        assert 0.0 < prof.c_hat <= 1.0
        curve = dict(prof.points)
        v_hat = max(v for _, v in prof.points)
        assert v_hat >= curve[min(curve)] - 1e-9
        assert len(prof.points) >= 10
        assert prof.se > 0

    def test_no_zero_rates_flatten_profile(self):
        rng = np.random.default_rng(16)
        y, ar, off = simulate_ar_panel(rng, n_units=10, T=14)
        ar_shift = ar + 10.0  # no small rates left: c barely matters
        frame = make_frame(y, np.ones((len(y), 1)), ["intercept"],
                           offset=off, ar=ar_shift)
        calib = optimize_smoothing(frame, 0.5, NB)
        values = []
        for cv in np.linspace(0.05, 1.0, 8):
            fit = pirls(frame, calib.tau, calib.phi, cv, NB)
            values.append(fit.loglik_pen)
        assert max(values) - min(values) < 1.0

    def test_flat_profile_warns_with_infinite_se(self):
        rng = np.random.default_rng(17)
        n = 120
        y = rng.poisson(5.0, n).astype(float)  # independent of the lag
        ar = rng.uniform(5.0, 6.0, n)
        frame = make_frame(y, np.ones((n, 1)), ["intercept"], ar=ar)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            prof = profile_c(frame, NB)
        if math.isinf(prof.se):
            assert any("flat" in str(w.message) for w in caught)
        else:
            assert prof.se > 0.5  # near-flat: enormous uncertainty


class TestFitModel:
    def test_deterministic_refit(self):
        rng = np.random.default_rng(18)
        y, ar, off = simulate_ar_panel(rng)
        frame1 = make_frame(y, np.ones((len(y), 1)), ["intercept"],
                            offset=off, ar=ar)
        frame2 = make_frame(y, np.ones((len(y), 1)), ["intercept"],
                            offset=off, ar=ar)
        fit1 = fit_model(frame1, NB, c=0.5, profile=False)
        fit2 = fit_model(frame2, NB, c=0.5, profile=False)
        assert np.array_equal(fit1.theta, fit2.theta)

    def test_caic_reduces_to_aic_without_penalties(self):
        rng = np.random.default_rng(19)
        n = 60
        x = rng.normal(size=n)
        y = rng.poisson(np.exp(1 + 0.3 * x)).astype(float)
        frame = make_frame(y, np.column_stack([np.ones(n), x]), ["i", "x"])
        fit = fit_model(frame, NB)
        assert fit.edf["total"] == pytest.approx(2.0, abs=1e-6)
        assert caic(fit) == pytest.approx(-2 * fit.loglik + 2 * 3, abs=1e-5)

    def test_serialization_roundtrip(self):
        rng = np.random.default_rng(20)
        y, ar, off = simulate_ar_panel(rng)
        frame = make_frame(y, np.ones((len(y), 1)), ["intercept"],
                           offset=off, ar=ar)
        fit = fit_model(frame, NB, c=0.4, profile=False)
        d = fit.to_dict()
        assert d["coefficients"][0]["name"] == "epidemic_log_lag"
        assert set(d) >= {"coefficients", "tau", "phi", "edf", "loglik",
                          "caic", "converged", "c"}
        assert d["c"]["estimate"] == pytest.approx(0.4)
        import json
        json.dumps(d)

    def test_covariance_symmetric_psd_and_edf_bounded(self):
        rng = np.random.default_rng(21)
        n = 80
        x = rng.uniform(0, 1, n)
        y = rng.poisson(np.exp(1 + np.sin(2 * np.pi * x))).astype(float)
        block = absorb_sum_to_zero(pspline_block(x, SmoothSpec("pspline", k=9)))
        frame = make_frame(y, np.ones((n, 1)), ["intercept"], [block])
        fit = fit_model(frame, NB)
        V = fit.covariance
        assert np.abs(V - V.T).max() < 1e-12
        assert np.linalg.eigvalsh(V).min() > 0
        assert fit.edf["total"] <= frame.ncol + 1e-8

    def test_quasi_dispersion_is_pearson_moment(self):
        rng = np.random.default_rng(22)
        n = 100
        x = rng.normal(size=n)
        mu_true = np.exp(1.2 + 0.5 * x)
        y = rng.negative_binomial(2.0, 2.0 / (2.0 + mu_true)).astype(float)
        frame = make_frame(y, np.column_stack([np.ones(n), x]), ["i", "x"])
        fit = fit_model(frame, QUASI)
        pearson = np.sum((y - fit.mu) ** 2 / fit.mu)
        assert fit.phi == pytest.approx(pearson / (n - fit.edf["total"]), rel=1e-8)

    def test_quasi_matches_nb_point_estimates(self):
        rng = np.random.default_rng(23)
        y, ar, off = simulate_ar_panel(rng, n_units=12, T=14)
        frame = make_frame(y, np.ones((len(y), 1)), ["intercept"],
                           offset=off, ar=ar)
        fit_nb = fit_model(frame, NB, c=0.5, profile=False)
        fit_q = fit_model(frame, QUASI, c=0.5, profile=False)
        pooled = np.sqrt(fit_nb.se() ** 2 + fit_q.se() ** 2)
        assert np.all(np.abs(fit_nb.theta - fit_q.theta) <= 2 * pooled)
