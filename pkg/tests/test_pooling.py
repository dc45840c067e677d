import copy
from types import SimpleNamespace

import numpy as np
import pytest
from scipy import stats

from epimob.basis import SmoothSpec, absorb_sum_to_zero, pspline_block
from epimob.engine import Family, ModelFrame, fit_model
from epimob.pooling import (
    PoolingError,
    average_residuals,
    average_rootograms,
    pool_fits,
    predicted_vs_observed,
    qq_outliers,
    rootogram,
    rq_residuals,
    rubin_pool,
    write_pooled_json,
    write_residuals_csv,
    write_rootogram_csv,
)

NB = Family("negative_binomial")


def nb_fit_stub(mu, phi):
    return SimpleNamespace(mu=np.asarray(mu, dtype=float), phi=float(phi),
                           family_kind="negative_binomial")


class TestRubinPool:
    def test_hand_worked_scalar_example(self):
        pooled = rubin_pool([[0.0], [2.0]], [[[1.0]], [[1.0]]])
        assert pooled.estimate[0] == pytest.approx(1.0)
        assert pooled.between[0, 0] == pytest.approx(2.0)
        assert pooled.within[0, 0] == pytest.approx(1.0)
        assert pooled.total[0, 0] == pytest.approx(4.0)  # 1 + (1 + 1/2) * 2
        assert pooled.se[0] == pytest.approx(2.0)

    def test_identical_fits_have_zero_between(self):
        rng = np.random.default_rng(0)
        theta = rng.normal(0, 1, 5)
        V = np.eye(5) * 0.3
        pooled = rubin_pool([theta] * 4, [V] * 4)
        assert np.allclose(pooled.between, 0.0)
        assert np.allclose(pooled.total, pooled.within)
        assert np.allclose(pooled.within, V)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        ests = [rng.normal(0, 1, 3) for _ in range(6)]
        covs = [np.diag(rng.uniform(0.1, 1, 3)) for _ in range(6)]
        a = rubin_pool(ests, covs)
        order = rng.permutation(6)
        b = rubin_pool([ests[i] for i in order], [covs[i] for i in order])
        assert np.allclose(a.estimate, b.estimate, atol=1e-12)
        assert np.allclose(a.total, b.total, atol=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        K, p = 5, 4
        ests = [rng.normal(0, 1, p) for _ in range(K)]
        covs = []
        for _ in range(K):
            A = rng.normal(0, 1, (p, p))
            covs.append(A @ A.T + np.eye(p))
        pooled = rubin_pool(ests, covs)
        mean = sum(ests) / K
        between = np.zeros((p, p))
        for e in ests:
            d = (e - mean)[:, None]
            between += d @ d.T
        between /= K - 1
        total = sum(covs) / K + (1 + 1 / K) * between
        assert np.allclose(pooled.estimate, mean, atol=1e-12)
        assert np.allclose(pooled.between, between, atol=1e-12)
        assert np.allclose(pooled.total, total, atol=1e-12)
        ev = np.linalg.eigvalsh(pooled.total)
        assert np.all(ev > -1e-10)

    def test_k_below_two_rejected(self):
        with pytest.raises(PoolingError, match="K = 2"):
            rubin_pool([[1.0]], [[[1.0]]])

    def test_name_misalignment_rejected(self):
        with pytest.raises(PoolingError, match="fit 2"):
            rubin_pool([[1.0, 2.0], [1.0, 2.0]],
                       [np.eye(2), np.eye(2)],
                       names=[["a", "b"], ["b", "a"]])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(PoolingError, match="shapes"):
            rubin_pool([[1.0, 2.0], [1.0, 2.0]], [np.eye(2), np.eye(3)])


def quick_ar_fits(n_fits=3, n_units=10, T=8, seed=3):
    """Small AR-panel fits whose c is profiled, for pooling tests."""
    fits = []
    rng = np.random.default_rng(seed)
    for _ in range(n_fits):
        pop = rng.integers(20000, 50000, n_units).astype(float)
        e = pop / 1e4
        y = np.zeros((n_units, T))
        rate = np.zeros((n_units, T))
        for t in range(T):
            mu = np.exp(0.5) * e if t == 0 else \
                np.exp(0.5 + 0.55 * np.log(rate[:, t - 1] + 0.4)) * e
            y[:, t] = rng.negative_binomial(8.0, 8.0 / (8.0 + mu))
            rate[:, t] = 1e4 * y[:, t] / pop
        yy = y[:, 1:].ravel()
        ar = rate[:, :-1].ravel()
        off = np.log(np.repeat(pop, T - 1))
        frame = ModelFrame(y=yy, fixed=np.ones((len(yy), 1)),
                           fixed_names=["intercept"], blocks=[],
                           offset=off - np.log(1e4) * 0, ar_rates=ar)
        fits.append(fit_model(frame, NB))
    return fits


@pytest.fixture(scope="module")
def fits():
    return quick_ar_fits()


class TestPoolFits:
    def test_names_and_c_pooling(self, fits):
        pooled, c_pooled = pool_fits(fits)
        assert pooled.names == fits[0].names
        assert pooled.K == len(fits)
        assert c_pooled is not None
        cs = [f.c_hat for f in fits]
        assert c_pooled.estimate[0] == pytest.approx(np.mean(cs))
        assert c_pooled.se[0] > 0

    def test_fixed_c_mode_requires_shared_c(self, fits):
        with pytest.raises(PoolingError, match="shared fixed c"):
            pool_fits(fits, pool_c=False)

    def test_misaligned_names_rejected(self, fits):
        broken = copy.copy(fits[1])
        broken.names = ["other"] * len(fits[1].names)
        with pytest.raises(PoolingError, match="names"):
            pool_fits([fits[0], broken])


class TestRqResiduals:
    def test_pit_interval_construction(self):
        rng = np.random.default_rng(4)
        mu = rng.uniform(1, 10, 300)
        phi = 5.0
        y = rng.negative_binomial(phi, phi / (phi + mu)).astype(float)
        fit = nb_fit_stub(mu, phi)
        res = rq_residuals(fit, y, seed=11)
        u = stats.norm.cdf(res.residuals)
        hi = stats.nbinom.cdf(y, phi, phi / (phi + mu))
        lo = np.where(y > 0, stats.nbinom.cdf(y - 1, phi, phi / (phi + mu)), 0.0)
        assert np.all(u <= hi + 1e-12)
        assert np.all(u >= lo - 1e-12)

    def test_standard_normal_under_the_model(self):
        rng = np.random.default_rng(5)
        n = 5000
        mu = rng.uniform(0.5, 20, n)
        phi = 3.0
        y = rng.negative_binomial(phi, phi / (phi + mu)).astype(float)
        res = rq_residuals(nb_fit_stub(mu, phi), y, seed=12)
        ks = stats.kstest(res.residuals, "norm")
        assert ks.pvalue > 0.01

    def test_same_seed_identical(self):
        mu = np.full(50, 4.0)
        y = np.arange(50, dtype=float) % 9
        a = rq_residuals(nb_fit_stub(mu, 2.0), y, seed=7)
        b = rq_residuals(nb_fit_stub(mu, 2.0), y, seed=7)
        assert np.array_equal(a.residuals, b.residuals)

    def test_multiple_draws(self):
        mu = np.full(40, 4.0)
        y = np.arange(40, dtype=float) % 7
        sets = rq_residuals(nb_fit_stub(mu, 2.0), y, seed=8, draws=3)
        assert len(sets) == 3
        assert sets[0].draw == 1 and sets[2].draw == 3
        assert not np.array_equal(sets[0].residuals, sets[1].residuals)

    def test_quasi_fit_rejected(self):
        fit = SimpleNamespace(mu=np.ones(5), phi=2.0, family_kind="quasi")
        with pytest.raises(PoolingError, match="negative binomial"):
            rq_residuals(fit, np.ones(5), seed=1)

    def test_outlier_flagging(self):
        rng = np.random.default_rng(9)
        r = rng.normal(0, 1, 500)
        r[3] = 9.0  # far off any normal quantile for n = 500
        from epimob.pooling import ResidualSet
        flags = qq_outliers(ResidualSet(r, seed=0))
        assert flags[3]
        assert flags.mean() < 0.1


class TestRootogram:
    def test_observed_counts_complete(self):
        rng = np.random.default_rng(10)
        mu = rng.uniform(1, 8, 400)
        phi = 4.0
        y = rng.negative_binomial(phi, phi / (phi + mu)).astype(float)
        root = rootogram(nb_fit_stub(mu, phi), y)
        assert root.observed.sum() == len(y)
        assert np.all(root.expected >= 0)

    def test_expected_deficit_is_tail_mass(self):
        rng = np.random.default_rng(11)
        mu = rng.uniform(1, 8, 300)
        phi = 4.0
        y = rng.negative_binomial(phi, phi / (phi + mu)).astype(float)
        m = int(y.max())
        root = rootogram(nb_fit_stub(mu, phi), y, max_count=m)
        tail = np.sum(1.0 - stats.nbinom.cdf(m, phi, phi / (phi + mu)))
        assert len(y) - root.expected.sum() == pytest.approx(tail, abs=1e-8)

    def test_simulation_envelope(self):
        rng = np.random.default_rng(12)
        n = 3000
        mu = rng.uniform(1, 10, n)
        phi = 5.0
        p = phi / (phi + mu)
        y = rng.negative_binomial(phi, p).astype(float)
        m = 40
        fit = nb_fit_stub(mu, phi)
        root = rootogram(fit, y, max_count=m)
        gap = np.abs(root.sqrt_observed - root.sqrt_expected).mean()
        sims = []
        for _ in range(50):
            ys = rng.negative_binomial(phi, p).astype(float)
            rs = rootogram(fit, ys, max_count=m)
            sims.append(np.abs(rs.sqrt_observed - rs.sqrt_expected).mean())
        assert gap <= 2.0 * np.mean(sims)

    def test_averaging_requires_common_grid(self):
        fit = nb_fit_stub(np.full(50, 3.0), 2.0)
        r1 = rootogram(fit, np.full(50, 2.0), max_count=5)
        r2 = rootogram(fit, np.full(50, 2.0), max_count=6)
        with pytest.raises(PoolingError, match="common max_count"):
            average_rootograms([r1, r2])
        r3 = rootogram(fit, np.full(50, 4.0), max_count=5)
        avg = average_rootograms([r1, r3])
        assert np.allclose(avg.observed, (r1.observed + r3.observed) / 2)


class TestPredictedObserved:
    def test_perfect_fit_correlation_one(self):
        y = np.array([0.0, 1, 2, 5, 9, 30])
        fit = SimpleNamespace(mu=y.copy(), phi=1.0,
                              family_kind="negative_binomial")
        po = predicted_vs_observed(fit, y)
        assert po.correlation == pytest.approx(1.0)

    def test_zero_maps_to_zero_on_log_scale(self):
        fit = SimpleNamespace(mu=np.array([0.5]), phi=1.0,
                              family_kind="negative_binomial")
        po = predicted_vs_observed(fit, np.array([0.0]))
        assert po.log_y[0] == 0.0

    def test_strong_signal_correlation(self):
        rng = np.random.default_rng(13)
        n = 2000
        mu = np.exp(rng.uniform(0, 3, n))
        phi = 8.0
        y = rng.negative_binomial(phi, phi / (phi + mu)).astype(float)
        po = predicted_vs_observed(nb_fit_stub(mu, phi), y)
        assert po.correlation > 0.8


class TestAveragingAndExports:
    def test_average_residuals_elementwise(self):
        from epimob.pooling import ResidualSet
        a = ResidualSet(np.array([1.0, 2.0]), seed=0)
        b = ResidualSet(np.array([3.0, 6.0]), seed=0)
        assert np.allclose(average_residuals([a, b]), [2.0, 4.0])
        with pytest.raises(PoolingError, match="lengths"):
            average_residuals([a, ResidualSet(np.ones(3), seed=0)])

    def test_exports(self, tmp_path):
        import json as _json

        pooled = rubin_pool([[0.0, 1.0], [2.0, 3.0]], [np.eye(2)] * 2,
                            names=["a", "b"])
        write_pooled_json(pooled, tmp_path / "pooled.json")
        data = _json.loads((tmp_path / "pooled.json").read_text())
        assert data["K"] == 2
        assert data["coefficients"][0]["name"] == "a"

        fit = nb_fit_stub(np.full(20, 3.0), 2.0)
        y = np.arange(20, dtype=float) % 6
        res = rq_residuals(fit, y, seed=3)
        write_residuals_csv(res, tmp_path / "resid.csv")
        lines = (tmp_path / "resid.csv").read_text().strip().splitlines()
        assert len(lines) == 21
        back = float(lines[1].split(",")[1])
        assert back == res.residuals[0]

        root = rootogram(fit, y)
        write_rootogram_csv(root, tmp_path / "root.csv")
        lines = (tmp_path / "root.csv").read_text().strip().splitlines()
        assert lines[0] == "count,observed,expected"
        assert len(lines) == len(root.values) + 1
