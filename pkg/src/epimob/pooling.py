"""Pooling of per-imputation fits and count-model diagnostics.

Rubin's rules combine the K coefficient vectors and covariance matrices
from the imputed datasets into one estimate whose variance carries both
the within-fit and the between-imputation spread. Diagnostics cover
randomized quantile residuals, rootograms on the square-root scale, and
observed-versus-predicted summaries, each computable per imputation and
averaged elementwise across imputations.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats


class PoolingError(ValueError):
    pass


@dataclass
class PooledEstimate:
    """Rubin-pooled coefficients with within/between variance split."""

    estimate: np.ndarray
    within: np.ndarray
    between: np.ndarray
    total: np.ndarray
    se: np.ndarray
    K: int
    names: list = field(default_factory=list)

    def table(self):
        return [{"name": n, "estimate": float(t), "se": float(s)}
                for n, t, s in zip(self.names, self.estimate, self.se)]


def rubin_pool(estimates, covariances, names=None):
    """Combine K estimates: mean, within-variance mean, between-variance
    with divisor K - 1, total = within + (1 + 1/K) * between."""
    K = len(estimates)
    if K < 2:
        raise PoolingError("pooling needs at least K = 2 fits")
    if len(covariances) != K:
        raise PoolingError("one covariance per estimate is required")
    if names is not None and names and isinstance(names[0], (list, tuple)):
        first = list(names[0])
        for k, nm in enumerate(names[1:], start=2):
            if list(nm) != first:
                raise PoolingError(
                    f"coefficient names of fit {k} do not match fit 1")
        names = first
    est = np.column_stack([np.atleast_1d(np.asarray(e, dtype=float))
                           for e in estimates])
    p = est.shape[0]
    covs = [np.atleast_2d(np.asarray(v, dtype=float)) for v in covariances]
    if any(v.shape != (p, p) for v in covs):
        raise PoolingError("covariance shapes do not match the estimates")
    pooled = est.mean(axis=1)
    dev = est - pooled[:, None]
    between = dev @ dev.T / (K - 1)
    within = sum(covs) / K
    total = within + (1.0 + 1.0 / K) * between
    total = 0.5 * (total + total.T)
    return PooledEstimate(estimate=pooled, within=within, between=between,
                          total=total, se=np.sqrt(np.diag(total)), K=K,
                          names=list(names) if names is not None else [])


def pool_fits(fits, pool_c=True):
    """Pool engine fits; returns (coefficients, c) pooled estimates.

    The autoregressive offset constant c is pooled like any coefficient
    when every fit profiled it (the default); with ``pool_c=False`` the
    fits must share one fixed c, reported with no variance.
    """
    if len(fits) < 2:
        raise PoolingError("pooling needs at least K = 2 fits")
    pooled = rubin_pool([f.theta for f in fits],
                        [f.covariance for f in fits],
                        names=[f.names for f in fits])
    c_pooled = None
    if any(f.c_hat is not None for f in fits):
        cs = [f.c_hat for f in fits]
        if any(c is None for c in cs):
            raise PoolingError("some fits have no c estimate")
        if pool_c:
            ses = [f.c_se for f in fits]
            if any(s is None or not np.isfinite(s) for s in ses):
                raise PoolingError(
                    "c cannot be pooled without per-fit standard errors")
            c_pooled = rubin_pool([[c] for c in cs],
                                  [[[s ** 2]] for s in ses], names=["c"])
        else:
            if max(cs) - min(cs) > 1e-12:
                raise PoolingError(
                    "pool_c=False expects one shared fixed c across fits")
            c_pooled = PooledEstimate(
                estimate=np.array([cs[0]]), within=np.zeros((1, 1)),
                between=np.zeros((1, 1)), total=np.zeros((1, 1)),
                se=np.array([0.0]), K=len(fits), names=["c"])
    return pooled, c_pooled


def _nb_cdf(y, mu, phi):
    return stats.nbinom.cdf(y, phi, phi / (phi + mu))


@dataclass
class ResidualSet:
    """Randomized quantile residuals for one draw."""

    residuals: np.ndarray
    seed: int
    draw: int = 1


def rq_residuals(fit, y, seed, draws=1):
    """Normal quantile transform of randomized PIT values.

    For each observation, u is uniform on (F(y-1), F(y)] under the
    fitted negative binomial and the residual is the standard normal
    quantile of u. Returns one ResidualSet, or a list when draws > 1.
    """
    if fit.family_kind != "negative_binomial":
        raise PoolingError("randomized quantile residuals need the negative "
                           "binomial family (quasi fits have no likelihood)")
    y = np.asarray(y, dtype=float)
    mu, phi = np.asarray(fit.mu, dtype=float), float(fit.phi)
    hi = _nb_cdf(y, mu, phi)
    lo = np.where(y > 0, _nb_cdf(y - 1, mu, phi), 0.0)
    rng = np.random.default_rng(seed)
    out = []
    for k in range(1, draws + 1):
        u = hi - rng.uniform(size=len(y)) * (hi - lo)
        u = np.clip(u, 1e-300, 1.0 - 1e-16)
        out.append(ResidualSet(stats.norm.ppf(u), seed=seed, draw=k))
    return out[0] if draws == 1 else out


def qq_outliers(residual_set, threshold=1.0):
    """Flag residuals farther than the threshold from their normal quantile."""
    r = residual_set.residuals
    n = len(r)
    ranks = np.empty(n, dtype=int)
    ranks[np.argsort(r)] = np.arange(1, n + 1)
    theoretical = stats.norm.ppf((ranks - 0.5) / n)
    return np.abs(r - theoretical) > threshold


@dataclass
class Rootogram:
    """Observed and expected count frequencies on the square-root scale."""

    values: np.ndarray
    observed: np.ndarray
    expected: np.ndarray

    @property
    def sqrt_observed(self):
        return np.sqrt(self.observed)

    @property
    def sqrt_expected(self):
        return np.sqrt(self.expected)


def rootogram(fit, y, max_count=None):
    """Expected frequency at v is the fitted pmf mass summed over rows."""
    if fit.family_kind != "negative_binomial":
        raise PoolingError("the rootogram needs the negative binomial family")
    y = np.asarray(y, dtype=float)
    mu, phi = np.asarray(fit.mu, dtype=float), float(fit.phi)
    m = int(y.max()) if max_count is None else int(max_count)
    values = np.arange(m + 1)
    observed = np.bincount(y.astype(int)[y <= m], minlength=m + 1).astype(float)
    p = phi / (phi + mu)
    expected = stats.nbinom.pmf(values[:, None], phi, p[None, :]).sum(axis=1)
    return Rootogram(values=values, observed=observed, expected=expected)


@dataclass
class PredictedObserved:
    """Pairs (y, mu) with their log(x + 1) transforms and correlation."""

    y: np.ndarray
    mu: np.ndarray
    log_y: np.ndarray
    log_mu: np.ndarray
    correlation: float


def predicted_vs_observed(fit, y):
    y = np.asarray(y, dtype=float)
    mu = np.asarray(fit.mu, dtype=float)
    log_y, log_mu = np.log1p(y), np.log1p(mu)
    if np.ptp(log_y) == 0 or np.ptp(log_mu) == 0:
        corr = 1.0 if np.allclose(log_y, log_mu) else 0.0
    else:
        corr = float(np.corrcoef(log_y, log_mu)[0, 1])
    return PredictedObserved(y=y, mu=mu, log_y=log_y, log_mu=log_mu,
                             correlation=corr)


def average_residuals(sets):
    """Elementwise mean residual across imputations."""
    lengths = {len(s.residuals) for s in sets}
    if len(lengths) != 1:
        raise PoolingError("residual sets have different lengths")
    return np.mean([s.residuals for s in sets], axis=0)


def average_rootograms(roots):
    """Elementwise mean of the observed and expected series."""
    grids = {tuple(r.values) for r in roots}
    if len(grids) != 1:
        raise PoolingError("rootograms were built on different count grids; "
                           "pass a common max_count")
    return Rootogram(values=roots[0].values.copy(),
                     observed=np.mean([r.observed for r in roots], axis=0),
                     expected=np.mean([r.expected for r in roots], axis=0))


def write_pooled_json(pooled, path, c_pooled=None):
    out = {"K": pooled.K, "coefficients": pooled.table()}
    if c_pooled is not None:
        out["c"] = c_pooled.table()[0]
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2)


def write_residuals_csv(residual_set, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "residual", "draw"])
        for i, r in enumerate(residual_set.residuals):
            w.writerow([i, repr(float(r)), residual_set.draw])


def write_rootogram_csv(root, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["count", "observed", "expected"])
        for v, o, e in zip(root.values, root.observed, root.expected):
            w.writerow([int(v), repr(float(o)), repr(float(e))])
