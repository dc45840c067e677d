"""Penalized likelihood estimation for endemic-epidemic count regression.

The mean model is log-linear in an unpenalized fixed-effect part, an
optional autoregressive column log(lagged rate + c), and any number of
penalized smooth or ridge blocks. Coefficients are found by penalized
iteratively reweighted least squares (PIRLS); smoothing parameters and the
negative-binomial dispersion maximize a Laplace-approximate REML
criterion in an outer simplex search; the offset constant c of the
autoregressive term is profiled out on (0, 1].
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import minimize, minimize_scalar
from scipy.special import digamma, gammaln, polygamma

__all__ = [
    "EngineError",
    "Family",
    "ModelFrame",
    "PirlsFit",
    "SmoothingResult",
    "CProfile",
    "FitResult",
    "nb_loglik",
    "pirls",
    "effective_dof",
    "reml_criterion",
    "optimize_smoothing",
    "profile_c",
    "fit_model",
    "caic",
]

PIRLS_TOL = 1e-8
PIRLS_MAX_ITER = 200
OUTER_TOL = 1e-6
OUTER_MAX_ITER = 500
# search box for the outer optimizer: beyond exp(16) both the penalty and
# the NB dispersion sit on their limit plateaus, while gammaln differences
# start losing enough precision to destabilize step-halving
LOG_TAU_CLIP = 16.0
LOG_PHI_CLIP = 16.0


class EngineError(RuntimeError):
    pass


def nb_loglik(y, mu, phi):
    """Negative-binomial log-likelihood with mean mu and Var = mu + mu^2/phi.

    ``phi`` may be a scalar or a per-observation vector.
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if not np.all(np.isfinite(mu)):
        raise EngineError("non-finite mean in log-likelihood evaluation")
    if np.any(mu <= 0) or np.any(phi <= 0):
        raise EngineError("negative-binomial likelihood needs mu > 0 and phi > 0")
    # log1p form keeps the mu-dependent part accurate for large phi, where
    # phi*log(phi/(phi+mu)) would lose the digits step-halving compares
    return float(np.sum(
        gammaln(phi + y) - gammaln(phi) - gammaln(y + 1.0)
        + y * np.log(mu / phi) - (phi + y) * np.log1p(mu / phi)
    ))


def _poisson_loglik(y, mu):
    return float(np.sum(y * np.log(mu) - mu - gammaln(y + 1.0)))


@dataclass
class Family:
    """Response family: full NB likelihood or mean-variance (quasi) moments.

    The gaussian kind (identity link, variance phi) exists to validate the
    REML machinery against exact Gaussian results and is not part of the
    modelling surface. The nb_dispersion kind models the NB dispersion on
    the log scale with the mean vector held fixed in ``fixed``; its linear
    predictor is log sigma with Var = mu + sigma * mu^2, i.e. phi = 1/sigma,
    and the engine's phi argument is ignored.
    """

    kind: str = "negative_binomial"
    fixed: np.ndarray = None  # fixed mean vector for nb_dispersion

    def __post_init__(self):
        if self.kind not in ("negative_binomial", "quasi", "gaussian",
                             "nb_dispersion"):
            raise EngineError(f"unknown family {self.kind!r}")
        if self.kind == "nb_dispersion":
            if self.fixed is None:
                raise EngineError("nb_dispersion needs the fixed mean vector")
            self.fixed = np.asarray(self.fixed, dtype=float)
            if np.any(self.fixed <= 0):
                raise EngineError("fixed means must be positive")

    @property
    def log_link(self):
        return self.kind != "gaussian"

    @property
    def phi_in_outer(self):
        # quasi estimates phi by moments instead of through the criterion;
        # the dispersion model has no free scalar phi at all
        return self.kind not in ("quasi", "nb_dispersion")

    def linkinv(self, eta):
        if self.log_link:
            with np.errstate(over="ignore"):
                return np.exp(eta)
        return eta

    def loglik(self, y, mu, phi):
        if self.kind == "negative_binomial":
            return nb_loglik(y, mu, phi)
        if self.kind == "nb_dispersion":
            return nb_loglik(y, self.fixed, 1.0 / mu)  # mu is sigma here
        if self.kind == "quasi":
            # phi-free working objective; scaling enters the REML criterion
            return _poisson_loglik(y, mu)
        r = y - mu
        return float(-0.5 * np.sum(r * r) / phi
                     - 0.5 * len(y) * math.log(2.0 * math.pi * phi))

    def _dispersion_score_parts(self, y, sigma):
        # derivative of the NB log-likelihood in phi at phi = 1/sigma
        ph = 1.0 / sigma
        mu = self.fixed
        g = (digamma(ph + y) - digamma(ph) + np.log(ph) + 1.0
             - np.log(ph + mu) - (ph + y) / (ph + mu))
        gp = (polygamma(1, ph + y) - polygamma(1, ph) + 1.0 / ph
              - 2.0 / (ph + mu) + (ph + y) / (ph + mu) ** 2)
        return ph, g, gp

    def score_eta(self, y, mu, phi):
        if self.kind == "negative_binomial":
            return phi * (y - mu) / (phi + mu)
        if self.kind == "nb_dispersion":
            ph, g, _ = self._dispersion_score_parts(y, mu)
            return -ph * g
        if self.kind == "quasi":
            return y - mu
        return (y - mu) / phi

    def weight(self, y, mu, phi):
        if self.kind == "negative_binomial":
            return mu * phi / (phi + mu)
        if self.kind == "nb_dispersion":
            # negative observed second derivative in log sigma, floored to
            # keep the working Hessian positive definite between iterates
            ph, g, gp = self._dispersion_score_parts(y, mu)
            return np.maximum(-(ph * g + ph * ph * gp), 1e-10)
        if self.kind == "quasi":
            return mu
        return np.full_like(mu, 1.0 / phi)


@dataclass
class ModelFrame:
    """Response, offset, fixed columns and penalized blocks for one fit.

    ``ar_rates`` holds the lagged incidence rate; when present, the design
    gains a leading column log(ar_rates + c) whose coefficient is the
    autoregressive strength.
    """

    y: np.ndarray
    fixed: np.ndarray
    fixed_names: list
    blocks: list
    offset: np.ndarray = None
    ar_rates: np.ndarray = None
    ar_name: str = "epidemic_log_lag"

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.fixed = np.asarray(self.fixed, dtype=float)
        if self.fixed.ndim != 2 or self.fixed.shape[0] != len(self.y):
            raise EngineError("fixed design must be n x p")
        if len(self.fixed_names) != self.fixed.shape[1]:
            raise EngineError("fixed_names length does not match fixed columns")
        if self.offset is None:
            self.offset = np.zeros(len(self.y))
        self.offset = np.asarray(self.offset, dtype=float)
        if self.ar_rates is not None:
            self.ar_rates = np.asarray(self.ar_rates, dtype=float)
            if np.any(self.ar_rates < 0) or not np.all(np.isfinite(self.ar_rates)):
                raise EngineError("lagged rates must be finite and nonnegative")
        for arr in (self.y, self.fixed, self.offset):
            if not np.all(np.isfinite(arr)):
                raise EngineError("frame contains non-finite values")
        self._static = None
        self._design_cache = None
        self._block_eigs = None

    @property
    def has_ar(self):
        return self.ar_rates is not None

    @property
    def ncol(self):
        return (1 if self.has_ar else 0) + self.fixed.shape[1] \
            + sum(b.ncol for b in self.blocks)

    def column_names(self):
        names = ([self.ar_name] if self.has_ar else []) + list(self.fixed_names)
        for b in self.blocks:
            names.extend(f"{b.label}[{j}]" for j in range(b.ncol))
        return names

    def term_slices(self):
        out = {}
        pos = 0
        if self.has_ar:
            out[self.ar_name] = slice(0, 1)
            pos = 1
        out["fixed"] = slice(pos, pos + self.fixed.shape[1])
        pos += self.fixed.shape[1]
        for b in self.blocks:
            out[b.label] = slice(pos, pos + b.ncol)
            pos += b.ncol
        return out

    def design(self, c=None):
        if self._static is None:
            self._static = np.column_stack([self.fixed] + [b.design for b in self.blocks]) \
                if self.blocks else self.fixed
        if not self.has_ar:
            return self._static
        if c is None:
            raise EngineError("frame has an autoregressive term but no c was given")
        if not (0.0 < c <= 1.0):
            raise EngineError(f"autoregressive offset constant c={c} outside (0, 1]")
        if self._design_cache is not None and self._design_cache[0] == c:
            return self._design_cache[1]
        X = np.column_stack([np.log(self.ar_rates + c), self._static])
        self._design_cache = (c, X)
        return X

    def penalty_matrix(self, tau):
        tau = np.asarray(tau, dtype=float)
        if len(tau) != len(self.blocks):
            raise EngineError(f"expected {len(self.blocks)} smoothing parameters")
        if np.any(tau < 0):
            raise EngineError("smoothing parameters must be nonnegative")
        p = self.ncol
        S = np.zeros((p, p))
        slices = self.term_slices()
        for b, t in zip(self.blocks, tau):
            sl = slices[b.label]
            S[sl, sl] = t * b.penalty
        return S

    def penalty_eigs(self):
        """Per-block positive-eigenvalue count and log generalized determinant."""
        if self._block_eigs is None:
            info = []
            for b in self.blocks:
                ev = np.linalg.eigvalsh(b.penalty)
                pos = ev[ev > 1e-10 * max(ev.max(), 1e-300)]
                info.append((len(pos), float(np.sum(np.log(pos)))))
            self._block_eigs = info
        return self._block_eigs

    @property
    def nullspace_total(self):
        """Columns not reached by any penalty (fixed + block null spaces)."""
        n_fixed = (1 if self.has_ar else 0) + self.fixed.shape[1]
        return n_fixed + sum(b.nullspace_dim for b in self.blocks)


@dataclass
class PirlsFit:
    theta: np.ndarray
    eta: np.ndarray
    mu: np.ndarray
    loglik: float
    loglik_pen: float
    grad_norm: float
    iterations: int
    trace: list = field(default_factory=list)  # accepted penalized log-likelihoods


def _initial_theta(X, S, y, offset, family):
    target = np.log(np.maximum(y, 0.0) + 0.5) - offset if family.log_link else y - offset
    A = X.T @ X + S + 1e-8 * np.eye(X.shape[1])
    try:
        return np.linalg.solve(A, X.T @ target)
    except LinAlgError:
        return np.zeros(X.shape[1])


def pirls(frame, tau, phi, c, family, theta0=None,
          max_iter=PIRLS_MAX_ITER, tol=PIRLS_TOL):
    """Maximize the penalized log-likelihood in the coefficients.

    Fisher-scoring steps (equivalent to iterated penalized weighted least
    squares) with step-halving; converges when the gradient sup-norm falls
    below tol * (1 + |penalized log-likelihood|).
    """
    X = frame.design(c)
    S = frame.penalty_matrix(tau)
    y, offset = frame.y, frame.offset
    theta = _initial_theta(X, S, y, offset, family) if theta0 is None \
        else np.asarray(theta0, dtype=float).copy()

    def evaluate(th):
        eta = X @ th + offset
        mu = family.linkinv(eta)
        if family.log_link and (np.any(mu <= 0) or not np.all(np.isfinite(mu))):
            return eta, mu, -np.inf
        try:
            ll = family.loglik(y, mu, phi)
        except EngineError:
            return eta, mu, -np.inf
        return eta, mu, ll - 0.5 * th @ S @ th

    eta, mu, llp = evaluate(theta)
    if not np.isfinite(llp):
        theta = np.zeros_like(theta)
        eta, mu, llp = evaluate(theta)
        if not np.isfinite(llp):
            raise EngineError("could not find a finite starting point")
    grad_norm = np.inf
    trace = [float(llp)]
    for it in range(max_iter):
        g = X.T @ family.score_eta(y, mu, phi) - S @ theta
        grad_norm = np.abs(g).max()
        ll = llp + 0.5 * theta @ S @ theta
        if grad_norm < tol * (1.0 + abs(llp)):
            return PirlsFit(theta, eta, mu, float(ll), float(llp),
                            float(grad_norm), it, trace)
        w = family.weight(y, mu, phi)
        H = X.T @ (X * w[:, None]) + S
        try:
            chol = cho_factor(H, lower=True)
        except LinAlgError:
            raise EngineError(
                "penalized Hessian is not positive definite; the model is "
                "not identifiable at the current smoothing parameters"
            )
        step = cho_solve(chol, g)
        scale = 1.0
        for _ in range(40):
            cand = theta + scale * step
            eta_c, mu_c, llp_c = evaluate(cand)
            if llp_c >= llp - 1e-12 * (1.0 + abs(llp)):
                theta, eta, mu, llp = cand, eta_c, mu_c, llp_c
                trace.append(float(llp))
                break
            scale *= 0.5
        else:
            raise EngineError(
                f"step-halving failed at iteration {it}; gradient norm {grad_norm:.3e}"
            )
        if scale == 1.0 and np.abs(step).max() <= 1e-9 * (1.0 + np.abs(theta).max()):
            # numerical floor: a full Newton step no longer moves the
            # estimate, so the gradient cannot be driven further down
            ll = llp + 0.5 * theta @ S @ theta
            return PirlsFit(theta, eta, mu, float(ll), float(llp),
                            float(grad_norm), it + 1, trace)
    raise EngineError(
        f"PIRLS did not converge in {max_iter} iterations; "
        f"last gradient sup-norm {grad_norm:.3e}"
    )


def _pearson_phi(y, mu, edf_total):
    n = len(y)
    dof = max(n - edf_total, 1.0)
    return float(np.sum((y - mu) ** 2 / mu) / dof)


def _hessian_parts(frame, tau, phi, c, family, fit):
    X = frame.design(c)
    w = family.weight(frame.y, fit.mu, phi)
    XtWX = X.T @ (X * w[:, None])
    H = XtWX + frame.penalty_matrix(tau)
    return X, XtWX, H


def effective_dof(frame, tau, phi, c, family, fit):
    """Per-term and total effective degrees of freedom tr(H^-1 X'WX)."""
    _, XtWX, H = _hessian_parts(frame, tau, phi, c, family, fit)
    try:
        chol = cho_factor(H, lower=True)
    except LinAlgError:
        raise EngineError("penalized Hessian is not positive definite")
    F = cho_solve(chol, XtWX)
    diag = np.diag(F)
    out = {label: float(diag[sl].sum()) for label, sl in frame.term_slices().items()}
    out["total"] = float(diag.sum())
    return out


def reml_criterion(frame, tau, phi, c, family, theta0=None):
    """Laplace-approximate restricted likelihood, to be maximized over tau, phi.

    Value: penalized log-likelihood at the inner optimum, plus half the log
    generalized determinant of the weighted penalty, minus half the log
    determinant of the penalized Hessian, plus (M_p/2) log(2 pi) for the
    M_p unpenalized directions. For the quasi family the Poisson kernel is
    scaled by the Pearson dispersion estimate.
    """
    value, _ = _reml_criterion(frame, tau, phi, c, family, theta0=theta0)
    return value


def _reml_criterion(frame, tau, phi, c, family, theta0=None):
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0):
        raise EngineError("the restricted criterion needs strictly positive tau")
    fit = pirls(frame, tau, phi, c, family, theta0=theta0)
    _, XtWX, H = _hessian_parts(frame, tau, phi, c, family, fit)
    try:
        chol = cho_factor(H, lower=True)
    except LinAlgError:
        raise EngineError("indefinite penalized Hessian in criterion evaluation")
    logdet_H = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
    logdet_S = sum(rank * math.log(t) + logdet
                   for (rank, logdet), t in zip(frame.penalty_eigs(), tau))
    M_p = frame.nullspace_total
    if family.kind == "quasi":
        F = cho_solve(chol, XtWX)
        edf_total = float(np.trace(F))
        phi_q = _pearson_phi(frame.y, fit.mu, edf_total)
        n = len(frame.y)
        value = (fit.loglik_pen / phi_q
                 - 0.5 * (n - M_p) * math.log(phi_q)
                 + 0.5 * logdet_S - 0.5 * logdet_H
                 + 0.5 * M_p * math.log(2.0 * math.pi))
        return float(value), fit
    value = (fit.loglik_pen + 0.5 * logdet_S - 0.5 * logdet_H
             + 0.5 * M_p * math.log(2.0 * math.pi))
    return float(value), fit


@dataclass
class SmoothingResult:
    tau: np.ndarray
    phi: float
    fit: PirlsFit
    criterion: float
    edf: dict
    converged: bool
    n_evaluations: int = 0


def _initial_phi(frame, family):
    y = frame.y
    if family.kind == "gaussian":
        return float(np.var(y) + 1e-8)
    m, v = float(np.mean(y)), float(np.var(y))
    if v > m > 0:
        return max(m * m / (v - m), 0.05)
    return 10.0


def optimize_smoothing(frame, c, family, phi0=None, n_starts=3,
                       phi_fixed=None, theta0=None, start=None):
    """Maximize the restricted criterion over log smoothing parameters.

    Derivative-free simplex search with multiple starting points; the
    dispersion of likelihood-based families is optimized jointly on the
    log scale, the quasi dispersion by moments inside the criterion. A
    known dispersion (scalar or per observation) can be pinned with
    ``phi_fixed``; ``start`` warm-starts the search at given log tau
    values (dropping the additional spread-out starting points).
    """
    J = len(frame.blocks)
    with_phi = family.phi_in_outer and phi_fixed is None
    pinned = phi_fixed if phi_fixed is not None else 1.0
    phi_start = math.log(phi0) if phi0 is not None else \
        (math.log(_initial_phi(frame, family)) if with_phi else 0.0)
    state = {"theta": theta0, "evals": 0}

    def objective(params):
        tau = np.exp(np.clip(params[:J], -LOG_TAU_CLIP, LOG_TAU_CLIP))
        phi = math.exp(np.clip(params[J], -LOG_PHI_CLIP, LOG_PHI_CLIP)) \
            if with_phi else pinned
        state["evals"] += 1
        try:
            value, fit = _reml_criterion(frame, tau, phi, c, family,
                                         theta0=state["theta"])
        except EngineError:
            return 1e10
        state["theta"] = fit.theta
        return -value

    dim = J + (1 if with_phi else 0)
    if dim == 0:
        value, fit = _reml_criterion(frame, np.empty(0), pinned, c, family,
                                     theta0=theta0)
        edf = effective_dof(frame, np.empty(0), pinned, c, family, fit)
        phi = _pearson_phi(frame.y, fit.mu, edf["total"]) \
            if family.kind == "quasi" else pinned
        return SmoothingResult(tau=np.empty(0), phi=phi, fit=fit, criterion=value,
                               edf=edf, converged=True, n_evaluations=1)

    if start is not None:
        s = np.empty(dim)
        s[:J] = np.asarray(start, dtype=float)[:J]
        if with_phi:
            s[J] = phi_start
        starts = [s]
    else:
        starts = []
        for base in (0.0, 3.0, -3.0)[:max(n_starts, 1)]:
            s = np.full(dim, base)
            if with_phi:
                s[J] = phi_start
            starts.append(s)

    results = []
    for s in starts:
        # function tolerance relative to the criterion scale: restricted
        # likelihoods are O(n) and flat tau directions otherwise keep the
        # simplex crawling until the evaluation budget is exhausted
        f0 = objective(s)
        scale = 1.0 + (abs(f0) if f0 < 1e10 else 0.0)
        res = minimize(objective, s, method="Nelder-Mead",
                       options={"xatol": 1e-3, "fatol": OUTER_TOL * scale,
                                "maxiter": OUTER_MAX_ITER * dim,
                                "maxfev": OUTER_MAX_ITER * dim})
        results.append(res)
    usable = [r for r in results
              if r.success and np.isfinite(r.fun) and r.fun < 1e10]
    if not usable:
        raise EngineError("smoothing optimization did not converge: "
                          + "; ".join(str(r.message) for r in results))
    best = min(usable, key=lambda r: r.fun)
    tau = np.exp(np.clip(best.x[:J], -LOG_TAU_CLIP, LOG_TAU_CLIP))
    phi = math.exp(np.clip(best.x[J], -LOG_PHI_CLIP, LOG_PHI_CLIP)) \
        if with_phi else pinned
    value, fit = _reml_criterion(frame, tau, phi, c, family, theta0=state["theta"])
    edf = effective_dof(frame, tau, phi, c, family, fit)
    if family.kind == "quasi":
        phi = _pearson_phi(frame.y, fit.mu, edf["total"])
    return SmoothingResult(tau=tau, phi=phi, fit=fit, criterion=value, edf=edf,
                           converged=bool(best.success),
                           n_evaluations=state["evals"])


@dataclass
class CProfile:
    c_hat: float
    se: float
    points: list  # (c, profile value) in evaluation order
    tau: np.ndarray
    phi: float

    @property
    def curve(self):
        return sorted(self.points)


def _profile_value(frame, tau, phi0, cv, family, theta0, cycles=3):
    """Inner maximization over theta (and phi) at fixed c and tau."""
    phi = phi0
    theta = theta0
    fit = None
    for _ in range(cycles):
        fit = pirls(frame, tau, phi, cv, family, theta0=theta)
        theta = fit.theta
        if family.kind == "negative_binomial":
            res = minimize_scalar(
                lambda lp: -nb_loglik(frame.y, fit.mu, math.exp(lp)),
                bounds=(-8.0, 14.0), method="bounded",
                options={"xatol": 1e-8})
            phi = math.exp(res.x)
        else:
            break
    return float(fit.loglik_pen), theta, phi


def profile_c(frame, family, lower=1e-6, upper=1.0, tol=1e-3,
              reoptimize_tau=False, calibration_c=0.5):
    """Profile likelihood for the autoregressive offset constant on (0, 1].

    Smoothing parameters are calibrated once by REML at ``calibration_c``
    and held fixed along the profile (set ``reoptimize_tau`` to redo the
    full outer optimization at every evaluation); coefficients and the NB
    dispersion are re-maximized at each c. Golden-section search to the
    requested tolerance, standard error from the numerical curvature.
    """
    if not frame.has_ar:
        raise EngineError("profiling c requires an autoregressive term")
    calib = optimize_smoothing(frame, calibration_c, family)
    tau, phi0 = calib.tau, calib.phi
    points = []
    warm = {"theta": calib.fit.theta, "phi": phi0}

    def value_at(cv):
        if reoptimize_tau:
            sm = optimize_smoothing(frame, cv, family, phi0=warm["phi"])
            v = sm.fit.loglik_pen
            warm["theta"], warm["phi"] = sm.fit.theta, sm.phi
        else:
            v, theta, phi = _profile_value(frame, tau, warm["phi"], cv, family,
                                           warm["theta"])
            warm["theta"], warm["phi"] = theta, phi
        points.append((float(cv), v))
        return v

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lower, upper
    x1 = b - invphi * (b - a)
    x2 = a + invphi * (b - a)
    f1, f2 = value_at(x1), value_at(x2)
    while b - a > tol:
        if f1 >= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - invphi * (b - a)
            f1 = value_at(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + invphi * (b - a)
            f2 = value_at(x2)
    c_hat = x1 if f1 >= f2 else x2
    f_hat = max(f1, f2)

    h = max(tol, 0.01)
    left = max(c_hat - h, lower)
    right = min(c_hat + h, upper)
    if right - c_hat < h:  # shifted one-sided stencil at the boundary
        left, mid, right = c_hat - 2 * h, c_hat - h, c_hat
        f_mid = value_at(mid)
        curv = -(value_at(left) - 2.0 * f_mid + f_hat) / (h * h)
    elif c_hat - left < h:
        mid, right2 = c_hat + h, c_hat + 2 * h
        f_mid = value_at(mid)
        curv = -(f_hat - 2.0 * f_mid + value_at(right2)) / (h * h)
    else:
        curv = -(value_at(left) - 2.0 * f_hat + value_at(right)) / (h * h)
    if curv < 1e-8:
        warnings.warn("profile likelihood for c is flat; its standard error "
                      "is not identified", RuntimeWarning)
        se = math.inf
    else:
        se = 1.0 / math.sqrt(curv)
    return CProfile(c_hat=float(c_hat), se=float(se), points=points,
                    tau=tau, phi=warm["phi"])


@dataclass
class FitResult:
    theta: np.ndarray
    names: list
    covariance: np.ndarray
    tau: dict
    phi: float
    c_hat: float
    c_se: float
    edf: dict
    loglik: float
    loglik_pen: float
    criterion: float
    converged: bool
    mu: np.ndarray
    eta: np.ndarray
    family_kind: str
    profile_points: list = field(default_factory=list)
    term_slices: dict = field(default_factory=dict)

    def se(self):
        return np.sqrt(np.diag(self.covariance))

    def coefficient_table(self):
        ses = self.se()
        return [{"name": n, "estimate": float(t), "se": float(s)}
                for n, t, s in zip(self.names, self.theta, ses)]

    def to_dict(self):
        out = {
            "family": self.family_kind,
            "coefficients": self.coefficient_table(),
            "tau": {k: float(v) for k, v in self.tau.items()},
            "phi": float(self.phi),
            "edf": {k: float(v) for k, v in self.edf.items()},
            "loglik": float(self.loglik),
            "caic": caic(self),
            "converged": bool(self.converged),
        }
        if self.c_hat is not None:
            out["c"] = {"estimate": float(self.c_hat),
                        "se": float(self.c_se) if self.c_se is not None else None}
        return out


def fit_model(frame, family, c=None, profile=True, reoptimize_tau=False):
    """Full two-stage fit: profile c, then REML smoothing at the fixed c.

    When the frame has no autoregressive term (or ``c`` is supplied), the
    profiling stage is skipped.
    """
    prof = None
    if frame.has_ar and c is None and profile:
        prof = profile_c(frame, family, reoptimize_tau=reoptimize_tau)
        c = prof.c_hat
    sm = optimize_smoothing(frame, c if frame.has_ar else None, family)
    X, XtWX, H = _hessian_parts(frame, sm.tau, sm.phi, c if frame.has_ar else None,
                                family, sm.fit)
    try:
        chol = cho_factor(H, lower=True)
    except LinAlgError:
        raise EngineError("penalized Hessian singular at the optimum")
    V = cho_solve(chol, np.eye(H.shape[0]))
    V = 0.5 * (V + V.T)
    if family.kind == "quasi":
        V = V * sm.phi
    tau_named = {b.label: float(t) for b, t in zip(frame.blocks, sm.tau)}
    loglik = sm.fit.loglik
    return FitResult(
        theta=sm.fit.theta, names=frame.column_names(), covariance=V,
        tau=tau_named, phi=sm.phi,
        c_hat=(float(c) if frame.has_ar and c is not None else None),
        c_se=(prof.se if prof is not None else None),
        edf=sm.edf, loglik=loglik, loglik_pen=sm.fit.loglik_pen,
        criterion=sm.criterion, converged=sm.converged,
        mu=sm.fit.mu, eta=sm.fit.eta, family_kind=family.kind,
        profile_points=(prof.points if prof is not None else []),
        term_slices=frame.term_slices(),
    )


def caic(fit: FitResult) -> float:
    """Conditional AIC: -2 loglik + 2 (total edf + 1 for the dispersion)."""
    return float(-2.0 * fit.loglik + 2.0 * (fit.edf["total"] + 1.0))
