"""Reporting-delay model and multiple imputation of missing onset dates.

The delay between symptom onset and report follows a negative binomial
whose mean and dispersion both carry regression structure: log mu and
log sigma share one covariate layout (group dummies, weekend flag,
state dummies, a smooth trend in the report date and a district ridge),
with Var(D) = mu + sigma * mu^2. The model is fitted on complete cases
by backfitting the two predictors; missing onsets are then filled by
sampling delays, K times, to give K partially imputed datasets.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace
from datetime import timedelta

import numpy as np

from .basis import SmoothSpec, absorb_sum_to_zero, pspline_block, ridge_block
from .engine import Family, ModelFrame, effective_dof, nb_loglik, optimize_smoothing
from .panel import aggregate_panel, compute_rates

log = logging.getLogger(__name__)

BACKFIT_TOL = 1e-6
BACKFIT_MAX_CYCLES = 100


class ImputationError(RuntimeError):
    pass


@dataclass
class DelayModel:
    """Fitted location-scale delay model; both predictors share one layout."""

    fixed_names: list
    blocks: list  # trend smooth (when present) and district ridge
    theta_mu: np.ndarray
    theta_sigma: np.ndarray
    cov_mu: np.ndarray
    cov_sigma: np.ndarray
    tau_mu: np.ndarray
    tau_sigma: np.ndarray
    state_levels: list
    district_levels: list
    day_origin: object  # date whose trend coordinate is 0
    loglik: float
    cycles: int
    edf_mu: dict
    edf_sigma: dict

    def se_mu(self):
        return np.sqrt(np.diag(self.cov_mu))

    def se_sigma(self):
        return np.sqrt(np.diag(self.cov_sigma))


def _day_numbers(cases, origin):
    return np.array([(c.report_date - origin).days for c in cases], dtype=float)


def _fixed_rows(cases, state_levels):
    """Intercept, group dummies, weekend flag and state dummies."""
    n = len(cases)
    age = np.array([c.group.age_indicator for c in cases])
    gen = np.array([c.group.gender_indicator for c in cases])
    weekend = np.array([float(c.weekend_flag) for c in cases])
    cols = [np.ones(n), age, gen, age * gen, weekend]
    names = ["intercept", "age_36_59", "gender_male", "age_36_59_male", "weekend"]
    for s in state_levels[1:]:
        cols.append(np.array([float(c.state_id == s) for c in cases]))
        names.append(f"state[{s}]")
    return np.column_stack(cols), names


def _predictor_rows(model, cases, warn_unseen=True):
    """Design rows for new cases in the fitted parameterization."""
    unseen_states = sorted({c.state_id for c in cases} - set(model.state_levels))
    if unseen_states:
        raise ImputationError(f"unknown state ids {unseen_states}; refit the model")
    fixed, _ = _fixed_rows(cases, model.state_levels)
    t = _day_numbers(cases, model.day_origin)
    if len(model.blocks) == 2:
        trend, ridge = model.blocks
        parts = [fixed, trend.rows(t)]
    else:
        (ridge,) = model.blocks
        parts = [fixed]

    known = set(model.district_levels)
    rows = np.zeros((len(cases), ridge.ncol))
    index = {d: j for j, d in enumerate(ridge.levels)}
    unseen = set()
    for i, c in enumerate(cases):
        if c.district_id in known:
            rows[i, index[c.district_id]] = 1.0
        else:
            unseen.add(c.district_id)
    if unseen and warn_unseen:
        warnings.warn(
            f"districts {sorted(unseen)} were not in the training data; "
            "their random effect is set to zero", stacklevel=2)
    parts.append(rows)
    return np.column_stack(parts)


def predict_moments(model, cases):
    """Fitted (mu, sigma) for each case."""
    X = _predictor_rows(model, cases)
    mu = np.exp(X @ model.theta_mu)
    sigma = np.exp(X @ model.theta_sigma)
    return mu, sigma


def fit_delay_model(cases, trend_spec=None, max_cycles=BACKFIT_MAX_CYCLES,
                    tol=BACKFIT_TOL):
    """Fit the delay model on complete cases by backfitting.

    Alternates a mean step (negative binomial fit with the dispersion
    vector pinned) and a dispersion step (log-sigma fit with the mean
    vector pinned), each with restricted-likelihood smoothing selection,
    until the joint log-likelihood stabilizes.
    """
    complete = [c for c in cases if c.onset_date is not None]
    if len(complete) < 50:
        raise ImputationError(
            f"need at least 50 complete cases, got {len(complete)}")
    d = np.array([(c.report_date - c.onset_date).days for c in complete],
                 dtype=float)
    origin = min(c.report_date for c in complete)
    t = _day_numbers(complete, origin)
    if len(np.unique(t)) < 2:
        raise ImputationError("complete cases must span at least 2 report dates")

    state_levels = sorted({c.state_id for c in complete})
    fixed, fixed_names = _fixed_rows(complete, state_levels)
    trend_spec = trend_spec or SmoothSpec("pspline", k=8)
    distinct = len(np.unique(t))
    if distinct < 3:
        # a spline needs k >= 3 distinct dates; with 2, any trend column is
        # an affine function of the weekend dummy plus intercept, so the
        # date effect is already spanned and the term is dropped
        blocks = []
    else:
        k = min(trend_spec.k, distinct)
        spec = SmoothSpec("pspline", k=k, degree=min(trend_spec.degree, k - 1),
                          diff_order=min(trend_spec.diff_order, k - 1))
        blocks = [absorb_sum_to_zero(pspline_block(t, spec, label="report_trend"))]
    ridge = ridge_block([c.district_id for c in complete], label="district")
    blocks.append(ridge)

    frame = ModelFrame(y=d, fixed=fixed, fixed_names=fixed_names, blocks=blocks)

    # mean predictor from a Poisson-kernel fit, dispersion from moments
    init = optimize_smoothing(frame, None, Family("quasi"))
    theta_mu, mu = init.fit.theta, init.fit.mu
    sigma0 = max(float(np.sum((d - mu) ** 2 - mu) / np.sum(mu ** 2)), 1e-3)
    theta_sigma = np.zeros(frame.ncol)
    theta_sigma[0] = np.log(sigma0)
    sigma = np.exp(frame.design(None) @ theta_sigma)

    nb = Family("negative_binomial")
    log_tau_mu = np.log(np.maximum(init.tau, 1e-6))
    log_tau_sigma = np.full(len(blocks), 2.0)  # start the scale model stiff
    loglik = nb_loglik(d, mu, 1.0 / sigma)
    mu_sm = sig_sm = None
    change = np.inf
    for cycle in range(1, max_cycles + 1):
        mu_sm = optimize_smoothing(frame, None, nb, phi_fixed=1.0 / sigma,
                                   theta0=theta_mu, start=log_tau_mu)
        theta_mu, mu = mu_sm.fit.theta, mu_sm.fit.mu
        log_tau_mu = np.log(np.maximum(mu_sm.tau, 1e-8))

        sig_sm = optimize_smoothing(frame, None, Family("nb_dispersion", fixed=mu),
                                    theta0=theta_sigma, start=log_tau_sigma)
        theta_sigma, sigma = sig_sm.fit.theta, sig_sm.fit.mu
        log_tau_sigma = np.log(np.maximum(sig_sm.tau, 1e-8))

        new = nb_loglik(d, mu, 1.0 / sigma)
        change = abs(new - loglik)
        loglik = new
        if change < tol * (1.0 + abs(loglik)):
            break
    else:
        raise ImputationError(
            f"backfitting did not stabilize in {max_cycles} cycles; "
            f"last log-likelihood change {change:.3e}")

    edf_mu = effective_dof(frame, mu_sm.tau, 1.0 / sigma, None, nb, mu_sm.fit)
    disp = Family("nb_dispersion", fixed=mu)
    edf_sigma = effective_dof(frame, sig_sm.tau, 1.0, None, disp, sig_sm.fit)
    cov_mu = _covariance(frame, mu_sm.tau, 1.0 / sigma, nb, mu_sm.fit)
    cov_sigma = _covariance(frame, sig_sm.tau, 1.0, disp, sig_sm.fit)

    return DelayModel(
        fixed_names=fixed_names, blocks=blocks, theta_mu=theta_mu,
        theta_sigma=theta_sigma, cov_mu=cov_mu, cov_sigma=cov_sigma,
        tau_mu=mu_sm.tau, tau_sigma=sig_sm.tau, state_levels=state_levels,
        district_levels=list(ridge.levels), day_origin=origin, loglik=loglik,
        cycles=cycle, edf_mu=edf_mu, edf_sigma=edf_sigma)


def _covariance(frame, tau, phi, family, fit):
    from scipy.linalg import cho_factor, cho_solve

    X = frame.design(None)
    w = family.weight(frame.y, fit.mu, phi)
    H = X.T @ (X * w[:, None]) + frame.penalty_matrix(tau)
    V = cho_solve(cho_factor(H, lower=True), np.eye(len(H)))
    return 0.5 * (V + V.T)


def sample_delays(model, cases, rng):
    """Draw one delay per case and return the implied onset dates."""
    if not cases:
        return []
    mu, sigma = predict_moments(model, cases)
    sigma = np.maximum(sigma, 1e-8)
    phi = 1.0 / sigma
    draws = rng.negative_binomial(phi, phi / (phi + mu), size=len(cases))
    return [c.report_date - timedelta(days=int(k)) for c, k in zip(cases, draws)]


@dataclass
class ImputedDataset:
    """One completed line list and the weekly panel aggregated from it."""

    k: int
    cases: list
    panel: object


def build_imputations(cases, model, K=20, seed=None, *, registry, population,
                      calendar):
    """Fill missing onsets K times and aggregate each completed line list.

    Complete cases are carried unchanged into every dataset; each pass
    uses an independent substream spawned from the seed, so the K passes
    are reproducible and order-independent.
    """
    if K < 2:
        raise ImputationError("K must be at least 2 for a pooled variance")
    complete = [c for c in cases if c.onset_date is not None]
    incomplete = [c for c in cases if c.onset_date is None]
    streams = np.random.default_rng(seed).spawn(K)
    datasets = []
    for k, rng in enumerate(streams, start=1):
        onsets = sample_delays(model, incomplete, rng)
        filled = [replace(c, onset_date=o) for c, o in zip(incomplete, onsets)]
        cases_k = complete + filled
        panel = compute_rates(
            aggregate_panel(cases_k, registry, population, calendar), population)
        datasets.append(ImputedDataset(k=k, cases=cases_k, panel=panel))
    log.info("built %d imputed datasets (%d complete, %d imputed cases)",
             K, len(complete), len(incomplete))
    return datasets


def write_imputed_csv(dataset, path):
    """Export one completed line list with its imputation index."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "district_id", "state_id", "age_band", "gender",
                    "report_date", "onset_date", "k"])
        for c in dataset.cases:
            w.writerow([c.case_id, c.district_id, c.state_id, c.group.age_band,
                        c.group.gender, c.report_date.isoformat(),
                        c.onset_date.isoformat(), dataset.k])


def read_imputed_csv(path):
    """Inverse of write_imputed_csv: (k, case records)."""
    import csv
    from datetime import date

    from .panel import CaseRecord, GroupKey

    records, ks = [], set()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ks.add(int(row["k"]))
            records.append(CaseRecord(
                row["case_id"], row["district_id"], row["state_id"],
                GroupKey(row["age_band"], row["gender"]),
                date.fromisoformat(row["report_date"]),
                date.fromisoformat(row["onset_date"])))
    if len(ks) != 1:
        raise ImputationError(f"expected one imputation index in {path}, found {sorted(ks)}")
    return ks.pop(), records
