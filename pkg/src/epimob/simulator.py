"""Synthetic panel generator for the endemic/epidemic count model.

Draws weekly district x group counts from the same negative binomial
autoregression the estimation engine fits, with known coefficients,
random effects and features, so recovery studies have a ground truth.
The module also explodes panels into case-level line lists with
reporting delays, blanks onset dates at a chosen rate, and writes every
CSV format the ingestion side reads back.
"""

import csv
import math
from dataclasses import dataclass, field, replace
from datetime import date, timedelta

import numpy as np
from scipy.special import expit, logit

from .embedding import ConnectednessMatrix, EmbeddingCoordinates, embed_and_align
from .features import CoLocationMatrix, gini_series, weekly_average, weekly_standardize
from .panel import (
    GROUPS,
    CaseRecord,
    DistrictRegistry,
    PopulationTable,
    SurveillancePanel,
    WeekCalendar,
    compute_rates,
)

MEAN_CAP = 1e9
RATE_SCALE = 1e4


class SimulationError(RuntimeError):
    pass


@dataclass
class SimulationConfig:
    """Ground-truth parameters and generator settings for one scenario.

    ``week_effects`` has one entry per calendar week; the first seeds the
    initial endemic level (week 1 is generated from the endemic part
    alone and never estimated), the remaining T-1 entries are the
    estimable per-week intercepts. ``feature_slopes`` maps a feature kind
    to either a scalar (same slope every week) or a length T-1 array of
    week-specific slopes on the standardized lagged feature. Surfaces are
    callables evaluated on district coordinates; their level is not
    identified separately from the week effects, so keep them centered
    when comparing estimates.
    """

    n_districts: int = 12
    n_weeks: int = 10
    week_effects: np.ndarray = None
    gender_effect: float = 0.0
    age_effect: float = 0.0
    interaction_effect: float = 0.0
    feature_slopes: dict = field(default_factory=dict)
    ar_coef: float = 0.5
    c: float = 0.5
    phi: float = 10.0
    tau_a: float = 0.0
    tau_b: float = 0.0
    coord_surface: object = None  # callable (lon, lat) -> endemic shift
    social_surface: object = None  # callable (z1, z2) -> endemic shift
    population_range: tuple = (20000, 60000)
    feature_kinds: tuple = ("gini", "staying_put")
    feature_walk_sd: float = 0.3
    delay_mean: float = 6.0
    delay_age_effect: float = 0.0
    delay_gender_effect: float = 0.0
    delay_dispersion: float = 0.35
    delay_shift: int = 0
    groups: tuple = GROUPS
    anchor: date = date(2020, 3, 2)
    n_states: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.n_districts <= 2:
            raise SimulationError("need more than 2 districts")
        if self.n_weeks < 2:
            raise SimulationError("need at least 2 weeks")
        if not 0.0 < self.c <= 1.0:
            raise SimulationError(f"true c must lie in (0, 1], got {self.c}")
        if self.phi <= 0 or self.delay_dispersion <= 0:
            raise SimulationError("dispersion parameters must be positive")
        lo, hi = self.population_range
        if lo <= 0 or hi < lo:
            raise SimulationError("population range must be positive and ordered")
        if self.tau_a < 0 or self.tau_b < 0:
            raise SimulationError("random-effect scales must be nonnegative")
        if self.delay_shift < 0:
            raise SimulationError("delay shift must be nonnegative")
        if self.week_effects is None:
            self.week_effects = np.full(self.n_weeks, -9.2)
        self.week_effects = np.asarray(self.week_effects, dtype=float)
        if self.week_effects.shape != (self.n_weeks,):
            raise SimulationError(
                f"week_effects must have length {self.n_weeks} (week 1 seeds "
                "the initial endemic level)")
        slopes = {}
        for kind, val in self.feature_slopes.items():
            arr = np.asarray(val, dtype=float)
            if arr.ndim == 0:
                arr = np.full(self.n_weeks - 1, float(arr))
            if arr.shape != (self.n_weeks - 1,):
                raise SimulationError(
                    f"slopes for {kind!r} must be scalar or length {self.n_weeks - 1}")
            if kind not in self.feature_kinds:
                raise SimulationError(f"slope given for ungenerated feature {kind!r}")
            slopes[kind] = arr
        self.feature_slopes = slopes


@dataclass
class SyntheticTruth:
    """Everything drawn along the way, kept for estimator comparison."""

    config: SimulationConfig
    registry: DistrictRegistry
    population: PopulationTable
    a: np.ndarray  # (n,) district intercepts
    b: np.ndarray  # (n,) final-week effects
    features: dict  # kind -> standardized FeatureSeries
    colocations: list  # weekly CoLocationMatrix behind the gini series
    daily: dict  # (district, date) -> staying-put share
    connectedness: ConnectednessMatrix
    social_coords: np.ndarray  # (n, 2) latent points behind connectedness
    embedding: EmbeddingCoordinates  # aligned, as the pipeline computes it
    nu_end: np.ndarray  # (n, G, T) endemic predictor incl. log population
    nu_epi: np.ndarray  # (n, G, T) epidemic predictor, NaN in week 1
    mu: np.ndarray  # (n, G, T) conditional means

    def true_fixed_effects(self, names):
        """Truth vector matching an assembled frame's fixed coefficients."""
        cfg = self.config
        out = np.empty(len(names))
        for k, name in enumerate(names):
            if name.startswith("week["):
                out[k] = cfg.week_effects[int(name[5:-1]) - 1]
            elif name == "gender_male":
                out[k] = cfg.gender_effect
            elif name == "age_36_59":
                out[k] = cfg.age_effect
            elif name == "age_36_59_male":
                out[k] = cfg.interaction_effect
            else:
                if "_week[" not in name:
                    raise SimulationError(f"no truth for coefficient {name!r}")
                kind, rest = name.rsplit("_week[", 1)
                if kind not in self.features:
                    raise SimulationError(f"no truth for coefficient {name!r}")
                slopes = cfg.feature_slopes.get(kind)
                out[k] = 0.0 if slopes is None else slopes[int(rest[:-1]) - 2]
        return out


def _make_registry(cfg, rng):
    lon = rng.uniform(0.0, 10.0, cfg.n_districts)
    lat = rng.uniform(0.0, 10.0, cfg.n_districts)
    rows = [(f"d{i + 1:03d}", f"s{i % cfg.n_states + 1}", lon[i], lat[i])
            for i in range(cfg.n_districts)]
    return DistrictRegistry(rows)


def _make_population(cfg, registry, rng):
    lo, hi = cfg.population_range
    entries = {(d, g): float(rng.integers(lo, hi + 1))
               for d in registry.ids for g in cfg.groups}
    return PopulationTable(entries)


def _simulate_colocations(cfg, registry, rng):
    """Weekly contact matrices whose row inequality drifts as a random walk."""
    n = cfg.n_districts
    z = rng.normal(size=(n, n))
    spread = rng.uniform(0.5, 1.5, n)
    out = []
    for week in range(1, cfg.n_weeks + 1):
        M = np.exp(spread[:, None] * z)
        M *= 0.01 / M.sum(axis=1, keepdims=True)
        np.fill_diagonal(M, 0.9)
        out.append(CoLocationMatrix(week=week, matrix=M,
                                    district_ids=list(registry.ids)))
        spread = np.abs(spread + cfg.feature_walk_sd * rng.normal(size=n))
    return out


def _simulate_daily(cfg, registry, calendar, rng):
    """Daily staying-put shares: logistic district random walks plus noise."""
    level = rng.normal(0.5, 0.5, cfg.n_districts)
    daily = {}
    for week in range(1, cfg.n_weeks + 1):
        start = calendar.start_of(week)
        for i, d in enumerate(registry.ids):
            for day in range(7):
                noise = 0.05 * rng.normal()
                daily[(d, start + timedelta(days=day))] = float(expit(level[i] + noise))
        level = level + cfg.feature_walk_sd * rng.normal(size=cfg.n_districts)
    return daily


def _simulate_connectedness(cfg, registry, rng):
    """Latent planar points; reciprocal distances give exact round-trip."""
    Z = rng.uniform(0.0, 5.0, (cfg.n_districts, 2))
    diff = Z[:, None, :] - Z[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    with np.errstate(divide="ignore"):
        C = 1.0 / dist
    np.fill_diagonal(C, 1.0)
    return Z, ConnectednessMatrix(C, district_ids=list(registry.ids))


def simulate_panel(config):
    """Generate a weekly count panel from known parameters.

    Returns (panel, truth). Week 1 is drawn from the endemic component
    alone; from week 2 on the conditional mean multiplies in
    exp{ar_coef * log(lagged rate + c)}. The panel comes with rates and
    populations filled in, ready for frame assembly.
    """
    cfg = config
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    rng = np.random.default_rng(seeds[0])
    calendar = WeekCalendar(cfg.anchor, cfg.n_weeks)

    registry = _make_registry(cfg, rng)
    population = _make_population(cfg, registry, rng)
    colocations = _simulate_colocations(cfg, registry, rng)
    daily = _simulate_daily(cfg, registry, calendar, rng)
    social_coords, connectedness = _simulate_connectedness(cfg, registry, rng)
    aligned, _, _, emb = embed_and_align(connectedness, registry.coords())
    embedding = EmbeddingCoordinates(aligned, emb.eigenvalues, emb.stress,
                                     district_ids=list(registry.ids))

    features = {}
    for kind in cfg.feature_kinds:
        if kind == "gini":
            raw = gini_series(colocations, list(registry.ids))
        elif kind == "staying_put":
            raw = weekly_average(daily, calendar, list(registry.ids))
        else:
            raise SimulationError(f"no generator for feature kind {kind!r}")
        features[kind] = weekly_standardize(raw)

    n, G, T = cfg.n_districts, len(cfg.groups), cfg.n_weeks
    a = cfg.tau_a * rng.normal(size=n)
    b = cfg.tau_b * rng.normal(size=n)
    pop = np.array([[population.population(d, g) for g in cfg.groups]
                    for d in registry.ids])
    gi = np.array([g.gender_indicator for g in cfg.groups])
    ai = np.array([g.age_indicator for g in cfg.groups])
    group_eff = (cfg.gender_effect * gi + cfg.age_effect * ai
                 + cfg.interaction_effect * ai * gi)

    district_eff = a.copy()
    if cfg.coord_surface is not None:
        coords = registry.coords()
        district_eff += np.asarray(cfg.coord_surface(coords[:, 0], coords[:, 1]))
    if cfg.social_surface is not None:
        district_eff += np.asarray(
            cfg.social_surface(social_coords[:, 0], social_coords[:, 1]))

    nu_end = (cfg.week_effects[None, None, :] + group_eff[None, :, None]
              + district_eff[:, None, None] + np.log(pop)[:, :, None])
    nu_end[:, :, T - 1] += b[:, None]
    for kind, slopes in cfg.feature_slopes.items():
        x = features[kind].values  # (n, T), week t uses column t-2
        nu_end[:, :, 1:] += (slopes[None, :] * x[:, :T - 1])[:, None, :]

    nu_epi = np.full((n, G, T), np.nan)
    mu = np.empty((n, G, T))
    counts = np.empty((n, G, T), dtype=int)
    rates = np.empty((n, G, T))
    for t in range(T):
        eta = nu_end[:, :, t]
        if t > 0:
            nu_epi[:, :, t] = cfg.ar_coef * np.log(rates[:, :, t - 1] + cfg.c)
            eta = eta + nu_epi[:, :, t]
        mu[:, :, t] = np.exp(eta)
        peak = mu[:, :, t].max()
        if peak > MEAN_CAP:
            raise SimulationError(
                f"simulated mean {peak:.3g} in week {t + 1} exceeds {MEAN_CAP:.0e}; "
                "use smaller coefficients or a weaker autoregression")
        counts[:, :, t] = rng.negative_binomial(
            cfg.phi, cfg.phi / (cfg.phi + mu[:, :, t]))
        rates[:, :, t] = RATE_SCALE * counts[:, :, t] / pop

    panel = SurveillancePanel(counts, list(registry.ids), calendar,
                              groups=cfg.groups)
    panel = compute_rates(panel, population)
    truth = SyntheticTruth(cfg, registry, population, a, b, features,
                           colocations, daily, connectedness, social_coords,
                           embedding, nu_end, nu_epi, mu)
    return panel, truth


def simulate_line_list(panel, registry, config, seed=None):
    """Explode panel counts into dated case records with reporting delays.

    Onset days are uniform within the onset week; delays are negative
    binomial with a group-dependent mean (plus the constant
    ``delay_shift``, which deliberately misspecifies the delay family
    when nonzero). Aggregating the result reproduces the panel exactly.
    """
    cfg = config
    if seed is None:
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[1])
    else:
        rng = np.random.default_rng(seed)
    phi_d = 1.0 / cfg.delay_dispersion
    records = []
    case_no = 0
    for i, d in enumerate(panel.district_ids):
        state = registry.state_of(d)
        for j, g in enumerate(panel.groups):
            mean = cfg.delay_mean * math.exp(
                cfg.delay_age_effect * g.age_indicator
                + cfg.delay_gender_effect * g.gender_indicator)
            for t in range(1, panel.T + 1):
                cnt = int(panel.counts[i, j, t - 1])
                if cnt == 0:
                    continue
                start = panel.calendar.start_of(t)
                offsets = rng.integers(0, 7, cnt)
                delays = rng.negative_binomial(
                    phi_d, phi_d / (phi_d + mean), cnt) + cfg.delay_shift
                for off, dl in zip(offsets, delays):
                    onset = start + timedelta(days=int(off))
                    case_no += 1
                    records.append(CaseRecord(
                        f"c{case_no:06d}", d, state, g,
                        onset + timedelta(days=int(dl)), onset))
    return records


def apply_missingness(records, fraction, seed, weight=None):
    """Blank onset dates independently with the given probability.

    ``weight`` optionally maps a record to a logit shift, making the
    blanking probability covariate-dependent (missing at random given
    observed fields) while ``fraction`` sets the baseline.
    """
    if not 0.0 <= fraction < 1.0:
        raise SimulationError(f"missing fraction must be in [0, 1), got {fraction}")
    records = list(records)
    if fraction == 0.0 and weight is None:
        return records
    rng = np.random.default_rng(seed)
    u = rng.uniform(size=len(records))
    base = logit(fraction)
    out = []
    for rec, ui in zip(records, u):
        p = fraction if weight is None else float(expit(base + weight(rec)))
        if rec.onset_date is not None and ui < p:
            rec = replace(rec, onset_date=None)
        out.append(rec)
    return out


def write_line_list_csv(records, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "district_id", "state_id", "age_band",
                    "gender", "report_date", "onset_date"])
        for r in records:
            w.writerow([r.case_id, r.district_id, r.state_id,
                        r.group.age_band, r.group.gender,
                        r.report_date.isoformat(),
                        r.onset_date.isoformat() if r.onset_date else ""])


def write_registry_csv(registry, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["district_id", "state_id", "lon", "lat"])
        for d, s, lon, lat in registry.districts:
            w.writerow([d, s, repr(lon), repr(lat)])


def write_population_csv(population, registry, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["district_id", "age_band", "gender", "population"])
        for d in registry.ids:
            for g in GROUPS:
                w.writerow([d, g.age_band, g.gender,
                            repr(population.population(d, g))])


def write_colocation_csv(matrices, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["week", "src_district", "dst_district", "probability"])
        for mat in matrices:
            ids = mat.district_ids
            for i, src in enumerate(ids):
                for j, dst in enumerate(ids):
                    w.writerow([mat.week, src, dst, repr(float(mat.matrix[i, j]))])


def write_daily_csv(daily, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "district_id", "fraction"])
        for (district, day), value in sorted(daily.items(),
                                             key=lambda kv: (kv[0][1], kv[0][0])):
            w.writerow([day.isoformat(), district, repr(value)])


def write_connectedness_csv(connectedness, path):
    ids = connectedness.district_ids
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["src_district", "dst_district", "sci"])
        for i, src in enumerate(ids):
            for j in range(i + 1, len(ids)):
                w.writerow([src, ids[j], repr(float(connectedness.matrix[i, j]))])
