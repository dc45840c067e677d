"""Weekly district x group surveillance panel and model-frame assembly.

Ingests case-level line lists, a district registry and population
tables, aggregates onset dates to weekly counts per district and
age/gender group, converts to rates per 10,000 inhabitants, and lays
out the lagged regression frame consumed by the estimation engine.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np

from .basis import BasisBlock, SmoothSpec, absorb_sum_to_zero, ridge_block, thinplate_block
from .engine import ModelFrame

log = logging.getLogger(__name__)

AGE_BANDS = ("15-35", "36-59")
GENDERS = ("female", "male")


class PanelError(ValueError):
    pass


@dataclass(frozen=True)
class GroupKey:
    """Age band x gender cell; the reference level is (15-35, female)."""

    age_band: str
    gender: str

    def __post_init__(self):
        if self.age_band not in AGE_BANDS:
            raise PanelError(f"unknown age band {self.age_band!r}; expected one of {AGE_BANDS}")
        if self.gender not in GENDERS:
            raise PanelError(f"unknown gender {self.gender!r}; expected one of {GENDERS}")

    @property
    def is_reference(self):
        return self.age_band == AGE_BANDS[0] and self.gender == GENDERS[0]

    @property
    def age_indicator(self):
        return float(self.age_band == AGE_BANDS[1])

    @property
    def gender_indicator(self):
        return float(self.gender == GENDERS[1])

    def __str__(self):
        return f"{self.age_band}:{self.gender}"


GROUPS = tuple(GroupKey(a, g) for a in AGE_BANDS for g in GENDERS)
REFERENCE_GROUP = GROUPS[0]


@dataclass(frozen=True)
class CaseRecord:
    """One reported case; the weekend flag is derived from the report date."""

    case_id: str
    district_id: str
    state_id: str
    group: GroupKey
    report_date: date
    onset_date: date = None
    weekend_flag: bool = field(init=False, default=False)

    def __post_init__(self):
        if self.onset_date is not None and self.onset_date > self.report_date:
            raise PanelError(
                f"case {self.case_id}: onset {self.onset_date} after report {self.report_date}"
            )
        object.__setattr__(self, "weekend_flag", self.report_date.weekday() >= 5)


class DistrictRegistry:
    """Districts with their state and centroid coordinates, in file order."""

    def __init__(self, districts):
        self.districts = [(str(d), str(s), float(lon), float(lat))
                          for d, s, lon, lat in districts]
        self.ids = [d for d, _, _, _ in self.districts]
        if len(set(self.ids)) != len(self.ids):
            dup = sorted({d for d in self.ids if self.ids.count(d) > 1})
            raise PanelError(f"duplicate district ids in registry: {dup}")
        if len(self.ids) <= 2:
            raise PanelError("registry needs more than 2 districts")
        self._state = {d: s for d, s, _, _ in self.districts}
        self._index = {d: i for i, d in enumerate(self.ids)}

    @property
    def n(self):
        return len(self.ids)

    def __contains__(self, district_id):
        return district_id in self._index

    def index(self, district_id):
        try:
            return self._index[district_id]
        except KeyError:
            raise PanelError(f"unknown district id {district_id!r}")

    def state_of(self, district_id):
        self.index(district_id)
        return self._state[district_id]

    def coords(self):
        """Centroid (lon, lat) array in registry order."""
        return np.array([[lon, lat] for _, _, lon, lat in self.districts])


class PopulationTable:
    """(district, group) -> population count; all entries must be positive."""

    def __init__(self, entries):
        self.entries = {}
        for (d, g), pop in dict(entries).items():
            pop = float(pop)
            if pop <= 0:
                raise PanelError(f"population for ({d}, {g}) must be > 0, got {pop}")
            self.entries[(str(d), g)] = pop

    def population(self, district_id, group):
        try:
            return self.entries[(district_id, group)]
        except KeyError:
            raise PanelError(f"no population entry for ({district_id}, {group})")

    def check_complete(self, registry):
        missing = [(d, str(g)) for d in registry.ids for g in GROUPS
                   if (d, g) not in self.entries]
        if missing:
            raise PanelError(f"population table incomplete; first gaps: {missing[:5]}")


@dataclass(frozen=True)
class WeekCalendar:
    """Fixed 7-day bins; week 1 starts on the anchor date."""

    anchor: date
    n_weeks: int

    def __post_init__(self):
        if self.n_weeks < 2:
            raise PanelError("calendar needs at least 2 weeks")

    def week_of(self, day):
        """1-based week index of a date, or None outside the window."""
        offset = (day - self.anchor).days
        if offset < 0 or offset >= 7 * self.n_weeks:
            return None
        return offset // 7 + 1

    def start_of(self, week):
        if not 1 <= week <= self.n_weeks:
            raise PanelError(f"week {week} outside 1..{self.n_weeks}")
        return self.anchor + timedelta(days=7 * (week - 1))


@dataclass
class SurveillancePanel:
    """Dense weekly counts and per-10,000 rates over districts x groups."""

    counts: np.ndarray  # (n_districts, n_groups, T)
    district_ids: list
    calendar: WeekCalendar
    rates: np.ndarray = None
    populations: np.ndarray = None  # (n_districts, n_groups), set with rates
    dropped: int = 0
    groups: tuple = GROUPS

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        expected = (len(self.district_ids), len(self.groups), self.calendar.n_weeks)
        if self.counts.shape != expected:
            raise PanelError(f"counts shape {self.counts.shape} != {expected}")
        if np.any(self.counts < 0):
            raise PanelError("counts must be nonnegative")

    @property
    def T(self):
        return self.calendar.n_weeks

    def count(self, district_id, group, week):
        i = self.district_ids.index(district_id)
        return int(self.counts[i, self.groups.index(group), week - 1])

    def rate(self, district_id, group, week):
        if self.rates is None:
            raise PanelError("rates have not been computed")
        i = self.district_ids.index(district_id)
        return float(self.rates[i, self.groups.index(group), week - 1])


def _parse_date(raw, line_no, column):
    try:
        return date.fromisoformat(raw)
    except ValueError:
        raise PanelError(f"line {line_no}: malformed {column} date {raw!r}")


LINE_LIST_COLUMNS = ["case_id", "district_id", "state_id", "age_band",
                     "gender", "report_date", "onset_date"]


def parse_line_list(source, registry=None):
    """Read case rows from a line-list CSV.

    ``source`` is a path or an open text stream. An empty onset field
    becomes an absent onset date. When a registry is supplied, unknown
    district ids are rejected.
    """
    if hasattr(source, "read"):
        return _parse_rows(csv.DictReader(source), registry)
    with open(source, newline="") as fh:
        return _parse_rows(csv.DictReader(fh), registry)


def _parse_rows(reader, registry):
    missing = [c for c in LINE_LIST_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise PanelError(f"line list is missing columns {missing}")
    records = []
    for line_no, row in enumerate(reader, start=2):
        district = row["district_id"].strip()
        if registry is not None and district not in registry:
            raise PanelError(f"line {line_no}: unknown district id {district!r}")
        report = _parse_date(row["report_date"].strip(), line_no, "report")
        onset_raw = (row["onset_date"] or "").strip()
        onset = _parse_date(onset_raw, line_no, "onset") if onset_raw else None
        try:
            group = GroupKey(row["age_band"].strip(), row["gender"].strip())
            rec = CaseRecord(row["case_id"].strip(), district,
                             row["state_id"].strip(), group, report, onset)
        except PanelError as err:
            raise PanelError(f"line {line_no}: {err}")
        records.append(rec)
    return records


def aggregate_panel(records, registry, population, calendar):
    """Count cases per (district, group, onset week) into a dense panel.

    Every record must carry an onset date (observed or imputed). Onsets
    outside the calendar window are dropped; the number of drops is kept
    on the panel and logged.
    """
    population.check_complete(registry)
    counts = np.zeros((registry.n, len(GROUPS), calendar.n_weeks), dtype=int)
    group_index = {g: j for j, g in enumerate(GROUPS)}
    dropped = 0
    for rec in records:
        if rec.onset_date is None:
            raise PanelError(f"case {rec.case_id} has no onset date; impute first")
        week = calendar.week_of(rec.onset_date)
        if week is None:
            dropped += 1
            continue
        counts[registry.index(rec.district_id), group_index[rec.group], week - 1] += 1
    if dropped:
        log.info("aggregate_panel: dropped %d records with onset outside the calendar", dropped)
    return SurveillancePanel(counts, list(registry.ids), calendar, dropped=dropped)


def compute_rates(panel, population):
    """Fill rates = 10,000 * count / population for every cell."""
    pops = np.empty((len(panel.district_ids), len(panel.groups)))
    for i, d in enumerate(panel.district_ids):
        for j, g in enumerate(panel.groups):
            pops[i, j] = population.population(d, g)
    if np.any(pops <= 0):
        raise PanelError("population must be positive")
    rates = 1e4 * panel.counts / pops[:, :, None]
    return SurveillancePanel(panel.counts, panel.district_ids, panel.calendar,
                             rates=rates, populations=pops,
                             dropped=panel.dropped, groups=panel.groups)


@dataclass
class AssembledFrame:
    """Model frame plus the (district, group, week) identity of each row."""

    frame: ModelFrame
    row_district: list
    row_group: list
    row_week: np.ndarray
    fixed_names: list

    @property
    def n_rows(self):
        return len(self.frame.y)


def _expand_block(block, row_values, label):
    """Re-key a block built on unique inputs to one design row per frame row."""
    design = block.rows(row_values)
    return BasisBlock(design, block.penalty, nullspace_dim=block.nullspace_dim,
                      label=label, rowfn=block.rowfn, levels=block.levels)


def _feature_lag_matrix(series, district_ids, T, kind):
    """values[i, t] for weeks 1..T-1, aligned to panel district order."""
    dindex = {d: i for i, d in enumerate(series.district_ids)}
    windex = {w: t for t, w in enumerate(series.weeks)}
    out = np.empty((len(district_ids), T - 1))
    for i, d in enumerate(district_ids):
        if d not in dindex:
            raise PanelError(f"{kind} feature missing for district {d}")
        for w in range(1, T):
            if w not in windex:
                raise PanelError(f"{kind} feature missing for week {w}")
            out[i, w - 1] = series.values[dindex[d], windex[w]]
    if not np.all(np.isfinite(out)):
        raise PanelError(f"{kind} feature contains non-finite values")
    return out


def assemble_model_frame(panel, features, embedding, registry,
                         coord_spec=None, soc_spec=None,
                         district_effects=True, last_week_effects=True):
    """Lay out the lagged regression frame for weeks 2..T.

    Row order is district (registry order), then group, then week. The
    fixed part holds one dummy per week (no global intercept), gender,
    age and interaction dummies, and week-specific slopes on each lagged
    feature. Penalized blocks: a sum-to-zero thin-plate surface over
    district centroids, the same over the embedding coordinates, a ridge
    of district intercepts, and a ridge active only in the final week.
    The response is the count, the offset is log population, and the
    lagged rate is kept aside for the log(rate + c) transform.
    """
    if panel.rates is None or panel.populations is None:
        raise PanelError("panel has no rates; call compute_rates first")
    T = panel.T
    districts = list(panel.district_ids)
    n, G = len(districts), len(panel.groups)

    lagged = {kind: _feature_lag_matrix(features[kind], districts, T, kind)
              for kind in sorted(features)}

    rows = n * G * (T - 1)
    reg_rows = [registry.index(d) for d in districts]
    row_district, row_group = [], []
    row_week = np.empty(rows, dtype=int)
    y = np.empty(rows)
    ar = np.empty(rows)
    offset = np.empty(rows)
    r = 0
    for i, d in enumerate(districts):
        for j, g in enumerate(panel.groups):
            for t in range(2, T + 1):
                row_district.append(d)
                row_group.append(g)
                row_week[r] = t
                y[r] = panel.counts[i, j, t - 1]
                ar[r] = panel.rates[i, j, t - 2]
                offset[r] = np.log(panel.populations[i, j])
                r += 1

    week_dummies = np.zeros((rows, T - 1))
    week_dummies[np.arange(rows), row_week - 2] = 1.0
    gen = np.array([g.gender_indicator for g in row_group])
    age = np.array([g.age_indicator for g in row_group])
    fixed_cols = [week_dummies, gen[:, None], age[:, None], (age * gen)[:, None]]
    fixed_names = [f"week[{t}]" for t in range(2, T + 1)]
    fixed_names += ["gender_male", "age_36_59", "age_36_59_male"]

    row_i = np.array([districts.index(d) for d in row_district])
    for kind in sorted(lagged):
        vals = lagged[kind][row_i, row_week - 2]  # week t row carries week t-1
        fixed_cols.append(week_dummies * vals[:, None])
        fixed_names += [f"{kind}_week[{t}]" for t in range(2, T + 1)]
    fixed = np.column_stack(fixed_cols)

    blocks = []
    coord_spec = coord_spec or SmoothSpec("thinplate", k=20)
    soc_spec = soc_spec or SmoothSpec("thinplate", k=20)
    centroids = registry.coords()[reg_rows]
    coord_block = thinplate_block(centroids, coord_spec, label="coord_surface")
    blocks.append(absorb_sum_to_zero(
        _expand_block(coord_block, centroids[row_i], "coord_surface")))

    eindex = {d: i for i, d in enumerate(embedding.district_ids)}
    missing = [d for d in districts if d not in eindex]
    if missing:
        raise PanelError(f"embedding missing districts: {missing[:5]}")
    soc = np.array([embedding.coords[eindex[d]] for d in districts])
    soc_block = thinplate_block(soc, soc_spec, label="social_surface")
    blocks.append(absorb_sum_to_zero(
        _expand_block(soc_block, soc[row_i], "social_surface")))

    if district_effects:
        blocks.append(ridge_block(row_district, label="district_intercept"))
    if last_week_effects:
        base = ridge_block(row_district, label="district_last_week")
        design = base.design * (row_week == T)[:, None]
        blocks.append(BasisBlock(design, base.penalty, nullspace_dim=0,
                                 label="district_last_week", levels=base.levels))

    frame = ModelFrame(y=y, fixed=fixed, fixed_names=fixed_names,
                       blocks=blocks, offset=offset, ar_rates=ar)
    return AssembledFrame(frame, row_district, row_group, row_week, fixed_names)


def read_registry_csv(path):
    """Read `district_id,state_id,lon,lat` rows into a registry."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = [(r["district_id"], r["state_id"], float(r["lon"]), float(r["lat"]))
                for r in reader]
    return DistrictRegistry(rows)


def read_population_csv(path):
    """Read `district_id,age_band,gender,population` rows into a table."""
    entries = {}
    with open(path, newline="") as fh:
        for line_no, r in enumerate(csv.DictReader(fh), start=2):
            try:
                key = (r["district_id"], GroupKey(r["age_band"], r["gender"]))
            except PanelError as err:
                raise PanelError(f"line {line_no}: {err}")
            entries[key] = float(r["population"])
    return PopulationTable(entries)
