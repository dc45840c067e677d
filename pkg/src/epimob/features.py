"""Mobility features derived from co-location matrices and daily series.

Two weekly covariates are produced per district: a Gini-type concentration
index of the co-location probability row, and the averaged fraction of
people staying put. Both are standardized across districts within each
week before entering the regression.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CoLocationMatrix",
    "FeatureSeries",
    "gini_index",
    "gini_series",
    "weekly_standardize",
    "weekly_average",
    "read_colocation_csv",
    "read_daily_csv",
    "write_series_csv",
    "read_series_csv",
]


class FeatureError(ValueError):
    pass


@dataclass
class CoLocationMatrix:
    """Weekly co-location probabilities between districts.

    ``matrix[i, j]`` is the probability that a random person from district
    ``i`` meets a random person from district ``j`` during the week. Only
    nonnegativity is required; rows need not sum to one and the diagonal is
    never used.
    """

    week: int
    matrix: np.ndarray
    district_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise FeatureError("co-location matrix must be square")
        if not np.all(np.isfinite(self.matrix)):
            raise FeatureError("co-location matrix contains non-finite entries")
        if np.any(self.matrix < 0):
            raise FeatureError("co-location probabilities must be nonnegative")


@dataclass
class FeatureSeries:
    """District-by-week covariate values for one feature kind."""

    values: np.ndarray  # (n_districts, n_weeks)
    district_ids: list[str]
    weeks: list[int]
    kind: str  # "gini" or "staying_put"
    standardized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.district_ids), len(self.weeks)):
            raise FeatureError("feature values shape does not match labels")

    def value(self, district_id, week):
        i = self.district_ids.index(district_id)
        t = self.weeks.index(week)
        return self.values[i, t]


def gini_index(colocation, i):
    """Concentration of district ``i``'s meeting pattern across all others.

    Computed from the off-diagonal row ``p`` of the co-location matrix as

        sum over ordered pairs (m, l) of |p_m - p_l|
        -----------------------------------------------
        2 * (n - 1) * sum_j p_j

    which is 0 for a uniform row and (n-2)/(n-1) when all mass sits on a
    single district.
    """
    P = colocation.matrix if isinstance(colocation, CoLocationMatrix) else np.asarray(colocation, float)
    n = P.shape[0]
    row = np.delete(P[i, :], i)
    return _gini_row(row, n)


def _gini_row(row, n):
    total = row.sum()
    if total <= 0:
        raise FeatureError("degenerate co-location row: all off-diagonal entries zero")
    # sum_{m,l} |x_m - x_l| = 2 * sum_k (2k - m - 1) x_(k), x sorted ascending, k 1-based
    x = np.sort(row)
    m = x.size
    k = np.arange(1, m + 1)
    mad_sum = 2.0 * np.sum((2.0 * k - m - 1.0) * x)
    return mad_sum / (2.0 * (n - 1) * total)


def gini_series(matrices, district_ids=None):
    """Gini index for every district and week from a list of CoLocationMatrix."""
    matrices = sorted(matrices, key=lambda M: M.week)
    n = matrices[0].matrix.shape[0]
    ids = district_ids or matrices[0].district_ids or [str(i) for i in range(n)]
    weeks = [M.week for M in matrices]
    values = np.empty((n, len(weeks)))
    for t, M in enumerate(matrices):
        if M.matrix.shape[0] != n:
            raise FeatureError("co-location matrices differ in size")
        for i in range(n):
            values[i, t] = gini_index(M, i)
    return FeatureSeries(values, list(ids), weeks, kind="gini")


def weekly_standardize(series):
    """Standardize a feature series to mean 0, sample sd 1 within each week.

    The sd uses the n-1 divisor. A degenerate week (zero variance) maps to
    all zeros, which is the mean-centered value.
    """
    if series.standardized:
        raise FeatureError("series is already standardized")
    n = series.values.shape[0]
    if n < 2:
        raise FeatureError("weekly standardization needs at least 2 districts")
    mu = series.values.mean(axis=0, keepdims=True)
    sd = series.values.std(axis=0, ddof=1, keepdims=True)
    centered = series.values - mu
    out = np.where(sd > 0, centered / np.where(sd > 0, sd, 1.0), 0.0)
    return FeatureSeries(out, list(series.district_ids), list(series.weeks),
                         kind=series.kind, standardized=True)


def weekly_average(daily, calendar, district_ids, kind="staying_put"):
    """Average daily observations into weekly values per district.

    Parameters
    ----------
    daily : mapping (district_id, datetime.date) -> float
    calendar : WeekCalendar with ``week_of`` and ``n_weeks``
    district_ids : districts expected to be present every week
    """
    weeks = list(range(1, calendar.n_weeks + 1))
    sums = np.zeros((len(district_ids), len(weeks)))
    counts = np.zeros_like(sums)
    index = {d: i for i, d in enumerate(district_ids)}
    for (district, day), value in daily.items():
        if district not in index:
            continue
        week = calendar.week_of(day)
        if week is None:
            continue
        sums[index[district], week - 1] += value
        counts[index[district], week - 1] += 1
    if np.any(counts == 0):
        i, t = np.argwhere(counts == 0)[0]
        raise FeatureError(
            f"no daily observations for district {district_ids[i]} in week {weeks[t]}"
        )
    return FeatureSeries(sums / counts, list(district_ids), weeks, kind=kind)


def read_colocation_csv(path, district_ids):
    """Read `week,src_district,dst_district,probability` rows; missing pairs are 0."""
    index = {d: i for i, d in enumerate(district_ids)}
    n = len(district_ids)
    per_week = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            week = int(row["week"])
            if week not in per_week:
                per_week[week] = np.zeros((n, n))
            src, dst = row["src_district"], row["dst_district"]
            if src not in index or dst not in index:
                raise FeatureError(f"unknown district in co-location file: {src}/{dst}")
            per_week[week][index[src], index[dst]] = float(row["probability"])
    return [CoLocationMatrix(week=w, matrix=M, district_ids=list(district_ids))
            for w, M in sorted(per_week.items())]


def read_daily_csv(path):
    """Read `date,district_id,fraction` rows into a (district, date) -> value map."""
    daily = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            day = dt.date.fromisoformat(row["date"])
            daily[(row["district_id"], day)] = float(row["fraction"])
    return daily


def write_series_csv(series_list, path):
    """Write feature series to `kind,district_id,week,value,standardized` rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "district_id", "week", "value", "standardized"])
        for s in series_list:
            for i, d in enumerate(s.district_ids):
                for t, week in enumerate(s.weeks):
                    w.writerow([s.kind, d, week, repr(float(s.values[i, t])),
                                int(s.standardized)])


def read_series_csv(path):
    """Inverse of write_series_csv: a kind -> FeatureSeries mapping."""
    cells = {}
    flags = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            kind = row["kind"]
            cells.setdefault(kind, {})[(row["district_id"], int(row["week"]))] = \
                float(row["value"])
            flags[kind] = bool(int(row["standardized"]))
    out = {}
    for kind, grid in cells.items():
        districts = list(dict.fromkeys(d for d, _ in grid))
        weeks = sorted({w for _, w in grid})
        values = np.empty((len(districts), len(weeks)))
        for i, d in enumerate(districts):
            for t, week in enumerate(weeks):
                if (d, week) not in grid:
                    raise FeatureError(f"{kind}: no value for {d} in week {week}")
                values[i, t] = grid[(d, week)]
        out[kind] = FeatureSeries(values, districts, weeks, kind=kind,
                                  standardized=flags[kind])
    return out
