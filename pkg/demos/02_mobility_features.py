"""
Mobility covariates: meeting concentration and staying put
==========================================================

Two weekly covariates summarize movement behaviour. The Gini index of a
district's co-location row measures how concentrated its meeting pattern
is across the other districts; the staying-put share averages the daily
fraction of people who do not leave their home range. Both are
standardized within each week so that coefficients compare across weeks.
"""
from datetime import date, timedelta

import numpy as np

from epimob.features import (CoLocationMatrix, gini_index, gini_series,
                             weekly_average, weekly_standardize)
from epimob.panel import WeekCalendar

ids = ["d001", "d002", "d003", "d004"]
rng = np.random.default_rng(11)

# three weeks of co-location matrices; rows are where a district's
# population spends its meetings
matrices = []
for week in (1, 2, 3):
    M = rng.uniform(0.01, 0.2, (4, 4))
    np.fill_diagonal(M, 0.8)
    matrices.append(CoLocationMatrix(week=week, matrix=M, district_ids=ids))

print("gini of d001, week 1:", round(gini_index(matrices[0], 0), 4))

# an extreme row: all off-diagonal meeting mass on one partner district
spiked = np.eye(4) * 0.8
spiked[0, 2] = 0.2
print("fully concentrated row:",
      round(gini_index(CoLocationMatrix(1, spiked, ids), 0), 4),
      "(upper bound (n-2)/(n-1) =", round(2 / 3, 4), ")")

gini = gini_series(matrices, ids)
print("\nraw gini series, one row per district:")
print(np.round(gini.values, 3))

standardized = weekly_standardize(gini)
print("after weekly standardization (each column mean 0, sd 1):")
print(np.round(standardized.values, 3))
print("column means:", np.round(standardized.values.mean(axis=0), 12))

# daily staying-put shares averaged into calendar weeks
calendar = WeekCalendar(date(2020, 3, 2), 3)
daily = {}
for d in range(21):
    day = date(2020, 3, 2) + timedelta(days=d)
    for i in ids:
        daily[(i, day)] = float(0.3 + 0.02 * d + 0.05 * rng.normal())
stay = weekly_average(daily, calendar, ids)
print("\nweekly staying-put shares (rise as the level drifts up):")
print(np.round(stay.values, 3))
