"""
From a patient line list to weekly incidence rates
==================================================

Cases arrive as one CSV row per patient with a report date and, when
known, a symptom-onset date. The panel module bins them into counts per
district, age/gender group and onset week, then converts the counts to
rates per 10,000 inhabitants.
"""
from datetime import date, timedelta

import numpy as np

from epimob.panel import (CaseRecord, DistrictRegistry, GroupKey,
                          PopulationTable, WeekCalendar, aggregate_panel,
                          compute_rates)

registry = DistrictRegistry([
    ("d001", "s1", 6.95, 50.94),
    ("d002", "s1", 7.46, 51.51),
    ("d003", "s2", 8.68, 50.11),
])
population = PopulationTable({
    (d, GroupKey(a, g)): p
    for d, p in (("d001", 26000.0), ("d002", 31000.0), ("d003", 18000.0))
    for a in ("15-35", "36-59") for g in ("female", "male")
})

# week 1 starts on the anchor date; four weeks of panel
calendar = WeekCalendar(date(2020, 3, 2), 4)

rng = np.random.default_rng(4)
records = []
for k in range(60):
    d = ["d001", "d002", "d003"][rng.integers(3)]
    g = GroupKey(["15-35", "36-59"][rng.integers(2)],
                 ["female", "male"][rng.integers(2)])
    onset = date(2020, 3, 2) + timedelta(days=int(rng.integers(0, 28)))
    records.append(CaseRecord(f"c{k:03d}", d, "s1", g,
                              report_date=onset + timedelta(days=3),
                              onset_date=onset))

panel = aggregate_panel(records, registry, population, calendar)
panel = compute_rates(panel, population)

print("districts:", panel.district_ids)
print("groups:   ", [f"{g.age_band}/{g.gender}" for g in panel.groups])
print("counts by week (summed over districts and groups):",
      panel.counts.sum(axis=(0, 1)))
print("total cases recovered:", int(panel.counts.sum()), "of", len(records))

# rates are counts scaled to 10,000 inhabitants of the cell
i, j = 0, 1
print(f"\nd001, group {panel.groups[j].age_band}/{panel.groups[j].gender}:")
print("  counts:", panel.counts[i, j])
print("  rates: ", np.round(panel.rates[i, j], 3))
