"""
Scoring the quality of a table
==============================

Field-level scores roll up into metrics, metrics into five aspects, and the
aspects into one global score.
"""

from datetime import datetime, timezone

from dqengine.assessment import WeightConfig, assess, completeness, field_weights
from dqengine.synth import InjectionSpec, generate_base, inject
from dqengine.table import Table

# a small table whose fields are 90, 90, 80, 40, 30, 20, 65 and 70 percent complete
names = ["First", "Last", "Age", "Address", "Email", "Phone", "City", "Country"]
shares = [90, 90, 80, 40, 30, 20, 65, 70]
cols = [["v" if i < s // 5 else "" for i in range(20)] for s in shares]
t = Table.from_rows(names, [list(r) for r in zip(*cols)])
print(f"completeness, every field equal: {completeness(t):.2f}")

# relevance factors from 1 to 10 become exact rational weights
factors = {"First": 1, "Last": 1, "Age": 1, "Address": 3, "Email": 6, "Phone": 4,
           "City": 2, "Country": 2}
print("weights:", {k: str(v) for k, v in field_weights(factors).items()})
cfg = WeightConfig(field_factors=factors)
print(f"completeness, weighted by relevance: {completeness(t, cfg.weights_for(t.names)):.2f}")

# a synthetic people table with one percent of each anomaly class planted
damaged, truth = inject(generate_base(5000, seed=0), InjectionSpec(seed=1))
report = assess(damaged, WeightConfig(), datetime(2024, 1, 1, tzinfo=timezone.utc))
for name, score in report.metric_scores.items():
    print(f"  {name:<22}{score:8.2f}")
for name, score in report.aspect_scores.items():
    print(f"  aspect {name:<15}{score:8.2f}")
print(f"global quality {report.global_score:.2f}")
