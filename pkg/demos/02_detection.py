"""
Finding anomalies
=================

Completeness, conformity and readability are binary per cell. Accuracy
outliers are isolated by an extended isolation forest, and duplicates come
from the learned matcher.
"""

import numpy as np

from dqengine.anomaly import DetectionConfig, detect, evaluate_detection
from dqengine.eif import eif_score, eif_train
from dqengine.synth import InjectionSpec, generate_base, inject

# the forest on its own: a Gaussian blob with one far point
rng = np.random.default_rng(0)
x = np.vstack([rng.normal(size=(1000, 2)), [[6.0, 6.0]]])
forest = eif_train(x, n_trees=100, sample_size=265, seed=0)
s = eif_score(forest, x)
print(f"far point score {s[-1]:.3f}, blob median {np.median(s[:-1]):.3f}")

# every dimension on a synthetic table with known truth
t, truth = inject(generate_base(10_000, seed=3), InjectionSpec(seed=4))
report = detect(t, DetectionConfig(seed=0))
print(f"{len(report.records)} anomaly records, global anomaly score {report.global_score:.2f}")
for dim, m in evaluate_detection(report, truth, t).items():
    if isinstance(m, dict) and "precision" in m:
        print(f"  {dim:<13} precision {m['precision']:.3f}  recall {m['recall']:.3f}")
