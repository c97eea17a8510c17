"""
Correcting what was found
=========================

Each flagged cell is re-predicted by gradient-boosted trees trained on the
rows around it, using only the columns associated with the target. Every
change is logged.
"""

import numpy as np

from dqengine.anomaly import DetectionConfig, detect
from dqengine.correction import correct_all, correlated_features, evaluate_correction
from dqengine.synth import GroundTruth, TruthEntry
from dqengine.table import Table

# the colour is a function of the pair (A, B); N is noise
rng = np.random.default_rng(0)
n = 3000
a, b, noise = rng.choice(list("abcd"), n), rng.choice(list("xyz"), n), rng.choice(list("pq"), n)
rule = {(x, y): ["red", "green", "blue"][(i + j) % 3]
        for i, x in enumerate("abcd") for j, y in enumerate("xyz")}
rows = [[x, y, z, rule[(x, y)]] for x, y, z in zip(a, b, noise)]

# blank 100 colours and remember what they were
truth = []
for r in rng.choice(n, 100, replace=False):
    truth.append(TruthEntry(int(r), "Colour", "Completeness", rows[r][3]))
    rows[r][3] = ""
t = Table.from_rows(["A", "B", "N", "Colour"], rows)
print("features kept for Colour:", correlated_features(t, "Colour"))

report = detect(t, DetectionConfig(dimensions=("Completeness",)))
fixed, log = correct_all(t, report)
print(f"{len(log)} cells filled, for example:", log[0])
score = evaluate_correction(log, GroundTruth(truth))
print(f"accuracy against the blanked values {score['accuracy']:.3f}")
