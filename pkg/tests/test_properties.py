"""Property tests for the invariants each component promises."""

import string
from fractions import Fraction

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from dqengine.anomaly import DetectionConfig, detect, global_anomaly_score
from dqengine.assessment import (
    WeightConfig,
    completeness,
    field_weights,
    global_score,
    uniqueness,
)
from dqengine.correction import ChangeLogEntry, correct_all, evaluate_correction
from dqengine.eif import eif_score, eif_train
from dqengine.entity_resolution import FeatureSpace, clusters_from_pairs, pair_features
from dqengine.gbt import GbtParams, bin_contains, gbt_predict_many, gbt_train
from dqengine.synth import GroundTruth, TruthEntry
from dqengine.table import (
    PreprocessOptions,
    ValueKind,
    cell_kind,
    diff_count,
    preprocess,
)

from conftest import make_table

SETTINGS = settings(max_examples=40, deadline=None,
                    suppress_health_check=[HealthCheck.too_slow])
SLOW = settings(max_examples=12, deadline=None, suppress_health_check=[HealthCheck.too_slow])

words = st.text(alphabet=string.ascii_letters + " -'.", min_size=0, max_size=12)
cell = st.one_of(st.just(""), words, st.integers(-999, 999).map(str))


@st.composite
def tables(draw, min_rows=1, max_rows=12, max_cols=4):
    n_cols = draw(st.integers(1, max_cols))
    n_rows = draw(st.integers(min_rows, max_rows))
    rows = draw(st.lists(st.lists(cell, min_size=n_cols, max_size=n_cols),
                         min_size=n_rows, max_size=n_rows))
    return make_table([f"c{i}" for i in range(n_cols)], rows)


# assessment

@SETTINGS
@given(st.dictionaries(st.text(string.ascii_lowercase, min_size=1, max_size=5),
                       st.integers(1, 10), min_size=1, max_size=12))
def test_field_weights_sum_to_exactly_one(factors):
    w = field_weights(factors)
    assert sum(w.values()) == Fraction(1)
    assert all(isinstance(v, Fraction) and v > 0 for v in w.values())
    # scaling every factor by the same amount leaves the weights alone
    if max(factors.values()) <= 5:
        assert field_weights({k: 2 * v for k, v in factors.items()}) == w


@SETTINGS
@given(st.lists(st.floats(0, 100), min_size=5, max_size=5), st.integers(0, 4))
def test_global_score_renormalizes_and_stays_bounded(vals, drop):
    names = ["reliability", "availability", "pertinence", "validity", "usability"]
    aspects = dict(zip(names, vals))
    cfg = WeightConfig()
    g = global_score(aspects, cfg)
    assert min(vals) - 1e-9 <= g <= max(vals) + 1e-9
    # an unscored aspect drops out and the remaining weights are rescaled
    rest = {a: v for a, v in aspects.items() if a != names[drop]}
    w = {a: cfg.aspect_weights[a] for a in rest}
    expected = sum(w[a] * rest[a] for a in rest) / sum(w.values())
    assert abs(global_score(rest, cfg, strict=False) - expected) < 1e-9


@SETTINGS
@given(tables(), st.data())
def test_completeness_never_rises_when_a_value_goes_missing(t, data):
    r = data.draw(st.integers(0, t.n_rows - 1))
    c = data.draw(st.sampled_from(t.names))
    assert completeness(t.with_values({(r, c): None})) <= completeness(t)


@SETTINGS
@given(tables(), st.data())
def test_uniqueness_never_rises_when_a_row_is_duplicated(t, data):
    r = data.draw(st.integers(0, t.n_rows - 1))
    assert uniqueness(t.append_rows([t.row(r)])) <= uniqueness(t)


# table core

@SETTINGS
@given(st.one_of(st.none(), st.text(max_size=20)))
def test_cell_kind_is_total(raw):
    assert isinstance(cell_kind(raw), ValueKind)


@st.composite
def same_shape_triples(draw):
    n_rows, n_cols = draw(st.integers(1, 8)), draw(st.integers(1, 3))
    grid = st.lists(st.lists(st.sampled_from(["", "a", "b", "1"]), min_size=n_cols,
                             max_size=n_cols), min_size=n_rows, max_size=n_rows)
    header = [f"c{i}" for i in range(n_cols)]
    return tuple(make_table(header, draw(grid)) for _ in range(3))


@SETTINGS
@given(same_shape_triples())
def test_diff_count_is_a_metric(abc):
    a, b, c = abc
    assert diff_count(a, a) == 0
    assert diff_count(a, b) == diff_count(b, a)
    assert diff_count(a, c) <= diff_count(a, b) + diff_count(b, c)


@SETTINGS
@given(tables(), st.booleans(), st.booleans(), st.booleans())
def test_preprocess_is_idempotent(t, lower, symbols, nulls):
    opts = PreprocessOptions(lowercase=lower, strip_symbols=symbols, normalize_nulls=nulls)
    once = preprocess(t, opts)
    assert preprocess(once, opts).rows() == once.rows()


# entity resolution

SPACE = FeatureSpace(("s", "n"), ("text", "number"), (1.0, 100.0), (0.5, 0.5))
records = st.fixed_dictionaries({"s": st.one_of(st.none(), words),
                                 "n": st.one_of(st.none(), st.floats(-100, 100))})


@SETTINGS
@given(records, records)
def test_pair_features_symmetric_and_bounded(a, b):
    f = pair_features(a, b, SPACE)
    assert f == pair_features(b, a, SPACE)
    assert all(0.0 <= x <= 1.0 for x in f)


@SETTINGS
@given(st.lists(st.tuples(st.integers(0, 30), st.integers(0, 30)), max_size=25))
def test_clusters_partition_and_close_transitively(pairs):
    pairs = [(a, b) for a, b in pairs if a != b]
    clusters = clusters_from_pairs(pairs)
    seen = [r for c in clusters for r in c]
    assert len(seen) == len(set(seen))
    where = {r: i for i, c in enumerate(clusters) for r in c}
    for a, b in pairs:
        assert where[a] == where[b]
    assert all(len(c) >= 2 for c in clusters)


# detection

@SETTINGS
@given(st.dictionaries(st.sampled_from(["A", "B", "C", "D"]), st.floats(0, 100), min_size=1),
       st.randoms(use_true_random=False))
def test_global_anomaly_score_permutation_invariant_and_bounded(scores, rnd):
    weights = {k: 1.0 for k in scores}
    keys = list(scores)
    rnd.shuffle(keys)
    g = global_anomaly_score(scores, weights)
    assert abs(global_anomaly_score({k: scores[k] for k in keys}, weights) - g) < 1e-9
    assert min(scores.values()) - 1e-9 <= g <= max(scores.values()) + 1e-9


@SLOW
@given(st.integers(0, 2**16), st.integers(2, 4))
def test_eif_scores_in_unit_interval_and_deterministic(seed, dim):
    x = np.random.default_rng(seed).normal(size=(120, dim))
    f = eif_train(x, 10, 64, seed=seed)
    s = eif_score(f, x)
    assert np.all((s > 0) & (s <= 1))
    assert np.array_equal(s, eif_score(eif_train(x, 10, 64, seed=seed), x))


# gbt

@SLOW
@given(st.integers(0, 2**16))
def test_gbt_loss_monotone_without_dropout(seed):
    rng = np.random.default_rng(seed)
    rows = [{"x": float(a), "y": float(2 * a + rng.normal())} for a in rng.normal(size=80)]
    m = gbt_train(rows, ["x"], "y", GbtParams(rounds=15, dropout_rate=0.0, seed=seed),
                  task="regression")
    assert np.all(np.diff(m.history) <= 1e-12)


@SLOW
@given(st.integers(0, 2**16))
def test_binned_predictions_stay_inside_training_range(seed):
    rng = np.random.default_rng(seed)
    rows = [{"g": str(g), "v": float(10 * g + rng.uniform(0, 10))}
            for g in rng.integers(0, 5, 120)]
    m = gbt_train(rows, ["g"], "v", GbtParams(rounds=10), bins=5)
    lo = min(r["v"] for r in rows)
    hi = max(r["v"] for r in rows)
    for p in gbt_predict_many(m, [{"g": str(g)} for g in range(6)]):
        a, b = (float(x) for x in p.label[1:-1].split(","))
        assert lo <= a < b <= hi
        assert bin_contains(p.label, p.value)


# correction

@st.composite
def damaged_tables(draw):
    n = draw(st.integers(30, 60))
    rng = np.random.default_rng(draw(st.integers(0, 2**16)))
    g = rng.integers(0, 3, n)
    rows = [[f"g{a}", f"h{a}", str(int(10 * a + rng.integers(0, 5)))] for a in g]
    cells = draw(st.sets(st.tuples(st.integers(0, n - 1), st.integers(0, 2)),
                         min_size=1, max_size=5))
    truth = []
    for r, c in sorted(cells):
        truth.append(TruthEntry(r, f"c{c}", "Completeness", rows[r][c]))
        rows[r][c] = ""
    t = make_table(["c0", "c1", "c2"], rows, {"c2": "Numeric"})
    return t, GroundTruth(truth)


@SLOW
@given(damaged_tables())
def test_correction_touches_only_reported_cells_and_reaches_a_fixpoint(case):
    t, truth = case
    cfg = DetectionConfig(dimensions=("Completeness",))
    rep = detect(t, cfg)
    out, log = correct_all(t, rep)
    reported = rep.cells()
    for name in t.names:
        for r in range(t.n_rows):
            if (r, name) not in reported:
                assert out[name].values[r] == t[name].values[r]
    assert {(e.row, e.column) for e in log} <= reported
    again, log2 = correct_all(out, detect(out, cfg))
    assert log2 == [] and again is out
    ev = evaluate_correction(log, truth)
    assert abs(ev["accuracy"] + ev["error_rate"] - 1.0) < 1e-12


@SETTINGS
@given(st.lists(st.booleans(), min_size=1, max_size=20))
def test_accuracy_and_error_rate_sum_to_one(outcomes):
    truth = GroundTruth([TruthEntry(i, "a", "Completeness", "x") for i in range(len(outcomes))])
    log = [ChangeLogEntry(i, "a", "Completeness", None, "x" if ok else "y", 1.0, "m")
           for i, ok in enumerate(outcomes)]
    ev = evaluate_correction(log, truth)
    assert ev["accuracy"] == sum(outcomes) / len(outcomes)
    assert abs(ev["accuracy"] + ev["error_rate"] - 1.0) < 1e-12
