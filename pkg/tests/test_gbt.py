import numpy as np
import pytest

from dqengine.errors import EmptyTraining, ValidationError
from dqengine.gbt import (
    GbtParams,
    bin_contains,
    bin_label,
    gbt_predict,
    gbt_predict_many,
    gbt_train,
)


def test_constant_target():
    rows = [{"x": i, "y": "same"} for i in range(20)]
    m = gbt_train(rows, ["x"], "y")
    assert gbt_predict(m, {"x": 3}).value == "same"
    assert gbt_predict(m, {"x": 999}).value == "same"


def test_single_feature_function_fits_exactly():
    rows = [{"f": c, "y": {"a": "red", "b": "green", "c": "blue"}[c]} for c in "abc" * 30]
    m = gbt_train(rows, ["f"], "y", GbtParams(rounds=30))
    assert all(p.value == r["y"] for p, r in zip(gbt_predict_many(m, rows), rows))


def test_two_feature_interaction():
    rng = np.random.default_rng(0)
    rows = [{"a": int(a), "b": int(b), "y": str((a + b) % 3)}
            for a, b in rng.integers(0, 4, (600, 2))]
    m = gbt_train(rows, ["a", "b"], "y", GbtParams(rounds=40), task="categorical")
    acc = np.mean([p.value == r["y"] for p, r in zip(gbt_predict_many(m, rows), rows)])
    assert acc == 1.0


def test_loss_non_increasing_without_dropout():
    rng = np.random.default_rng(1)
    rows = [{"x": float(v), "z": float(w), "y": float(np.sin(v) + w ** 2)}
            for v, w in rng.normal(size=(300, 2))]
    m = gbt_train(rows, ["x", "z"], "y", GbtParams(rounds=50, dropout_rate=0.0),
                  task="regression")
    h = np.asarray(m.history)
    assert np.all(np.diff(h) <= 1e-12)
    assert h[-1] < h[0]


def test_gender_abbreviation_maps_to_full_form():
    rows = ([{"title": "Mr", "g": "Male"}] * 30 + [{"title": "Mrs", "g": "Female"}] * 30
            + [{"title": "Ms", "g": "Female"}] * 10)
    m = gbt_train(rows, ["title"], "g")
    assert gbt_predict(m, {"title": "Mr"}).value == "Male"


def test_binned_cohort_prediction():
    # three age cohorts, one per decade; the young cohort is centred at 25
    rng = np.random.default_rng(2)
    rows = []
    for cohort, lo in (("young", 20), ("middle", 40), ("old", 60)):
        rows += [{"c": cohort, "age": float(a)} for a in rng.uniform(lo, lo + 10, 200)]
    m = gbt_train(rows, ["c"], "age", GbtParams(rounds=30), bins=3)
    p = gbt_predict(m, {"c": "young"})
    assert bin_contains(p.label, 27.0)
    assert p.label.startswith("[") and p.label.endswith((")", "]"))
    lo, hi = (float(x) for x in p.label[1:-1].split(","))
    assert 20 <= lo < 21 and 29 < hi < 41
    assert gbt_predict(m, {"c": "old"}).label.endswith("]")


def test_confidence_and_determinism():
    rng = np.random.default_rng(3)
    rows = [{"a": str(a), "y": "p" if a else "q"} for a in rng.integers(0, 2, 100)]
    m1 = gbt_train(rows, ["a"], "y")
    m2 = gbt_train(rows, ["a"], "y")
    assert m1.model_id == m2.model_id
    for p in gbt_predict_many(m1, rows):
        assert 0 <= p.confidence <= 1


def test_unseen_and_missing_features():
    rows = [{"a": "x", "n": 1.0, "y": "u"}, {"a": "z", "n": 2.0, "y": "v"}] * 10
    m = gbt_train(rows, ["a", "n"], "y")
    assert gbt_predict(m, {"a": "never", "n": None}).value in ("u", "v")
    assert gbt_predict(m, {}).value in ("u", "v")


def test_tie_break_is_lexicographic():
    rows = [{"y": "b"}, {"y": "a"}]
    m = gbt_train(rows, [], "y")
    assert gbt_predict(m, {}).value == "a"


def test_errors():
    with pytest.raises(EmptyTraining):
        gbt_train([], ["x"], "y")
    with pytest.raises(EmptyTraining):
        gbt_train([{"x": 1, "y": None}], ["x"], "y")
    with pytest.raises(ValidationError):
        gbt_train([{"x": 1, "y": "a"}], ["x"], "y", task="binned")


def test_bin_labels():
    assert bin_label(0, 10) == "[0,10)"
    assert bin_label(0, 10, closed=True) == "[0,10]"
    assert bin_contains("[0,10)", 0) and not bin_contains("[0,10)", 10)
    assert bin_contains("[0,10]", 10)
