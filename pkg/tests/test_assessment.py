import itertools
from datetime import timedelta
from fractions import Fraction

import pytest

from dqengine.assessment import (
    SecurityChecklist,
    WeightConfig,
    accessibility,
    aspect_scores,
    assess,
    completeness,
    conformity,
    conformity_by_field,
    consistency,
    ease_of_manipulation,
    field_weights,
    global_score,
    integrity,
    readability,
    relevancy,
    security,
    timeliness,
    timeliness_rows,
    uniqueness,
    volatility,
    volatility_rows,
)
from dqengine.errors import (
    BadClusterIndex,
    BadFactor,
    DegenerateAge,
    EmptyLexicon,
    EmptyTable,
    MissingAspect,
    MissingMetric,
    MissingRowMeta,
    NoAccessData,
    ShapeMismatch,
    ValidationError,
)
from dqengine.table import RowMeta
from dqengine.text import Lexicon

from conftest import NOW, make_table

FIELDS = ["First", "Last", "Age", "Address", "Email", "Phone", "City", "Country"]
SCORES = [90, 90, 80, 40, 30, 20, 65, 70]
FACTORS = {"First": 1, "Last": 1, "Age": 1, "Address": 3, "Email": 6, "Phone": 4, "City": 2,
           "Country": 2}


def table_with_completeness(scores, n=20):
    cols = [["v" if i < n * s // 100 else "" for i in range(n)] for s in scores]
    return make_table(FIELDS[:len(scores)], list(zip(*cols)))


def test_worked_completeness():
    t = table_with_completeness(SCORES)
    assert round(completeness(t), 2) == 60.62
    w = WeightConfig(field_factors=FACTORS).weights_for(t.names)
    assert completeness(t, w) == pytest.approx(45.5, abs=1e-9)


def test_field_weights_examples():
    w = field_weights(FACTORS)
    assert [w[f] for f in FIELDS] == [Fraction(1, 20)] * 3 + [
        Fraction(3, 20), Fraction(3, 10), Fraction(1, 5), Fraction(1, 10), Fraction(1, 10)]
    assert sum(w.values()) == 1
    assert set(field_weights({"a": 4, "b": 4, "c": 4}).values()) == {Fraction(1, 3)}
    assert field_weights({"only": 7}) == {"only": 1}


@pytest.mark.parametrize("bad", [{"a": 0}, {"a": 11}, {"a": 2.5}, {}, {"a": True}])
def test_field_weights_rejects(bad):
    with pytest.raises(BadFactor):
        field_weights(bad)


def test_weight_config_validation():
    with pytest.raises(ValidationError):
        WeightConfig(aspect_weights={"reliability": 0.5})
    with pytest.raises(ValidationError):
        WeightConfig(metric_weights={"validity": {"conformity": 0.3}})
    with pytest.raises(ValidationError):
        WeightConfig(metric_weights={"validity": {"bogus": 1.0}})


def test_completeness_full_and_empty():
    assert completeness(make_table(["a"], [["x"], ["y"]])) == 100.0
    with pytest.raises(EmptyTable):
        completeness(make_table(["a"], []))


def test_uniqueness_examples():
    assert uniqueness(make_table(["a"], [["x"], ["x"], ["y"], ["z"]])) == 75.0
    assert uniqueness(make_table(["a"], [["x"]] * 10)) == 10.0
    assert uniqueness(make_table(["a"], [["x"], ["y"]])) == 100.0


def test_consistency_examples():
    t = make_table(list("abcde"), [[1, 2, 3, 4, 5], [1, 2, 3, 4, 9]])
    assert consistency(t, [[0, 1]]) == 80.0
    assert consistency(make_table(["a"], [["x"], ["x"]]), [[0, 1]]) == 100.0
    t2 = make_table(list("abcde"), [[1, 2, 3, 4, 5], [1, 2, 3, 0, 0], [7, 7, 7, 7, 7],
                                    [7, 7, 7, 7, 7]])
    assert consistency(t2, [[0, 1], [2, 3]]) == 80.0
    assert consistency(t2, []) == 100.0
    with pytest.raises(BadClusterIndex):
        consistency(t2, [[0, 9]])
    with pytest.raises(BadClusterIndex):
        consistency(t2, [[0]])


def test_conformity_examples():
    rows = [[str(i)] for i in range(8)] + [["abc"], ["def"]]
    t = make_table(["n"], rows, {"n": "Numeric"})
    assert conformity_by_field(t)["n"] == 80.0
    d = make_table(["d"], [["2020-01-01"], ["13/45/9999"]], {"d": "Date"})
    assert conformity(d) == 50.0
    ok = make_table(["n", "s"], [["1", "x"], ["2", "y"]], {"n": "Numeric"})
    assert conformity(ok) == 100.0


def meta_table(pairs):
    meta = [RowMeta(NOW - timedelta(days=c), NOW - timedelta(days=m)) for c, m in pairs]
    return make_table(["a"], [["x"]] * len(pairs), None, meta)


def test_timeliness_and_volatility_examples():
    assert timeliness(meta_table([(10, 0)]), NOW) == 0.0
    assert timeliness(meta_table([(10, 10)]), NOW) == 100.0
    assert timeliness(meta_table([(10, 5)]), NOW) == 50.0
    assert volatility(meta_table([(10, 10)]), NOW) == 0.0
    assert volatility(meta_table([(10, 5)]), NOW) == -50.0
    t = meta_table([(10, 3), (7, 1), (365, 200)])
    for tr, vr in zip(timeliness_rows(t, NOW), volatility_rows(t, NOW)):
        assert vr == tr - 100
    assert timeliness(t, NOW, complement=True) == pytest.approx(100 - timeliness(t, NOW))


def test_timeliness_errors():
    with pytest.raises(MissingRowMeta):
        timeliness(make_table(["a"], [["x"]]), NOW)
    with pytest.raises(DegenerateAge):
        timeliness(meta_table([(0, 0)]), NOW)
    # rows created at "now" are skipped when others exist
    assert timeliness(meta_table([(0, 0), (10, 5)]), NOW) == 50.0


def test_readability_examples():
    lex = Lexicon(["montreal", "paris", "london"])
    t = make_table(["city"], [["Montreal"]] * 7 + [["Moreal"], ["Lndon"], ["Pariss"]])
    assert readability(t, lex) == 70.0
    assert readability(make_table(["city"], [["Paris"]]), lex) == 100.0
    with pytest.raises(EmptyLexicon):
        Lexicon([])


def test_ease_and_integrity_examples():
    t = make_table(list("abcde"), [[i] * 5 for i in range(20)])
    assert ease_of_manipulation(t, t) == 100.0
    changed = t.with_values({(r, "a"): "x" for r in range(20)} | {(r, "b"): "x" for r in range(5)})
    assert ease_of_manipulation(t, changed) == 75.0
    assert ease_of_manipulation(t, changed, literal_formula=True) == 25.0
    everything = t.with_values({(r, c): "z" for r in range(20) for c in "abcde"})
    assert ease_of_manipulation(t, everything) == 0.0
    small = make_table(list("ab"), [[i, i] for i in range(5)])
    assert integrity(small, small) == 100.0
    assert integrity(small, small.with_values({(0, "a"): "q"})) == 90.0
    assert integrity(small, small.with_values({(r, c): "q" for r in range(5) for c in "ab"})) == 0
    with pytest.raises(ShapeMismatch):
        integrity(small, small.take([0]))


def test_relevancy_examples():
    t = make_table(list("abcd"), [[1, 2, 3, 4]]).with_metadata({"a": 10})
    assert relevancy(t) == 25.0
    eq = make_table(list("abcd"), [[1, 2, 3, 4]]).with_metadata(dict.fromkeys("abcd", 3))
    assert relevancy(eq, {"a": 1.0}) == 25.0
    with pytest.raises(NoAccessData):
        relevancy(make_table(["a"], [[1]]))


def test_security_all_states():
    for states in itertools.product([False, True], repeat=5):
        assert security(SecurityChecklist(*states)) == 20 * sum(states)


def test_accessibility_examples():
    t = make_table(list("abcd"), [[1, 2, 3, 4]] * 3)
    assert accessibility(t) == 100.0
    assert accessibility(t.with_metadata(accessible={"a": False})) == 75.0
    assert accessibility(t.with_metadata(accessible=dict.fromkeys("abcd", False))) == 0.0


def test_aspect_and_global_examples():
    cfg = WeightConfig()
    assert aspect_scores({"security": 50, "accessibility": 100}, cfg, strict=False)[
        "availability"] == pytest.approx(60.0)
    scores = dict.fromkeys(["completeness", "uniqueness", "consistency", "conformity",
                            "timeliness", "volatility", "readability", "ease_of_manipulation",
                            "relevancy", "security", "accessibility", "integrity"], 42.0)
    assert all(v == pytest.approx(42.0) for v in aspect_scores(scores, cfg).values())
    aspects = {"reliability": 80, "availability": 60, "pertinence": 70, "validity": 50,
               "usability": 90}
    assert global_score(aspects, cfg) == pytest.approx(70.0)
    assert global_score(dict.fromkeys(aspects, 58.35), cfg) == pytest.approx(58.35)
    uniform = WeightConfig(aspect_weights=dict.fromkeys(aspects, 0.2))
    assert global_score(aspects, uniform) == pytest.approx(70.0)
    with pytest.raises(MissingMetric):
        aspect_scores({"security": 50}, cfg)
    with pytest.raises(MissingAspect):
        global_score({"validity": 50}, cfg)


def test_assess_report(people):
    rep = assess(people, WeightConfig(), NOW, checklist=SecurityChecklist(True, True, True))
    assert rep.metric_scores["security"] == 60.0
    assert rep.metric_scores["completeness"] == pytest.approx(100 * 18 / 20)
    assert "relevancy" in rep.unavailable
    d = rep.to_dict()
    assert set(d) >= {"metrics", "aspects", "global", "weights", "evaluated_at"}
    assert d["evaluated_at"] == "2024-01-01T00:00:00Z"
    with pytest.raises(MissingMetric):
        assess(people, WeightConfig(), NOW, strict=True)
