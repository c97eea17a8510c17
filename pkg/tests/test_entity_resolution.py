import warnings

import numpy as np
import pytest

from dqengine.entity_resolution import (
    BlockingPredicate,
    CandidatePairs,
    ERConfig,
    FeatureSpace,
    MatchModel,
    TrainingSet,
    auto_label,
    cluster_f_score,
    clusters_from_pairs,
    continual_update,
    fit_model,
    learn_predicates,
    merge_cluster,
    pair_features,
    pairwise_f_score,
    resolve,
    sorted_neighborhood,
    train_classifier,
)
from dqengine.errors import (
    CoverageUnreachable,
    EmptyTrainingSet,
    MissingSourceRank,
    SingleClassTraining,
    ValidationError,
    WindowTooLarge,
)
from dqengine.synth import InjectionSpec, generate_base, inject

from conftest import make_table

CLEAN = dict(missing=0, outlier=0, nonconforming=0, misspell=0)


def letters(n):
    return make_table(["k"], [[chr(ord("a") + i)] for i in range(n)])


def test_sorted_neighborhood_examples():
    assert len(sorted_neighborhood(letters(5), ["k"], 3)) == 7
    p = sorted_neighborhood(letters(5), ["k"], 3).pairs()
    assert p == [(0, 1), (0, 2), (1, 2), (1, 3), (2, 3), (2, 4), (3, 4)]
    assert len(sorted_neighborhood(letters(6), ["k"], 2)) == 5
    assert len(sorted_neighborhood(letters(6), ["k"], 6)) == 15
    with pytest.raises(WindowTooLarge):
        sorted_neighborhood(letters(3), ["k"], 4)
    with pytest.raises(ValidationError):
        sorted_neighborhood(letters(3), [], 2)


def test_sorted_neighborhood_sorts_by_normalized_key():
    t = make_table(["k"], [["b"], ["Z!"], ["a"], ["c"]])
    # sorted order a, b, c, z -> adjacent pairs (2,0), (0,3), (3,1)
    assert sorted(sorted_neighborhood(t, ["k"], 2).pairs()) == [(0, 2), (0, 3), (1, 3)]


def space(kinds=("text", "number"), ranges=(1.0, 10.0)):
    return FeatureSpace(("s", "n"), kinds, ranges, (0.5, 0.5))


def test_pair_features_examples():
    sp = space()
    assert pair_features({"s": "john smith", "n": 10.0}, {"s": "john smith", "n": 10.0}, sp) == (
        1.0, 1.0)
    f = pair_features({"s": "abc", "n": 0.0}, {"s": "xyz", "n": 10.0}, sp)
    assert f == (0.0, 0.0)
    assert pair_features({"s": None, "n": None}, {"s": "a", "n": 1.0}, sp) == (0.0, 0.0)


def test_auto_label_examples():
    pairs = CandidatePairs(np.arange(3), np.arange(1, 4), np.zeros((3, 1)),
                           np.array([0.95, 0.5, 0.1]))
    kept, labels = auto_label(pairs, 0.2, 0.9)
    assert kept.pairs() == [(0, 1), (2, 3)]
    assert labels.tolist() == [1, 0]
    exact = CandidatePairs(np.arange(3), np.arange(1, 4), np.zeros((3, 1)),
                           np.array([1.0, 0.99, 0.0]))
    kept, labels = auto_label(exact, 0.0, 1.0)
    assert labels.tolist() == [1, 0]
    with pytest.raises(EmptyTrainingSet):
        auto_label(pairs.subset(np.array([False, True, False])), 0.2, 0.9)
    with pytest.raises(ValidationError):
        auto_label(pairs, 0.9, 0.2)


def training(keys_a, keys_b, y, X=None):
    X = np.asarray(X if X is not None else [[float(v)] for v in y], float)
    return TrainingSet(("name",), [(k,) for k in keys_a], [(k,) for k in keys_b], X,
                       np.asarray(y))


def test_learn_predicates_common_tokens():
    ts = training(["john a smith", "mary k jones", "ann lee ray"],
                  ["john smith", "mary jones", "ann ray"], [1, 1, 1])
    preds = learn_predicates(ts, 1.0)
    assert len(preds) == 1
    cover = [all(p(a[0], b[0]) for p in preds[0]) for a, b in zip(ts.keys_a, ts.keys_b)]
    assert all(cover)
    assert preds[0][0].kind == "common_tokens" and preds[0][0].k == 2


def test_learn_predicates_exact_duplicates_and_no_negatives():
    ts = training(["alpha", "beta"], ["alpha", "beta"], [1, 1])
    preds = learn_predicates(ts, 1.0)
    assert all(p("alpha", "alpha") for p in preds[0])
    with pytest.raises(EmptyTrainingSet):
        learn_predicates(training(["a"], ["b"], [0]))


def test_learn_predicates_unreachable_warns():
    ts = training(["aaa"], ["zzz"], [1])
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        assert learn_predicates(ts, 1.0) == []
    assert any(issubclass(x.category, CoverageUnreachable) for x in w)


def test_blocking_predicate_semantics():
    assert BlockingPredicate("common_tokens", "n", 2)("a b c", "c b")
    assert not BlockingPredicate("common_tokens", "n", 2)("a b", "a c")
    assert BlockingPredicate("same_prefix", "n", 3)("abcdef", "abcxyz")
    assert not BlockingPredicate("exact", "n")("", "")
    with pytest.raises(ValidationError):
        BlockingPredicate("soundex", "n")


def test_train_classifier_separable_and_deterministic():
    X = np.r_[np.full((20, 2), 0.95), np.full((20, 2), 0.05)]
    y = np.r_[np.ones(20, int), np.zeros(20, int)]
    ts = TrainingSet(("a", "b"), [("x", "x")] * 40, [("x", "x")] * 40, X, y)
    m = train_classifier(ts, seed=3)
    assert (m.probability(X) >= m.match_threshold).tolist() == y.astype(bool).tolist()
    m2 = train_classifier(ts, seed=3)
    assert m.weights == m2.weights and m.bias == m2.bias
    assert m.probability([[0.9, 0.9]])[0] > m.probability([[0.1, 0.1]])[0]
    with pytest.raises(SingleClassTraining):
        train_classifier(TrainingSet(("a",), [], [], np.ones((3, 1)), np.ones(3, int)))


def test_clusters_transitive_and_empty():
    assert clusters_from_pairs([(0, 1), (1, 2)]) == [[0, 1, 2]]
    assert clusters_from_pairs([]) == []
    assert clusters_from_pairs([(5, 3), (1, 0)]) == [[0, 1], [3, 5]]


def test_merge_cluster_examples():
    t = make_table(["a", "b", "c"], [["x", "y", "z"], ["x", "y", "z"], ["x", "", ""],
                                     ["q", "y", "z"]])
    rec, retired = merge_cluster(t, [0, 1])
    assert rec == dict(zip(t.names, t.row(0))) and retired == [1]
    rec, retired = merge_cluster(t, [2, 3], "most_complete")
    assert rec["a"] == "q" and retired == [2]
    rec, _ = merge_cluster(t, [0, 1, 3], "fused")
    assert rec["a"] == "x"
    rec, retired = merge_cluster(t, [0, 3], "most_reliable", source_rank={0: 2, 3: 1})
    assert rec["a"] == "q" and retired == [0]
    with pytest.raises(MissingSourceRank):
        merge_cluster(t, [0, 1], "most_reliable")


def duplicated(n, seed, **kw):
    spec = InjectionSpec(duplicate=0.05, seed=seed, **CLEAN, **kw)
    return inject(generate_base(n, seed), spec)


def test_fit_and_resolve_on_synthetic_duplicates():
    t, truth = duplicated(2000, 5)
    model, ts = fit_model(t, ERConfig())
    clusters = resolve(t, model)
    assert cluster_f_score(clusters, truth.clusters())["f_score"] >= 0.9
    assert pairwise_f_score(clusters, truth.clusters())["f_score"] >= 0.9
    # deterministic and serializable
    again, _ = fit_model(t, ERConfig())
    assert again.to_dict() == model.to_dict()
    assert MatchModel.from_dict(model.to_dict()) == model


def test_exact_duplicates_always_resolved():
    base = generate_base(300, 2)
    t = base.append_rows([base.row(10), base.row(20)], base.row_meta[:2])
    model, _ = fit_model(t, ERConfig())
    clusters = resolve(t, model)
    assert any({10, 300} <= set(c) for c in clusters)
    assert any({20, 301} <= set(c) for c in clusters)


def test_continual_update_no_drift_keeps_quality():
    t, _ = duplicated(2000, 1)
    model, ts = fit_model(t, ERConfig())
    batch, _ = duplicated(1000, 2)
    r = continual_update(model, ts, batch)
    assert r.accepted and r.model.version == model.version + 1
    assert r.f_after >= r.f_before - 0.02
    assert r.n_new_positive > 0


def test_continual_update_operational_pairs():
    t, _ = duplicated(1000, 1)
    model, ts = fit_model(t, ERConfig())
    batch, truth = duplicated(600, 4)
    ops = list(truth.duplicate_map.items())[:5]
    r = continual_update(model, ts, batch, operational_pairs=ops)
    assert r.model.version in (model.version, model.version + 1)


def test_cluster_scores():
    assert cluster_f_score([[0, 1]], [[0, 1]])["f_score"] == 1.0
    assert cluster_f_score([], [[0, 1]])["f_score"] == 0.0
    assert pairwise_f_score([[0, 1, 2]], [[0, 1]])["recall"] == 1.0
