"""Fuzzy-duplicate detection.

Pipeline: sorted-neighborhood candidates -> per-field similarity features ->
dual-threshold auto labeling -> greedy blocking-predicate cover + logistic
match classifier -> predicate blocking and union-find clustering. A
:class:`MatchModel` is an immutable value; :func:`continual_update` returns a
new version.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field, replace
from datetime import datetime
from functools import lru_cache
from itertools import combinations

import numpy as np

from .errors import (
    CoverageUnreachable,
    EmptyTrainingSet,
    MissingSourceRank,
    SingleClassTraining,
    ValidationError,
    WindowTooLarge,
)
from .table import ValueKind, render_value, strip_symbols
from .text import TrigramIndex, trigram_cosine

log = logging.getLogger(__name__)

PREDICATE_KINDS = ("exact", "same_prefix", "common_tokens")
# most selective first; ties in the greedy cover resolve in this order
PREDICATE_LIBRARY = (
    ("exact", 0),
    ("same_prefix", 7),
    ("common_tokens", 3),
    ("same_prefix", 5),
    ("common_tokens", 2),
    ("same_prefix", 3),
    ("common_tokens", 1),
)
_MAX_KEY_TOKENS = 8


def normalize_key(value):
    if value is None:
        return ""
    if not isinstance(value, str):
        value = render_value(value)
    return _normalize_text(value)


@lru_cache(maxsize=1 << 18)
def _normalize_text(value):
    return " ".join(strip_symbols(value.lower()).split())


@dataclass(frozen=True)
class BlockingPredicate:
    kind: str
    field: str
    k: int = 0

    def __post_init__(self):
        if self.kind not in PREDICATE_KINDS:
            raise ValidationError(f"unknown predicate kind {self.kind!r}")

    @property
    def name(self):
        if self.kind == "exact":
            return f"exact({self.field})"
        if self.kind == "same_prefix":
            return f"same_prefix_{self.k}({self.field})"
        return f"common_{self.k}_tokens({self.field})"

    def __call__(self, x, y):
        """Evaluate on two normalized values."""
        if not x or not y:
            return False
        if self.kind == "exact":
            return x == y
        if self.kind == "same_prefix":
            return len(x) >= self.k and len(y) >= self.k and x[: self.k] == y[: self.k]
        return len(set(x.split()) & set(y.split())) >= self.k

    def keys(self, x):
        """Block keys of one normalized value; two values pass iff they share a key."""
        if not x:
            return ()
        if self.kind == "exact":
            return (x,)
        if self.kind == "same_prefix":
            return (x[: self.k],) if len(x) >= self.k else ()
        toks = sorted(set(x.split()))[:_MAX_KEY_TOKENS]
        if len(toks) < self.k:
            return ()
        return tuple(" ".join(c) for c in combinations(toks, self.k))

    def to_list(self):
        return [self.kind, self.field, self.k]


@dataclass(frozen=True)
class CandidatePair:
    row_a: int
    row_b: int
    features: tuple
    weighted_sim: float


@dataclass
class CandidatePairs:
    """Columnar batch of candidate pairs (``a < b``)."""

    a: np.ndarray
    b: np.ndarray
    features: np.ndarray | None = None
    weighted_sim: np.ndarray | None = None

    def __len__(self):
        return len(self.a)

    def __getitem__(self, i):
        feats = () if self.features is None else tuple(float(x) for x in self.features[i])
        ws = float("nan") if self.weighted_sim is None else float(self.weighted_sim[i])
        return CandidatePair(int(self.a[i]), int(self.b[i]), feats, ws)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def pairs(self):
        return list(zip(self.a.tolist(), self.b.tolist()))

    def subset(self, mask):
        return CandidatePairs(
            self.a[mask],
            self.b[mask],
            None if self.features is None else self.features[mask],
            None if self.weighted_sim is None else self.weighted_sim[mask],
        )


def _unique_pairs(a, b):
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    keep = lo != hi
    lo, hi = lo[keep], hi[keep]
    if len(lo) == 0:
        return lo, hi
    code = np.unique(lo * (int(hi.max()) + 1) + hi)
    base = int(hi.max()) + 1
    return code // base, code % base


def sorted_neighborhood(t, key_fields, window=10):
    """Candidate pairs from one sorted-neighborhood pass.

    Rows are sorted by the concatenation of the normalized key fields (ties by
    row index) and every pair of rows at most ``window - 1`` positions apart
    is emitted once.
    """
    if not key_fields:
        raise ValidationError("key_fields must be nonempty")
    if window < 2:
        raise ValidationError("window must be at least 2")
    n = t.n_rows
    if window > n:
        raise WindowTooLarge(f"window {window} exceeds {n} rows")
    cols = [t[f].values for f in key_fields]
    keys = [" ".join(normalize_key(c[i]) for c in cols) for i in range(n)]
    order = np.asarray(sorted(range(n), key=lambda i: (keys[i], i)), dtype=np.int64)
    a_parts, b_parts = [], []
    for d in range(1, window):
        a_parts.append(order[:-d])
        b_parts.append(order[d:])
    a = np.concatenate(a_parts)
    b = np.concatenate(b_parts)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    idx = np.lexsort((hi, lo))
    return CandidatePairs(lo[idx], hi[idx])


def multipass_sorted_neighborhood(t, passes, window=10):
    """Union of several sorted-neighborhood passes, deduplicated."""
    window = min(window, t.n_rows)
    if window < 2:
        return CandidatePairs(np.empty(0, np.int64), np.empty(0, np.int64))
    a_all, b_all = [], []
    for keys in passes:
        p = sorted_neighborhood(t, list(keys), window)
        a_all.append(p.a)
        b_all.append(p.b)
    a, b = _unique_pairs(np.concatenate(a_all), np.concatenate(b_all))
    return CandidatePairs(a, b)


# features

def _epoch_days(v):
    return v.timestamp() / 86400.0


@dataclass(frozen=True)
class FeatureSpace:
    """Field comparators: text -> trigram cosine, number -> 1-|dx|/range,
    date -> 1-|d days|/horizon, all clamped to [0, 1]. Missing on either
    side gives 0. A numeric range defaults to the field's interquartile range.
    """

    fields: tuple
    kinds: tuple
    ranges: tuple
    field_weights: tuple
    horizon_days: float = 3650.0

    @classmethod
    def from_table(cls, t, fields=None, field_weights=None, horizon_days=3650.0):
        fields = tuple(fields or t.names)
        kinds = []
        ranges = []
        for f in fields:
            col = t[f]
            if col.declared_kind is ValueKind.NUMERIC:
                kinds.append("number")
                arr = col.numeric_array()
                arr = arr[np.isfinite(arr)]
                if len(arr):
                    # interquartile range: robust to outliers and sharp enough that
                    # unrelated records score low on the field
                    lo, hi = np.quantile(arr, [0.25, 0.75])
                    span = float(hi - lo) or float(arr.max() - arr.min()) or 1.0
                else:
                    span = 1.0
                ranges.append(span)
            elif col.declared_kind is ValueKind.DATE:
                kinds.append("date")
                ranges.append(float(horizon_days))
            else:
                kinds.append("text")
                ranges.append(1.0)
        if field_weights is None:
            w = [1.0 / len(fields)] * len(fields)
        else:
            raw = [float(field_weights.get(f, 0.0)) for f in fields]
            total = sum(raw)
            if total <= 0:
                raise ValidationError("field weights must not all be zero")
            w = [x / total for x in raw]
        return cls(fields, tuple(kinds), tuple(ranges), tuple(w), float(horizon_days))

    def to_dict(self):
        return {
            "fields": list(self.fields),
            "kinds": list(self.kinds),
            "ranges": list(self.ranges),
            "field_weights": list(self.field_weights),
            "horizon_days": self.horizon_days,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["fields"]), tuple(d["kinds"]), tuple(d["ranges"]),
                   tuple(d["field_weights"]), float(d["horizon_days"]))


def _field_sim(kind, span, x, y):
    if x is None or y is None:
        return 0.0
    if kind == "text":
        sx = x if isinstance(x, str) else render_value(x)
        sy = y if isinstance(y, str) else render_value(y)
        return trigram_cosine(sx, sy)
    if kind == "number":
        if not isinstance(x, float) or not isinstance(y, float):
            return 0.0
        return float(min(1.0, max(0.0, 1.0 - abs(x - y) / span)))
    if not isinstance(x, datetime) or not isinstance(y, datetime):
        return 0.0
    return float(min(1.0, max(0.0, 1.0 - abs(_epoch_days(x) - _epoch_days(y)) / span)))


def pair_features(a, b, space):
    """Similarity vector of two records given as ``{field: value}`` mappings."""
    return tuple(
        _field_sim(kind, span, a.get(f), b.get(f))
        for f, kind, span in zip(space.fields, space.kinds, space.ranges)
    )


class PairFeaturizer:
    """Vectorized :func:`pair_features` over row pairs of one table."""

    def __init__(self, t, space):
        self.space = space
        self._cols = []
        for f, kind in zip(space.fields, space.kinds):
            values = t[f].values
            if kind == "text":
                strings = [None if v is None else (v if isinstance(v, str) else render_value(v))
                           for v in values]
                self._cols.append(TrigramIndex(strings))
            elif kind == "number":
                self._cols.append(np.fromiter(
                    (v if isinstance(v, float) else np.nan for v in values), float, len(values)))
            else:
                self._cols.append(np.fromiter(
                    (_epoch_days(v) if isinstance(v, datetime) else np.nan for v in values),
                    float, len(values)))

    def features(self, a, b):
        a = np.asarray(a, dtype=np.int64)
        b = np.asarray(b, dtype=np.int64)
        out = np.zeros((len(a), len(self.space.fields)))
        for j, (kind, span, col) in enumerate(zip(self.space.kinds, self.space.ranges, self._cols)):
            if kind == "text":
                out[:, j] = col.pair_cosine(a, b)
            else:
                x, y = col[a], col[b]
                sim = 1.0 - np.abs(x - y) / span
                sim = np.where(np.isnan(sim), 0.0, sim)
                out[:, j] = np.clip(sim, 0.0, 1.0)
        return out

    def score(self, pairs):
        feats = self.features(pairs.a, pairs.b)
        w = np.asarray(self.space.field_weights)
        return CandidatePairs(pairs.a, pairs.b, feats, np.clip(feats @ w, 0.0, 1.0))


# labeled training data

@dataclass
class TrainingSet:
    """Labeled pairs with the normalized field values predicates need."""

    fields: tuple
    keys_a: list
    keys_b: list
    X: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)

    @classmethod
    def empty(cls, fields):
        return cls(tuple(fields), [], [], np.zeros((0, len(fields))), np.zeros(0, dtype=int))

    @classmethod
    def from_pairs(cls, t, pairs, labels, fields):
        keys = [[normalize_key(v) for v in t[f].values] for f in fields]
        ka = [tuple(k[i] for k in keys) for i in pairs.a.tolist()]
        kb = [tuple(k[i] for k in keys) for i in pairs.b.tolist()]
        return cls(tuple(fields), ka, kb, np.asarray(pairs.features, float),
                   np.asarray(labels, dtype=int))

    def concat(self, other):
        if self.fields != other.fields:
            raise ValidationError("training sets over different fields")
        return TrainingSet(self.fields, self.keys_a + other.keys_a, self.keys_b + other.keys_b,
                           np.vstack([self.X, other.X]), np.concatenate([self.y, other.y]))

    def take(self, idx):
        idx = list(idx)
        return TrainingSet(self.fields, [self.keys_a[i] for i in idx],
                           [self.keys_b[i] for i in idx], self.X[idx], self.y[idx])


def auto_label(pairs, lo=0.3, hi=0.9):
    """Label by weighted similarity: ``>= hi`` positive, ``<= lo`` negative.

    Returns ``(kept_pairs, labels)``; pairs strictly between the thresholds
    are discarded.
    """
    if not 0 <= lo < hi <= 1:
        raise ValidationError(f"need 0 <= lo < hi <= 1, got lo={lo}, hi={hi}")
    sim = np.asarray(pairs.weighted_sim)
    pos = sim >= hi
    neg = sim <= lo
    keep = pos | neg
    if not keep.any():
        raise EmptyTrainingSet("no pair cleared either labeling threshold")
    return pairs.subset(keep), pos[keep].astype(int)


# predicates

def predicate_library(fields, kinds=None):
    out = []
    for f_idx, f in enumerate(fields):
        for kind, k in PREDICATE_LIBRARY:
            if kinds is not None and kinds[f_idx] != "text" and kind != "exact":
                continue
            out.append(BlockingPredicate(kind, f, k))
    return out


def _coverage(pred, fields, keys_a, keys_b):
    j = fields.index(pred.field)
    return np.fromiter((pred(x[j], y[j]) for x, y in zip(keys_a, keys_b)), bool, len(keys_a))


def conjunction_covers(conj, fields, keys_a, keys_b):
    mask = np.ones(len(keys_a), dtype=bool)
    for p in conj:
        mask &= _coverage(p, fields, keys_a, keys_b)
    return mask


def learn_predicates(training, target_recall=0.95, max_depth=3, max_neg_fraction=0.01,
                     kinds=None):
    """Greedy cover of the positive pairs by predicate conjunctions.

    Each step takes the conjunction (depth <= ``max_depth``) that covers the
    most still-uncovered positives among those admitting at most
    ``max_neg_fraction`` of the negatives; ties go to fewer negatives, then
    shallower conjunctions, then library order. Stops once coverage reaches
    ``target_recall``. If it cannot, a :class:`CoverageUnreachable` warning is
    issued and the best-effort cover returned.
    """
    y = np.asarray(training.y)
    if not (y == 1).any():
        raise EmptyTrainingSet("predicate learning needs at least one positive pair")
    fields = list(training.fields)
    lib = predicate_library(fields, kinds)
    pos_idx = np.flatnonzero(y == 1)
    neg_idx = np.flatnonzero(y == 0)
    ka, kb = training.keys_a, training.keys_b
    single_pos = {}
    single_neg = {}
    for p in lib:
        cov = _coverage(p, fields, ka, kb)
        single_pos[p] = cov[pos_idx]
        single_neg[p] = cov[neg_idx]
    useful = [p for p in lib if single_pos[p].any()]
    candidates = []
    for depth in range(1, max_depth + 1):
        for conj in combinations(useful, depth):
            if len({p.field for p in conj}) < depth and depth > 1:
                # two predicates on one field: keep only if they differ in kind
                if len({(p.field, p.kind) for p in conj}) < depth:
                    continue
            cp = np.logical_and.reduce([single_pos[p] for p in conj])
            if not cp.any():
                continue
            cn = np.logical_and.reduce([single_neg[p] for p in conj]) if len(neg_idx) else np.zeros(0, bool)
            candidates.append((conj, cp, int(cn.sum())))
    n_neg = max(len(neg_idx), 1)
    cap = max_neg_fraction * n_neg
    covered = np.zeros(len(pos_idx), dtype=bool)
    chosen = []
    while covered.mean() < target_recall:
        best = None
        best_key = None
        for rank, (conj, cp, nn) in enumerate(candidates):
            gain = int((cp & ~covered).sum())
            if gain == 0:
                continue
            feasible = nn <= cap
            key = (feasible, gain if feasible else gain / (1 + nn), -nn, -len(conj), -rank)
            if best_key is None or key > best_key:
                best, best_key = (conj, cp), key
        if best is None:
            warnings.warn(
                f"predicates cover {covered.mean():.3f} of positives, target {target_recall}",
                CoverageUnreachable,
                stacklevel=2,
            )
            break
        chosen.append(tuple(best[0]))
        covered |= best[1]
    return chosen


# classifier

def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -35, 35)))


def fit_logistic(X, y, init=None, iterations=500, lr=1.0, l2=1e-3):
    """Full-batch gradient descent on L2-regularized log loss.

    Returns ``(weights, bias)``. Deterministic; ``init`` warm-starts.
    """
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    n, d = X.shape
    if init is None:
        w = np.zeros(d)
        b = 0.0
    else:
        w = np.asarray(init[0], float).copy()
        b = float(init[1])
    # class-balanced sample weights
    pos = y.sum()
    neg = n - pos
    sw = np.where(y == 1, n / (2 * pos), n / (2 * neg))
    for _ in range(iterations):
        p = _sigmoid(X @ w + b)
        g = sw * (p - y)
        w -= lr * (X.T @ g / n + l2 * w)
        b -= lr * g.mean()
    return w, b


def f_score(pred, truth):
    pred = np.asarray(pred, bool)
    truth = np.asarray(truth, bool)
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    if tp == 0:
        return 0.0
    p = tp / (tp + fp)
    r = tp / (tp + fn)
    return 2 * p * r / (p + r)


def _best_threshold(prob, y):
    order = np.argsort(-prob, kind="stable")
    ps = prob[order]
    ys = y[order].astype(bool)
    tp = np.cumsum(ys)
    fp = np.cumsum(~ys)
    total_pos = ys.sum()
    if total_pos == 0:
        return 0.5
    prec = tp / (tp + fp)
    rec = tp / total_pos
    f = np.where(tp > 0, 2 * prec * rec / np.maximum(prec + rec, 1e-12), 0.0)
    # only cut between distinct probabilities
    valid = np.append(ps[1:] < ps[:-1], True)
    f = np.where(valid, f, -1)
    # ties go to the highest cut: pairs the labels left undecided lean to non-match
    k = int(np.argmax(f))
    return float(ps[k])


@dataclass(frozen=True)
class MatchModel:
    space: FeatureSpace
    predicates: tuple
    weights: tuple
    bias: float
    match_threshold: float
    version: int = 1
    passes: tuple = ()
    window: int = 10

    def probability(self, X):
        return _sigmoid(np.asarray(X, float) @ np.asarray(self.weights) + self.bias)

    def passes_predicates(self, keys_a, keys_b):
        fields = list(self.space.fields)
        mask = np.zeros(len(keys_a), dtype=bool)
        for conj in self.predicates:
            mask |= conjunction_covers(conj, fields, keys_a, keys_b)
        return mask

    def predict_training(self, training):
        """Match decision for labeled pairs: a predicate passes and prob >= threshold."""
        if len(training) == 0:
            return np.zeros(0, bool)
        return self.passes_predicates(training.keys_a, training.keys_b) & (
            self.probability(training.X) >= self.match_threshold
        )

    def to_dict(self):
        return {
            "version": self.version,
            "space": self.space.to_dict(),
            "predicates": [[p.to_list() for p in conj] for conj in self.predicates],
            "predicate_names": [" & ".join(p.name for p in conj) for conj in self.predicates],
            "weights": [float(w) for w in self.weights],
            "bias": float(self.bias),
            "threshold": float(self.match_threshold),
            "passes": [list(p) for p in self.passes],
            "window": self.window,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            FeatureSpace.from_dict(d["space"]),
            tuple(tuple(BlockingPredicate(k, f, n) for k, f, n in conj) for conj in d["predicates"]),
            tuple(float(w) for w in d["weights"]),
            float(d["bias"]),
            float(d["threshold"]),
            int(d["version"]),
            tuple(tuple(p) for p in d.get("passes", ())),
            int(d.get("window", 10)),
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _split(n, seed, holdout_fraction=0.25):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    k = int(round(n * holdout_fraction))
    return perm[k:], perm[:k]


def train_classifier(training, seed=0, predicates=(), space=None, init=None, iterations=500,
                     passes=(), window=10):
    """Fit the match classifier and tune its threshold on a held-out split."""
    y = np.asarray(training.y)
    if len(set(y.tolist())) < 2:
        raise SingleClassTraining("match classifier needs both classes")
    fit_idx, hold_idx = _split(len(y), seed)
    if len(set(y[fit_idx].tolist())) < 2 or not (y[hold_idx] == 1).any():
        fit_idx = hold_idx = np.arange(len(y))
    w, b = fit_logistic(training.X[fit_idx], y[fit_idx], init=init, iterations=iterations)
    prob = _sigmoid(training.X[hold_idx] @ w + b)
    thr = _best_threshold(prob, y[hold_idx])
    if space is None:
        space = FeatureSpace(training.fields, ("text",) * len(training.fields),
                             (1.0,) * len(training.fields),
                             (1.0 / len(training.fields),) * len(training.fields))
    return MatchModel(space, tuple(tuple(c) for c in predicates), tuple(float(x) for x in w),
                      float(b), thr, 1, tuple(tuple(p) for p in passes), window)


@dataclass
class ERConfig:
    fields: tuple = ()
    key_passes: tuple = ()
    window: int = 10
    lo: float = 0.3
    hi: float = 0.9
    target_recall: float = 0.95
    max_depth: int = 3
    max_neg_fraction: float = 0.01
    field_weights: dict | None = None
    negatives_per_positive: int = 20
    random_negatives: int = 2000
    max_block_size: int = 200
    guard_band: float = 0.02
    holdout_fraction: float = 0.25
    max_holdout: int = 5000
    seed: int = 0

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        if "fields" in d:
            d["fields"] = tuple(d["fields"])
        if "key_passes" in d:
            d["key_passes"] = tuple(tuple(p) for p in d["key_passes"])
        return cls(**d)

    def to_dict(self):
        out = dict(self.__dict__)
        out["fields"] = list(self.fields)
        out["key_passes"] = [list(p) for p in self.key_passes]
        return out


def _build_training(t, space, pairs, cfg, rng):
    feats = PairFeaturizer(t, space).score(pairs)
    kept, labels = auto_label(feats, cfg.lo, cfg.hi)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    cap = max(cfg.negatives_per_positive * len(pos), 500)
    if len(neg) > cap:
        neg = np.sort(rng.choice(neg, cap, replace=False))
    keep = np.sort(np.concatenate([pos, neg]))
    sel = kept.subset(keep)
    training = TrainingSet.from_pairs(t, sel, labels[keep], space.fields)
    # random pairs approximate the blocking cost over the whole table
    n = t.n_rows
    if cfg.random_negatives and n > 2:
        ra = rng.integers(0, n, cfg.random_negatives)
        rb = rng.integers(0, n, cfg.random_negatives)
        a, b = _unique_pairs(ra, rb)
        rand = PairFeaturizer(t, space).score(CandidatePairs(a, b))
        low = rand.weighted_sim <= cfg.lo
        if low.any():
            rset = rand.subset(low)
            training = training.concat(
                TrainingSet.from_pairs(t, rset, np.zeros(len(rset), int), space.fields))
    return training


def _default_passes(t, fields):
    text = [f for f in fields if t[f].declared_kind in (ValueKind.STRING, ValueKind.ALPHANUMERIC)]
    return tuple((f,) for f in (text or list(fields))[:2])


def fit_model(t, cfg=None):
    """Train a :class:`MatchModel` on one table from auto-labeled candidate pairs.

    Returns ``(model, training_set)``.
    """
    cfg = cfg or ERConfig()
    fields = tuple(cfg.fields or t.names)
    space = FeatureSpace.from_table(t, fields, cfg.field_weights)
    passes = cfg.key_passes or _default_passes(t, fields)
    rng = np.random.default_rng(cfg.seed)
    pairs = multipass_sorted_neighborhood(t, passes, cfg.window)
    training = _build_training(t, space, pairs, cfg, rng)
    preds = learn_predicates(training, cfg.target_recall, cfg.max_depth, cfg.max_neg_fraction,
                             space.kinds)
    model = train_classifier(training, cfg.seed, preds, space, passes=passes, window=cfg.window)
    return model, training


# serving

def _block_pairs(t, model, max_block_size=200):
    fields = list(model.space.fields)
    keys = {f: [normalize_key(v) for v in t[f].values] for f in
            {p.field for conj in model.predicates for p in conj}}
    a_all, b_all = [], []
    skipped = 0
    for conj in model.predicates:
        blocks = {}
        for i in range(t.n_rows):
            parts = [p.keys(keys[p.field][i]) for p in conj]
            if any(len(x) == 0 for x in parts):
                continue
            if len(parts) == 1:
                combos = parts[0]
            else:
                combos = [tuple(c) for c in _product(parts)]
            for key in combos:
                blocks.setdefault(key, []).append(i)
        for members in blocks.values():
            m = len(members)
            if m < 2:
                continue
            if m > max_block_size:
                skipped += 1
                continue
            arr = np.asarray(members, dtype=np.int64)
            ia, ib = np.triu_indices(m, 1)
            a_all.append(arr[ia])
            b_all.append(arr[ib])
    if skipped:
        log.info("skipped %d blocks larger than %d rows", skipped, max_block_size)
    if not a_all:
        return CandidatePairs(np.empty(0, np.int64), np.empty(0, np.int64))
    a, b = _unique_pairs(np.concatenate(a_all), np.concatenate(b_all))
    return CandidatePairs(a, b)


def _product(parts):
    out = [()]
    for p in parts:
        out = [o + (x,) for o in out for x in p]
    return out


def candidate_pairs(t, model, max_block_size=200):
    """Pairs passing any predicate conjunction, with features and weighted similarity."""
    pairs = _block_pairs(t, model, max_block_size)
    return PairFeaturizer(t, model.space).score(pairs)


def match_pairs(t, model, max_block_size=200):
    """Scored candidate pairs plus a boolean array of classifier matches."""
    cands = candidate_pairs(t, model, max_block_size)
    if len(cands) == 0:
        return cands, np.zeros(0, bool), np.zeros(0)
    prob = model.probability(cands.features)
    return cands, prob >= model.match_threshold, prob


class UnionFind:
    def __init__(self):
        self.parent = {}

    def find(self, x):
        parent = self.parent
        parent.setdefault(x, x)
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra

    def groups(self):
        out = {}
        for x in self.parent:
            out.setdefault(self.find(x), []).append(x)
        return out


def clusters_from_pairs(pairs):
    """Connected components of size >= 2, sorted, ordered by smallest member."""
    uf = UnionFind()
    for a, b in pairs:
        uf.union(int(a), int(b))
    groups = [sorted(g) for g in uf.groups().values() if len(g) >= 2]
    return sorted(groups)


def resolve(t, model, max_block_size=200):
    """Duplicate clusters of ``t`` under ``model``."""
    cands, matched, _ = match_pairs(t, model, max_block_size)
    return clusters_from_pairs(zip(cands.a[matched].tolist(), cands.b[matched].tolist()))


def clusters_to_dict(clusters, model_version):
    return {"model_version": int(model_version), "clusters": [list(map(int, c)) for c in clusters]}


def merge_cluster(t, cluster, strategy="most_complete", source_rank=None):
    """Fuse a cluster into one record.

    Returns ``(record, retired_rows)`` where ``record`` maps field to value and
    ``retired_rows`` lists the members other than the survivor (for
    ``fused`` the lowest row is treated as the survivor's slot).
    """
    members = sorted(set(cluster))
    if strategy == "most_reliable":
        if source_rank is None:
            raise MissingSourceRank("most_reliable needs a per-row source rank")
        survivor = min(members, key=lambda r: (source_rank[r], r))
        record = dict(zip(t.names, t.row(survivor)))
    elif strategy == "most_complete":
        survivor = min(members, key=lambda r: (sum(v is None for v in t.row(r)), r))
        record = dict(zip(t.names, t.row(survivor)))
    elif strategy == "fused":
        survivor = members[0]
        record = {}
        for j, name in enumerate(t.names):
            vals = [t.row(r)[j] for r in members]
            counts = Counter(v for v in vals if v is not None)
            if not counts:
                record[name] = None
                continue
            top = max(counts.values())
            record[name] = next(v for v in vals if v is not None and counts[v] == top)
    else:
        raise ValidationError(f"unknown merge strategy {strategy!r}")
    return record, [r for r in members if r != survivor]


# continual learning

@dataclass
class UpdateResult:
    model: MatchModel
    training: TrainingSet
    holdout: TrainingSet
    accepted: bool
    f_before: float
    f_after: float
    n_new_positive: int
    message: str = ""


def holdout_f(model, holdout):
    if len(holdout) == 0:
        return 0.0
    return f_score(model.predict_training(holdout), holdout.y == 1)


def continual_update(model, training, batch, holdout=None, cfg=None, operational_pairs=()):
    """One online retraining step on a batch of new records.

    Builds pairs from the batch (sorted neighborhood with the model's passes
    plus any ``operational_pairs`` found while serving), scores them with the
    model's feature space, labels pairs at or above ``cfg.hi`` as duplicates
    (and at or below ``cfg.lo`` as non-duplicates), retrains with a warm start
    and evaluates on the rolling holdout. If the holdout F-score falls by more
    than ``cfg.guard_band`` the previous model is kept and the event logged.
    """
    cfg = cfg or ERConfig()
    holdout = holdout if holdout is not None else TrainingSet.empty(model.space.fields)
    rng = np.random.default_rng(cfg.seed + model.version)
    space = model.space
    passes = model.passes or _default_passes(batch, space.fields)
    pairs = multipass_sorted_neighborhood(batch, passes, min(model.window, batch.n_rows))
    if operational_pairs:
        op = np.asarray(list(operational_pairs), dtype=np.int64).reshape(-1, 2)
        a, b = _unique_pairs(np.concatenate([pairs.a, op[:, 0]]),
                             np.concatenate([pairs.b, op[:, 1]]))
        pairs = CandidatePairs(a, b)
    try:
        new = _build_training(batch, space, pairs, cfg, rng)
    except EmptyTrainingSet:
        new = TrainingSet.empty(space.fields)
    n_pos = int((new.y == 1).sum())
    new_fit, new_hold = _split(len(new), cfg.seed + model.version, cfg.holdout_fraction)
    new_fit = np.sort(new_fit)
    new_hold = np.sort(new_hold)
    rolling = holdout.concat(new.take(new_hold))
    if len(rolling) > cfg.max_holdout:
        rolling = rolling.take(range(len(rolling) - cfg.max_holdout, len(rolling)))
    combined = training.concat(new.take(new_fit))
    f_before = holdout_f(model, rolling)
    try:
        preds = learn_predicates(combined, cfg.target_recall, cfg.max_depth,
                                 cfg.max_neg_fraction, space.kinds)
        fresh = train_classifier(combined, cfg.seed, preds, space,
                                 init=(model.weights, model.bias), passes=passes,
                                 window=model.window)
    except (EmptyTrainingSet, SingleClassTraining) as exc:
        log.warning("retrain skipped: %s", exc)
        return UpdateResult(model, training, rolling, False, f_before, f_before, n_pos, str(exc))
    candidate = replace(fresh, version=model.version + 1)
    f_after = holdout_f(candidate, rolling)
    if f_after < f_before - cfg.guard_band:
        msg = f"retrain rejected: holdout F {f_after:.4f} < {f_before:.4f} - {cfg.guard_band}"
        log.warning(msg)
        return UpdateResult(model, training, rolling, False, f_before, f_after, n_pos, msg)
    return UpdateResult(candidate, combined, rolling, True, f_before, f_after, n_pos)


def cluster_f_score(predicted, truth):
    """Cluster-level precision, recall and F: a cluster counts only on exact match."""
    pred = {tuple(sorted(c)) for c in predicted}
    true = {tuple(sorted(c)) for c in truth}
    tp = len(pred & true)
    p = tp / len(pred) if pred else 0.0
    r = tp / len(true) if true else 0.0
    f = 0.0 if tp == 0 else 2 * p * r / (p + r)
    return {"precision": p, "recall": r, "f_score": f}


def pairwise_f_score(predicted, truth):
    """Pair-level precision, recall and F of the pairs implied by clusters."""
    def pairs(clusters):
        return {(a, b) for c in clusters for a, b in combinations(sorted(c), 2)}

    pp, tp_ = pairs(predicted), pairs(truth)
    tp = len(pp & tp_)
    p = tp / len(pp) if pp else 0.0
    r = tp / len(tp_) if tp_ else 0.0
    f = 0.0 if tp == 0 else 2 * p * r / (p + r)
    return {"precision": p, "recall": r, "f_score": f}
