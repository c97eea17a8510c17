"""Gradient-boosted regression trees with DART dropout.

Features are pre-binned into integer codes: numeric columns by training
quantiles, categorical columns by frequency rank. A split sends a set of
codes left; numeric splits are prefixes of the bin order, categorical ones
prefixes of the categories sorted by mean residual. Classification is
one-vs-rest on squared error, continuous targets are classified into
quantile bins.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .errors import EmptyTraining, ValidationError
from .table import render_value


@dataclass
class GbtParams:
    rounds: int = 100
    learning_rate: float = 0.1
    max_depth: int = 6
    dropout_rate: float = 0.1
    reg_lambda: float = 1.0
    min_child: int = 1
    max_bins: int = 64
    max_categories: int = 64
    seed: int = 1234

    def to_dict(self):
        return dict(self.__dict__)


# feature encoding

def _as_number(v):
    if isinstance(v, bool):
        return None
    if isinstance(v, (int, float, np.integer, np.floating)):
        return float(v)
    if isinstance(v, datetime):
        return v.timestamp() / 86400.0
    return None


@dataclass
class FeatureEncoder:
    """Integer coding of one feature column; ``n_codes`` includes the unseen code."""

    name: str
    numeric: bool
    edges: np.ndarray | None = None
    categories: dict | None = None
    fill: object = None

    @classmethod
    def fit(cls, name, values, max_bins=64, max_categories=64):
        nums = [_as_number(v) for v in values]
        present = [v for v in values if v is not None]
        numeric = bool(present) and sum(x is not None for x in nums) >= 0.5 * len(present)
        if numeric:
            arr = np.asarray([x for x in nums if x is not None], float)
            qs = np.quantile(arr, np.linspace(0, 1, max_bins + 1)[1:-1]) if len(arr) else []
            return cls(name, True, np.unique(qs), None, float(np.median(arr)) if len(arr) else 0.0)
        counts = {}
        for v in values:
            if v is not None:
                k = render_value(v)
                counts[k] = counts.get(k, 0) + 1
        ranked = sorted(counts, key=lambda k: (-counts[k], k))[: max_categories - 1]
        cats = {k: i for i, k in enumerate(ranked)}
        fill = ranked[0] if ranked else None
        return cls(name, False, None, cats, fill)

    @property
    def n_codes(self):
        if self.numeric:
            return len(self.edges) + 1
        return len(self.categories) + 1  # last code: rare or unseen

    def transform(self, values):
        if self.numeric:
            x = np.asarray([_as_number(v) for v in values], dtype=object)
            x = np.asarray([self.fill if v is None else v for v in x], dtype=float)
            return np.searchsorted(self.edges, x, side="right").astype(np.int64)
        other = len(self.categories)
        out = np.empty(len(values), dtype=np.int64)
        for i, v in enumerate(values):
            key = self.fill if v is None else render_value(v)
            out[i] = self.categories.get(key, other)
        return out

    def to_dict(self):
        return {
            "name": self.name,
            "numeric": self.numeric,
            "edges": None if self.edges is None else [float(e) for e in self.edges],
            "categories": self.categories,
            "fill": self.fill,
        }


# trees

@dataclass
class Tree:
    """Flat tree: internal nodes hold ``feature`` and a left-code mask."""

    feature: list
    left_codes: list
    left: list
    right: list
    value: list

    def _compiled(self):
        comp = self.__dict__.get("_comp")
        if comp is None:
            width = max([len(m) for m in self.left_codes if m is not None], default=1)
            table = np.zeros((len(self.left), width), dtype=bool)
            for i, m in enumerate(self.left_codes):
                if m is not None:
                    table[i, : len(m)] = m
            comp = (np.asarray(self.feature), np.asarray(self.left), np.asarray(self.right),
                    np.asarray(self.value, float), table)
            self.__dict__["_comp"] = comp
        return comp

    def predict(self, codes):
        feature, left, right, value, table = self._compiled()
        node = np.zeros(len(codes), dtype=np.int64)
        active = np.flatnonzero(left[node] >= 0)
        while len(active):
            nd = node[active]
            c = codes[active, feature[nd]]
            c = np.minimum(c, table.shape[1] - 1)
            go = table[nd, c]
            node[active] = np.where(go, left[nd], right[nd])
            active = active[left[node[active]] >= 0]
        return value[node]

    @property
    def n_splits(self):
        return sum(1 for x in self.left if x >= 0)

    def to_dict(self):
        return {
            "feature": self.feature,
            "left_codes": [None if m is None else np.flatnonzero(m).tolist() for m in self.left_codes],
            "left": self.left,
            "right": self.right,
            "value": [float(v) for v in self.value],
        }


def build_tree(codes, n_codes, residual, max_depth=6, reg_lambda=1.0, min_child=1,
               categorical=()):
    """Fit one squared-error regression tree to ``residual``; leaves hold S/(n+lambda).

    Features listed in ``categorical`` order their codes by mean residual
    before scanning split points.
    """
    return grow_tree(codes, n_codes, residual, max_depth, reg_lambda, min_child, categorical)[0]


def grow_tree(codes, n_codes, residual, max_depth=6, reg_lambda=1.0, min_child=1,
              categorical=()):
    """:func:`build_tree` plus the tree's output on the training rows."""
    trees, out = grow_forest(codes, n_codes, np.asarray(residual, float)[:, None], max_depth,
                             reg_lambda, min_child, categorical)
    return trees[0], out[:, 0]


def grow_forest(codes, n_codes, residuals, max_depth=6, reg_lambda=1.0, min_child=1,
                categorical=()):
    """Grow one independent tree per column of ``residuals`` (n, K) at once.

    Splits are searched level by level over every (tree, node) pair of the
    frontier: one histogram of residual sums and counts per (node, feature
    code), prefix sums inside each feature's code range, and the best gain
    per node. Ties go to the lowest feature, then the lowest split position.
    Returns the trees and their outputs on the training rows, shape (n, K).
    """
    n, d = codes.shape
    K = residuals.shape[1]
    n_codes = np.asarray(n_codes, dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(n_codes)])
    total = int(offsets[-1])
    flat = codes + offsets[:-1]
    seg = np.repeat(np.arange(d), n_codes)  # feature of each flat code
    is_cat = np.zeros(d, dtype=bool)
    is_cat[list(categorical)] = True
    cat_code = is_cat[seg]
    last_in_seg = np.zeros(total, dtype=bool)
    if d:
        last_in_seg[offsets[1:] - 1] = True
    start = offsets[:-1][seg] if d else np.zeros(0, dtype=np.int64)
    trees = [Tree([], [], [], [], []) for _ in range(K)]

    def add_leaf(tree, s, c):
        tree.feature.append(-1)
        tree.left_codes.append(None)
        tree.left.append(-1)
        tree.right.append(-1)
        tree.value.append(s / (c + reg_lambda))
        return len(tree.left) - 1

    node_of = np.zeros((K, n), dtype=np.int64)
    for k in range(K):
        add_leaf(trees[k], float(residuals[:, k].sum()), n)
    # frontier: parallel arrays of (tree, node)
    f_tree = np.arange(K)
    f_node = np.zeros(K, dtype=np.int64)
    for _depth in range(max_depth):
        L = len(f_tree)
        if L == 0 or d == 0:
            break
        max_nodes = max(len(t.left) for t in trees)
        slot_arr = np.full((K, max_nodes), -1, dtype=np.int64)
        slot_arr[f_tree, f_node] = np.arange(L)
        row_slot = slot_arr[np.arange(K)[:, None], node_of]  # (K, n)
        lk, lr = np.nonzero(row_slot >= 0)
        ls = row_slot[lk, lr]
        keys = (ls[:, None] * total + flat[lr]).ravel()
        w = np.repeat(residuals[lr, lk], d)
        sums = np.bincount(keys, weights=w, minlength=L * total).reshape(L, total)
        cnts = np.bincount(keys, minlength=L * total).reshape(L, total).astype(float)
        S = sums[:, offsets[0]:offsets[1]].sum(axis=1)
        C = cnts[:, offsets[0]:offsets[1]].sum(axis=1)
        # order codes inside each feature: by index, or by mean residual (empty codes last)
        with np.errstate(divide="ignore", invalid="ignore"):
            mean = np.where(cnts > 0, sums / cnts, np.inf)
        key = np.where(cat_code[None, :], mean, np.arange(total)[None, :].astype(float))
        order = np.lexsort((key, np.broadcast_to(seg, (L, total))), axis=-1)
        cs = np.cumsum(np.take_along_axis(sums, order, axis=1), axis=1)
        cc = np.cumsum(np.take_along_axis(cnts, order, axis=1), axis=1)
        prev = np.maximum(start - 1, 0)
        has_prev = (start > 0)[None, :]
        cs = cs - np.where(has_prev, cs[:, prev], 0.0)
        cc = cc - np.where(has_prev, cc[:, prev], 0.0)
        Sb, Cb = S[:, None], C[:, None]
        ok = (cc >= min_child) & (Cb - cc >= min_child) & ~last_in_seg[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = cs ** 2 / (cc + reg_lambda) + (Sb - cs) ** 2 / (Cb - cc + reg_lambda) \
                - Sb ** 2 / (Cb + reg_lambda)
        gain = np.where(ok, gain, -np.inf)
        best = np.argmax(gain, axis=1)
        split = gain[np.arange(L), best] > 1e-12
        if not split.any():
            break
        go_left = np.zeros((L, total), dtype=bool)
        child_l = np.full(L, -1, dtype=np.int64)
        child_r = np.full(L, -1, dtype=np.int64)
        for i in np.flatnonzero(split).tolist():
            tree = trees[int(f_tree[i])]
            nd = int(f_node[i])
            p = int(best[i])
            j = int(seg[p])
            lo = int(offsets[j])
            left_flat = order[i, lo:p + 1]
            go_left[i, left_flat] = True
            mask = np.zeros(int(n_codes[j]), dtype=bool)
            mask[left_flat - lo] = True
            sl, cl = float(cs[i, p]), float(cc[i, p])
            child_l[i] = add_leaf(tree, sl, cl)
            child_r[i] = add_leaf(tree, float(S[i]) - sl, float(C[i]) - cl)
            tree.feature[nd] = j
            tree.left_codes[nd] = mask
            tree.left[nd] = int(child_l[i])
            tree.right[nd] = int(child_r[i])
        # route live rows of split nodes to their children
        feat = np.zeros(L, dtype=np.int64)
        feat[split] = seg[best[split]]
        moving = split[ls]
        mk, mr, ms = lk[moving], lr[moving], ls[moving]
        go = go_left[ms, flat[mr, feat[ms]]]
        node_of[mk, mr] = np.where(go, child_l[ms], child_r[ms])
        sel = np.flatnonzero(split)
        f_tree = np.repeat(f_tree[sel], 2)
        f_node = np.stack([child_l[sel], child_r[sel]], axis=1).ravel()
    out = np.empty((n, K))
    for k in range(K):
        out[:, k] = np.asarray(trees[k].value)[node_of[k]]
    return trees, out


@dataclass
class GbtModel:
    encoders: list
    classes: list
    base: np.ndarray
    trees: list  # trees[class] -> list of (weight, Tree)
    params: GbtParams
    codec: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @property
    def features(self):
        return [e.name for e in self.encoders]

    @property
    def model_id(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]

    def encode(self, rows):
        """Code a list of ``{feature: value}`` rows."""
        if not self.encoders:
            return np.zeros((len(rows), 0), dtype=np.int64)
        cols = [e.transform([r.get(e.name) for r in rows]) for e in self.encoders]
        return np.stack(cols, axis=1)

    def raw_scores(self, codes):
        out = np.tile(self.base, (len(codes), 1)).astype(float)
        for k, class_trees in enumerate(self.trees):
            for w, tree in class_trees:
                out[:, k] += w * tree.predict(codes)
        return out

    def to_dict(self):
        return {
            "encoders": [e.to_dict() for e in self.encoders],
            "classes": [render_value(c) for c in self.classes],
            "base": [float(b) for b in self.base],
            "trees": [[[float(w), t.to_dict()] for w, t in ct] for ct in self.trees],
            "params": self.params.to_dict(),
            "codec": {k: (list(v) if isinstance(v, (list, tuple, np.ndarray)) else v)
                      for k, v in self.codec.items()},
        }


def _fit_boosting(codes, n_codes, targets, params, cat_features):
    """Boost one regression ensemble per column of ``targets`` (n, K).

    DART: each round drops every existing tree with probability
    ``dropout_rate`` (the same indices for all classes), fits the new tree to
    the residual of the remaining ensemble, then weights it
    ``lr / (k + lr)`` and scales the ``k`` dropped trees by ``k / (k + lr)``.
    """
    n, K = targets.shape
    base = targets.mean(axis=0)
    rng = np.random.default_rng(params.seed)
    cat = frozenset(cat_features)
    weights, outs, fitted = [], [], []  # per round: (K,), (n, K), list of K trees or None
    pred = np.tile(base, (n, 1))
    done = np.zeros(K, dtype=bool)
    history = [float(((targets - pred) ** 2).mean())]
    lr = params.learning_rate
    for _ in range(params.rounds):
        if done.all():
            break
        m = len(weights)
        dropped = []
        if params.dropout_rate > 0 and m:
            dropped = np.flatnonzero(rng.random(m) < params.dropout_rate).tolist()
        kd = len(dropped)
        w_new = lr / (kd + lr) if kd else lr
        scale = kd / (kd + lr) if kd else 1.0
        resid = targets - pred
        for i in dropped:
            resid += weights[i] * outs[i]
        active = np.flatnonzero(~done)
        new_trees, new_out = grow_forest(codes, n_codes, resid[:, active], params.max_depth,
                                         params.reg_lambda, params.min_child, cat)
        w = np.zeros(K)
        out = np.zeros((n, K))
        row_trees = [None] * K
        for a, k in enumerate(active.tolist()):
            tree = new_trees[a]
            if tree.n_splits == 0 and abs(tree.value[0]) < 1e-12:
                done[k] = True
                continue
            w[k] = w_new
            out[:, k] = new_out[:, a]
            row_trees[k] = tree
        grew = w > 0
        for i in dropped:
            pred[:, grew] += (scale - 1.0) * weights[i][grew] * outs[i][:, grew]
            weights[i] = np.where(grew, weights[i] * scale, weights[i])
        pred += w * out
        weights.append(w)
        outs.append(out)
        fitted.append(row_trees)
        history.append(float(((targets - pred) ** 2).mean()))
    trees = [[(float(weights[r][k]), fitted[r][k]) for r in range(len(fitted))
              if fitted[r][k] is not None] for k in range(K)]
    return base, trees, history


def _encode_training(rows, features, params):
    encoders = [FeatureEncoder.fit(f, [r.get(f) for r in rows], params.max_bins,
                                   params.max_categories) for f in features]
    if encoders:
        codes = np.stack([e.transform([r.get(e.name) for r in rows]) for e in encoders], axis=1)
    else:
        codes = np.zeros((len(rows), 0), dtype=np.int64)
    n_codes = [e.n_codes for e in encoders]
    cat = [j for j, e in enumerate(encoders) if not e.numeric]
    return encoders, codes, n_codes, cat


def quantile_bins(values, bins):
    """Edges splitting ``values`` into at most ``bins`` quantile bins (unique)."""
    arr = np.asarray(values, float)
    edges = np.unique(np.quantile(arr, np.linspace(0, 1, bins + 1)))
    return edges


def bin_label(lo, hi, closed=False):
    """``[lo,hi)``; the top bin is closed, ``[lo,hi]``, so it holds the maximum."""
    return f"[{render_value(float(lo))},{render_value(float(hi))}{']' if closed else ')'}"


def gbt_train(rows, features, target, params=None, task="auto", bins=10, max_classes=None):
    """Train a boosted model predicting ``target`` from ``features``.

    ``rows`` is a list of ``{field: value}`` dicts with ``target`` populated.
    ``task`` is ``"categorical"``, ``"binned"`` (continuous target
    classified into quantile bins), ``"regression"`` or ``"auto"`` (binned
    for numeric targets, categorical otherwise).
    """
    params = params or GbtParams()
    rows = [r for r in rows if r.get(target) is not None]
    if not rows:
        raise EmptyTraining(f"no training rows with {target!r} populated")
    y = [r[target] for r in rows]
    numeric_target = all(_as_number(v) is not None for v in y)
    if task == "auto":
        task = "binned" if numeric_target else "categorical"
    if task in ("binned", "regression") and not numeric_target:
        raise ValidationError(f"{task} needs a numeric target")
    features = [f for f in features if f != target]
    encoders, codes, n_codes, cat = _encode_training(rows, features, params)
    codec = {"task": task, "target": target}
    if task == "regression":
        targets = np.asarray([_as_number(v) for v in y], float)[:, None]
        classes = [target]
    elif task == "binned":
        vals = np.asarray([_as_number(v) for v in y], float)
        edges = quantile_bins(vals, bins)
        if len(edges) < 2:
            edges = np.asarray([vals[0], vals[0]])
        idx = np.clip(np.searchsorted(edges, vals, side="right") - 1, 0, max(len(edges) - 2, 0))
        n_bins = max(len(edges) - 1, 1)
        present = sorted(set(idx.tolist()))
        labels = []
        medians, lows, highs = [], [], []
        for b in present:
            hi = edges[b + 1] if len(edges) > 1 else edges[b]
            labels.append(bin_label(edges[b], hi, closed=b == n_bins - 1))
            medians.append(float(np.median(vals[idx == b])))
            lows.append(float(vals[idx == b].min()))
            highs.append(float(vals[idx == b].max()))
        classes = labels
        lookup = {b: i for i, b in enumerate(present)}
        targets = np.zeros((len(rows), len(classes)))
        targets[np.arange(len(rows)), [lookup[b] for b in idx.tolist()]] = 1.0
        codec.update(edges=[float(e) for e in edges], bin_ids=present, medians=medians,
                     lows=lows, highs=highs, n_bins=n_bins)
    else:
        keys = [render_value(v) for v in y]
        counts = {}
        first = {}
        for k, v in zip(keys, y):
            counts[k] = counts.get(k, 0) + 1
            first.setdefault(k, v)
        ranked = sorted(counts, key=lambda k: (-counts[k], k))
        if max_classes is not None and len(ranked) > max_classes:
            keep = set(ranked[:max_classes])
            sel = [i for i, k in enumerate(keys) if k in keep]
            rows = [rows[i] for i in sel]
            keys = [keys[i] for i in sel]
            codes = codes[sel]
            ranked = ranked[:max_classes]
        class_keys = sorted(ranked)
        classes = [first[k] for k in class_keys]
        lookup = {k: i for i, k in enumerate(class_keys)}
        targets = np.zeros((len(rows), len(classes)))
        targets[np.arange(len(rows)), [lookup[k] for k in keys]] = 1.0
        codec["class_keys"] = class_keys
    if len(classes) == 1 and task != "regression":
        base = np.ones(1)
        trees, history = [[]], [0.0]
    else:
        base, trees, history = _fit_boosting(codes, n_codes, targets, params, cat)
    return GbtModel(encoders, classes, base, trees, params, codec, history)


@dataclass(frozen=True)
class Prediction:
    value: object
    label: str
    confidence: float
    class_index: int


def gbt_predict_many(model, rows, forbid=None):
    """Predict for a list of ``{feature: value}`` rows.

    ``forbid`` optionally gives, per row, a set of class keys to skip; the
    argmax runs over the remaining classes (all of them if none remain).
    """
    codes = model.encode(rows)
    scores = model.raw_scores(codes)
    task = model.codec.get("task")
    out = []
    if task == "regression":
        return [Prediction(float(s[0]), render_value(float(s[0])), 1.0, 0) for s in scores]
    keys = model.codec.get("class_keys") or [render_value(c) for c in model.classes]
    # argmax with lexicographic tie-break: classes are stored sorted by key
    for i, s in enumerate(scores):
        k = int(np.argmax(s))
        banned = forbid[i] if forbid is not None else None
        if banned and keys[k] in banned:
            allowed = np.asarray([key not in banned for key in keys])
            if allowed.any():
                k = int(np.argmax(np.where(allowed, s, -np.inf)))
        p = np.clip(s, 0.0, None)
        conf = float(p[k] / p.sum()) if p.sum() > 0 else 1.0 / len(s)
        if task == "binned":
            out.append(Prediction(model.codec["medians"][k], model.classes[k], conf, k))
        else:
            out.append(Prediction(model.classes[k], keys[k], conf, k))
    return out


def gbt_predict(model, row):
    """Prediction for one ``{feature: value}`` row.

    Categorical models return the argmax class; binned models return the
    median training value of the predicted bin with its ``[lo,hi)`` label.
    """
    return gbt_predict_many(model, [row])[0]


def bin_contains(label, value):
    """True when ``value`` lies in the bin ``label`` (``[lo,hi)`` or ``[lo,hi]``)."""
    lo, hi = label[1:-1].split(",")
    lo, hi = float(lo), float(hi)
    if label.endswith("]"):
        return lo <= value <= hi
    return lo <= value < hi
