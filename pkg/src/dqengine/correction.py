"""Correction of detected quality anomalies.

Each flagged cell gets a replacement predicted by a boosted-tree model. The
model is trained on a dimension-specific neighborhood of clean rows and uses
only the features that correlate with the target. Duplicate clusters are
consolidated into one new row and their members retired. Every change is
written to a change log.
"""

from __future__ import annotations

import hashlib
import json
import logging
import zlib
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

import numpy as np
from scipy.stats import chi2_contingency
from scipy.stats.contingency import association

from .entity_resolution import clusters_from_pairs, resolve
from .errors import (
    NoFeatures,
    StaleReport,
    TruthMismatch,
    ValidationError,
    WeightMismatch,
)
from .gbt import GbtParams, bin_contains, gbt_predict_many, gbt_train
from .table import (
    ACCEPTED_KINDS,
    RowMeta,
    ValueKind,
    cell_kind,
    format_timestamp,
    render_value,
    value_kind,
)
from .text import Lexicon, ValueEmbedding, trigram_cosine

log = logging.getLogger(__name__)

DEFAULT_ORDER = ("Conformity", "Readability", "Uniqueness", "Accuracy", "Completeness")
_STAGES = {"Conformity", "Readability", "Uniqueness", "Consistency", "Accuracy", "Completeness"}
_CELL_DIMENSIONS = ("Accuracy", "Conformity", "Completeness", "Readability", "Consistency")
_NUMERIC_KINDS = (ValueKind.NUMERIC, ValueKind.DATE)


@dataclass
class CorrectionConfig:
    """Correction parameters.

    ``feature_overrides`` maps a target column to ``{"allow": [...],
    "block": [...]}``, applied after correlation screening. ``order`` lists
    the stages; ``"Uniqueness"`` (or ``"Consistency"``) is the cluster
    consolidation stage.
    """

    corr_thresh: float = 0.2
    we_thresh: float = 0.8
    sim_thresh: float = 0.8
    bins: int = 10
    feature_overrides: dict = field(default_factory=dict)
    order: tuple = DEFAULT_ORDER
    seed: int = 1234
    gbt: GbtParams = field(default_factory=GbtParams)
    max_training_rows: int = 3000
    max_classes: int = 16
    identifier_ratio: float = 0.05
    embedding_dim: int = 32

    def __post_init__(self):
        for name in ("corr_thresh", "we_thresh", "sim_thresh", "identifier_ratio"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if self.bins < 2:
            raise ValidationError("bins must be at least 2")
        self.order = tuple(self.order)
        unknown = set(self.order) - _STAGES
        if unknown:
            raise ValidationError(f"unknown correction stages {sorted(unknown)}")
        if len(set(self.order)) != len(self.order):
            raise ValidationError("correction order repeats a stage")
        if self.max_training_rows < 1 or self.max_classes < 1:
            raise ValidationError("max_training_rows and max_classes must be positive")

    def to_dict(self):
        out = {k: v for k, v in self.__dict__.items() if k != "gbt"}
        out["order"] = list(self.order)
        out["gbt"] = self.gbt.to_dict()
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        if "gbt" in d:
            d["gbt"] = GbtParams(**d["gbt"])
        if "order" in d:
            d["order"] = tuple(d["order"])
        return cls(**d)


def _json_value(v):
    if v is None or isinstance(v, (str, bool, int)):
        return v
    if isinstance(v, (float, np.floating)):
        return float(v)
    if isinstance(v, datetime):
        return format_timestamp(v)
    return render_value(v)


@dataclass(frozen=True)
class ChangeLogEntry:
    """One applied change. ``label`` holds the bin for binned numeric predictions."""

    row: int
    column: str
    dimension: str
    old_value: object
    new_value: object
    confidence: float
    model_id: str
    label: str | None = None

    def to_dict(self):
        d = {
            "row": self.row,
            "column": self.column,
            "dimension": self.dimension,
            "old_value": _json_value(self.old_value),
            "new_value": _json_value(self.new_value),
            "confidence": round(float(self.confidence), 10),
            "model_id": self.model_id,
        }
        if self.label is not None:
            d["label"] = self.label
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["row"]), d["column"], d["dimension"], d.get("old_value"),
                   d.get("new_value"), float(d.get("confidence", 1.0)), d.get("model_id", ""),
                   d.get("label"))


def write_changelog(path, entries):
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")


def read_changelog(path):
    with open(path, encoding="utf-8") as fh:
        return [ChangeLogEntry.from_dict(json.loads(line)) for line in fh if line.strip()]


# feature screening

def _numeric_view(values):
    out = np.full(len(values), np.nan)
    for i, v in enumerate(values):
        if isinstance(v, float):
            out[i] = v
        elif isinstance(v, datetime):
            out[i] = v.timestamp() / 86400.0
    return out


def _categorical_view(values):
    return [v if isinstance(v, str) else None for v in values]


def pearson(x, y):
    if len(x) < 2 or x.std() == 0 or y.std() == 0:
        return 0.0
    return float(np.corrcoef(x, y)[0, 1])


def correlation_ratio(categories, values):
    """eta: share of the spread of ``values`` explained by ``categories``, in [0, 1]."""
    y = np.asarray(values, float)
    if len(y) < 2:
        return 0.0
    _, codes = np.unique(np.asarray(categories, dtype=object).astype(str), return_inverse=True)
    sums = np.bincount(codes, weights=y)
    counts = np.bincount(codes)
    between = float((sums ** 2 / counts).sum() - y.sum() ** 2 / len(y))
    total = float(((y - y.mean()) ** 2).sum())
    return float(np.sqrt(max(between, 0.0) / total)) if total > 0 else 0.0


def cramers_v(a, b):
    _, ca = np.unique(np.asarray(a, dtype=object).astype(str), return_inverse=True)
    _, cb = np.unique(np.asarray(b, dtype=object).astype(str), return_inverse=True)
    if ca.max(initial=0) < 1 or cb.max(initial=0) < 1:
        return 0.0
    table = np.zeros((ca.max() + 1, cb.max() + 1), dtype=np.int64)
    np.add.at(table, (ca, cb), 1)
    return float(association(table, method="cramer"))


def _association(t, target, other, rows):
    """|corr| between two columns over ``rows`` where both are present."""
    tc, oc = t[target], t[other]
    tn = tc.declared_kind in _NUMERIC_KINDS
    on = oc.declared_kind in _NUMERIC_KINDS
    tv = [tc.values[i] for i in rows]
    ov = [oc.values[i] for i in rows]
    x = _numeric_view(tv) if tn else _categorical_view(tv)
    y = _numeric_view(ov) if on else _categorical_view(ov)
    if tn and on:
        ok = ~np.isnan(x) & ~np.isnan(y)
        return abs(pearson(x[ok], y[ok]))
    if tn or on:
        num, cat = (x, y) if tn else (y, x)
        ok = [i for i in range(len(rows)) if not np.isnan(num[i]) and cat[i] is not None]
        return correlation_ratio([cat[i] for i in ok], num[ok])
    ok = [i for i in range(len(rows)) if x[i] is not None and y[i] is not None]
    return cramers_v([x[i] for i in ok], [y[i] for i in ok])


def _codes(t, name, rows, bins=8):
    """Integer codes per row (-1 when missing); numeric columns are quantile-binned."""
    c = t[name]
    vals = [c.values[i] for i in rows]
    if c.declared_kind in _NUMERIC_KINDS:
        x = _numeric_view(vals)
        ok = ~np.isnan(x)
        out = np.full(len(x), -1, dtype=np.int64)
        if ok.any():
            edges = np.unique(np.quantile(x[ok], np.linspace(0, 1, bins + 1)[1:-1]))
            out[ok] = np.searchsorted(edges, x[ok], side="right")
        return out
    cats = _categorical_view(vals)
    index = {}
    return np.fromiter((-1 if v is None else index.setdefault(v, len(index)) for v in cats),
                       dtype=np.int64, count=len(cats))


def corrected_cramers_v(a, b):
    """Bias-corrected Cramér's V of two code arrays (small-sample correction of Bergsma)."""
    _, ca = np.unique(a, return_inverse=True)
    _, cb = np.unique(b, return_inverse=True)
    n = len(ca)
    r, k = ca.max(initial=0) + 1, cb.max(initial=0) + 1
    if n < 2 or r < 2 or k < 2:
        return 0.0
    table = np.zeros((r, k), dtype=np.int64)
    np.add.at(table, (ca, cb), 1)
    chi2 = chi2_contingency(table, correction=False)[0]
    phi2 = max(0.0, chi2 / n - (k - 1) * (r - 1) / (n - 1))
    rc = r - (r - 1) ** 2 / (n - 1)
    kc = k - (k - 1) ** 2 / (n - 1)
    denom = min(rc - 1, kc - 1)
    return float(np.sqrt(phi2 / denom)) if denom > 0 else 0.0


def _joint_association(target_codes, feature_codes):
    """Association of the target with the composite key of several features."""
    ok = target_codes >= 0
    key = np.zeros(len(target_codes), dtype=np.int64)
    for c in feature_codes:
        ok &= c >= 0
        key = key * (c.max(initial=0) + 1) + c
    if ok.sum() < 2:
        return 0.0
    return corrected_cramers_v(target_codes[ok], key[ok])


def _interaction_features(t, target, kept, candidates, rows, thresh, max_cells):
    """Greedily add candidates that raise the joint association by at least ``thresh``.

    Catches features that only matter together with another one (a target
    determined by a combination of columns shows little pairwise association).
    """
    tcodes = _codes(t, target, rows)
    codes = {n: _codes(t, n, rows) for n in candidates}
    chosen = list(kept)
    base = _joint_association(tcodes, [codes[n] for n in chosen])
    while True:
        best, best_gain = None, thresh
        for n in candidates:
            if n in chosen:
                continue
            combo = [codes[m] for m in chosen] + [codes[n]]
            if np.prod([c.max(initial=0) + 1.0 for c in combo]) > max_cells:
                continue
            gain = _joint_association(tcodes, combo) - base
            if gain >= best_gain:
                best, best_gain = n, gain
        if best is None:
            return chosen
        chosen.append(best)
        base += best_gain


def _sample_rows(rows, cap, seed, salt=""):
    rows = np.asarray(rows, dtype=np.int64)
    if len(rows) <= cap:
        return rows
    rng = np.random.default_rng([seed, zlib.crc32(salt.encode())])
    return np.sort(rng.choice(rows, cap, replace=False))


def is_identifier(t, name, ratio=0.05, min_distinct=20):
    """Text column whose values rarely repeat (names, addresses).

    The test bounds the mean multiplicity (``1 / ratio``) rather than the
    distinct share, which would fall as a finite name pool saturates.
    """
    c = t[name]
    if c.declared_kind in _NUMERIC_KINDS:
        return False
    present = [v for v in c.values if v is not None]
    distinct = len(set(present))
    return distinct > min_distinct and distinct > ratio * max(len(present), 1)


def correlated_features(t, target, cfg=None, rows=None):
    """Features whose association with ``target`` reaches ``cfg.corr_thresh``.

    Pearson for numeric pairs, correlation ratio for numeric-categorical,
    Cramér's V for categorical pairs. A second, greedy pass adds columns
    that raise the bias-corrected association of the target with the joint
    key of the chosen columns by at least the same threshold. Identifier-like
    text columns are not candidates. When nothing passes, every candidate is
    kept. Overrides in
    ``cfg.feature_overrides[target]`` are applied last.
    """
    cfg = cfg or CorrectionConfig()
    if target not in t:
        raise ValidationError(f"unknown target column {target!r}")
    if len(t.names) < 2:
        raise NoFeatures("a single-column table has no features")
    if rows is None:
        rows = np.arange(t.n_rows)
    rows = _sample_rows(rows, cfg.max_training_rows, cfg.seed, "corr:" + target)
    candidates = [n for n in t.names
                  if n != target and not is_identifier(t, n, cfg.identifier_ratio)]
    kept = [n for n in candidates if _association(t, target, n, rows) >= cfg.corr_thresh]
    if not kept:
        kept = list(candidates)
    else:
        kept = _interaction_features(t, target, kept, candidates, rows, cfg.corr_thresh,
                                     max(len(rows) / 10, 1))
    over = cfg.feature_overrides.get(target, {})
    allow = [n for n in over.get("allow", ()) if n != target]
    block = set(over.get("block", ()))
    for n in allow:
        if n not in t:
            raise ValidationError(f"override names unknown column {n!r}")
    chosen = set(kept) | set(allow)
    return [n for n in t.names if n in chosen and n not in block]


# working state

def _conforms(v, kind, date_formats, memo):
    if v is None:
        return False
    if isinstance(v, str):
        k = memo.get(v)
        if k is None:
            k = memo[v] = cell_kind(v, date_formats)
    else:
        k = value_kind(v, date_formats)
    return k in ACCEPTED_KINDS[kind]


class _Workspace:
    """Mutable copy of the table with per-cell pending flags and retired rows."""

    def __init__(self, t, report=None):
        self.t = t
        self.names = list(t.names)
        self.kind = {c.name: c.declared_kind for c in t.columns}
        self.values = {c.name: list(c.values) for c in t.columns}
        self.n_input = t.n_rows
        self.retired = np.zeros(t.n_rows, dtype=bool)
        self.pending = {n: np.zeros(t.n_rows, dtype=bool) for n in self.names}
        self.meta = None if t.row_meta is None else list(t.row_meta)
        self.changed = set()
        if report is not None:
            for r in report.records:
                if r.column in self.pending and r.dimension in _CELL_DIMENSIONS:
                    self.pending[r.column][r.row] = True

    @property
    def n_rows(self):
        return len(self.retired)

    def append(self, values, meta):
        for n in self.names:
            self.values[n].append(values.get(n))
            self.pending[n] = np.append(self.pending[n], False)
        self.retired = np.append(self.retired, False)
        if self.meta is not None:
            self.meta.append(meta)
        return self.n_rows - 1

    def clean_rows(self, target, features):
        """Rows with a conforming, unflagged target and no flags on ``features``."""
        kind = self.kind[target]
        fmts = self.t.date_formats
        memo = {}
        vals = self.values[target]
        ok = ~self.retired & ~self.pending[target]
        for f in features:
            ok &= ~self.pending[f]
        idx = np.flatnonzero(ok)
        keep = [i for i in idx.tolist() if _conforms(vals[i], kind, fmts, memo)]
        return np.asarray(keep, dtype=np.int64)

    def feature_rows(self, rows, features, target=None):
        out = []
        for r in rows:
            d = {f: (None if self.pending[f][r] else self.values[f][r]) for f in features}
            if target is not None:
                d[target] = self.values[target][r]
            out.append(d)
        return out


class _ModelCache:
    def __init__(self, cfg):
        self.cfg = cfg
        self.models = {}

    def get(self, ws, target, features, rows):
        cfg = self.cfg
        rows = _sample_rows(rows, cfg.max_training_rows, cfg.seed, "train:" + target)
        sig = hashlib.sha1(np.asarray(rows, np.int64).tobytes()).hexdigest()
        key = (target, tuple(features), sig)
        hit = self.models.get(key)
        if hit is None:
            task = "binned" if ws.kind[target] in _NUMERIC_KINDS else "categorical"
            model = gbt_train(ws.feature_rows(rows, features, target), features, target,
                              cfg.gbt, task=task, bins=cfg.bins, max_classes=cfg.max_classes)
            hit = self.models[key] = (model, model.model_id)
        return hit


def _to_column_value(v, kind):
    if kind is ValueKind.DATE and isinstance(v, (float, int)):
        return datetime.fromtimestamp(float(v) * 86400.0, tz=timezone.utc)
    if kind is ValueKind.NUMERIC and isinstance(v, (int, np.integer, np.floating)):
        return float(v)
    return v


class _CollisionGuard:
    """Keeps identifier fills from forging duplicates.

    A predicted identifier value is some other record's value. When the row
    already agrees with a live row on every other identifier column, taking
    that row's value would make the two indistinguishable, so the value is
    skipped in favour of the next-ranked class. Fills not yet written to the
    workspace are tracked too, so one stage cannot forge a pair either.
    """

    def __init__(self, t, cfg):
        self.ids = [n for n in t.names if is_identifier(t, n, cfg.identifier_ratio)]
        self.index = {}
        self.state = {}
        self.pending = {}
        # (row, col) -> (model, model_id, feature row, banned keys, prediction) of each fill
        self.fills = {}

    def _others(self, target):
        return [n for n in self.ids if n != target]

    def _value(self, ws, col, r):
        v = self.pending.get((r, col), ws.values[col][r])
        return render_value(v)

    def _key(self, ws, others, r):
        return tuple(self._value(ws, o, r) for o in others)

    def _index(self, ws, target):
        state = (len(ws.changed), ws.n_rows, int(ws.retired.sum()))
        if self.state.get(target) != state:
            others = self._others(target)
            index = {}
            for r in range(ws.n_rows):
                if not ws.retired[r]:
                    index.setdefault(self._key(ws, others, r), set()).add(
                        self._value(ws, target, r))
            self.index[target] = index
            self.state[target] = state
        return self.index[target]

    def guards(self, target):
        return target in self.ids and bool(self._others(target))

    def forbidden(self, ws, target, r):
        return self._index(ws, target).get(self._key(ws, self._others(target), r), set())

    def record(self, ws, target, r, value):
        self.pending[(r, target)] = value
        for col in self.ids:
            if col in self.index and self._others(col):
                key = self._key(ws, self._others(col), r)
                self.index[col].setdefault(key, set()).add(self._value(ws, col, r))


def _predict(ws, cache, target, features, train_rows, rows, guard=None):
    """Predictions for ``rows`` from a model trained on ``train_rows``."""
    model, model_id = cache.get(ws, target, features, train_rows)
    feats = ws.feature_rows(rows, features)
    preds = gbt_predict_many(model, feats)
    if guard is not None and guard.guards(target):
        # sequential, so two rows of one batch cannot forge a pair either
        for i, r in enumerate(rows):
            banned = guard.forbidden(ws, target, r)
            if preds[i].label in banned:
                preds[i] = gbt_predict_many(model, [feats[i]], [banned])[0]
            guard.record(ws, target, r, preds[i].value)
            guard.fills[(r, target)] = (model, model_id, feats[i], set(banned), preds[i])
    elif guard is not None:
        for i, r in enumerate(rows):
            guard.fills[(r, target)] = (model, model_id, feats[i], set(), preds[i])
    binned = model.codec.get("task") == "binned"
    out = []
    for p in preds:
        value = _to_column_value(p.value, ws.kind[target])
        out.append((value, p.confidence, model_id, p.label if binned else None))
    return out


# neighborhoods

def _embedding_neighborhood(ws, target, features, clean, anomalous_values, cfg):
    """Map each anomalous value to the clean rows whose value embeds within ``we_thresh``."""
    rendered = [render_value(ws.values[target][r]) for r in clean.tolist()]
    sample = _sample_rows(np.arange(len(clean)), cfg.max_training_rows, cfg.seed, "emb:" + target)
    anomalous = sorted(set(anomalous_values))
    vals = [rendered[i] for i in sample.tolist()] + anomalous
    ctx_rows = clean[sample].tolist()
    context = {f: [ws.values[f][r] for r in ctx_rows] + [None] * len(anomalous) for f in features}
    emb = ValueEmbedding(vals, context, dim=cfg.embedding_dim, seed=cfg.seed)
    by_value = {}
    for i, v in enumerate(rendered):
        by_value.setdefault(v, []).append(i)
    anomalous_set = set(anomalous)
    out = {}
    for a in anomalous:
        sims = emb.similarities(a)
        near = [v for v, s in zip(emb.values, sims) if s >= cfg.we_thresh and v not in anomalous_set]
        idx = sorted(i for v in near for i in by_value.get(v, ()))
        out[a] = clean[np.asarray(idx, dtype=np.int64)] if idx else np.zeros(0, np.int64)
    return out


def _lexicon_neighborhood(ws, target, clean, anomalous_value, lexicon, cfg):
    match = lexicon.correct_text(anomalous_value, target)
    keep = [r for r in clean.tolist()
            if isinstance(ws.values[target][r], str)
            and trigram_cosine(ws.values[target][r].lower(), match.lower()) >= cfg.sim_thresh]
    return np.asarray(keep, dtype=np.int64)


def _cluster_rows(report, row):
    pairs = report.pairs("Uniqueness") + report.pairs("Consistency")
    for cl in clusters_from_pairs(pairs):
        if row in cl:
            return np.asarray(sorted(cl), dtype=np.int64)
    return np.asarray([row], dtype=np.int64)


def select_neighborhood(t, anomaly, cfg=None, report=None, lexicon=None):
    """Training rows for correcting ``anomaly`` on ``t``.

    Completeness uses every clean row; Accuracy treats the cell as missing
    first; Readability keeps rows similar to the value's nearest lexicon
    match; Conformity keeps rows whose value embeds close to the anomalous
    one; Uniqueness and Consistency return the duplicate cluster. An empty
    neighborhood falls back to all clean rows (logged).
    """
    cfg = cfg or CorrectionConfig()
    ws = _Workspace(t, report)
    dim = anomaly.dimension
    if dim in ("Uniqueness", "Consistency"):
        if report is None:
            raise ValidationError("cluster neighborhoods need the anomaly report")
        return _cluster_rows(report, anomaly.row)
    if dim not in ("Completeness", "Accuracy", "Readability", "Conformity"):
        raise ValidationError(f"unknown dimension {dim!r}")
    target = anomaly.column
    ws.pending[target][anomaly.row] = True
    features = correlated_features(t, target, cfg)
    clean = ws.clean_rows(target, features)
    if dim in ("Completeness", "Accuracy"):
        return clean
    value = render_value(t[target].values[anomaly.row])
    if dim == "Readability":
        lexicon = lexicon if lexicon is not None else Lexicon.from_table(t)
        rows = _lexicon_neighborhood(ws, target, clean, value, lexicon, cfg)
    else:
        rows = _embedding_neighborhood(ws, target, features, clean, [value], cfg)[value]
    if len(rows) == 0:
        log.info("empty %s neighborhood for (%d, %s); using all clean rows",
                 dim, anomaly.row, target)
        return clean
    return rows


# stages

class _Run:
    def __init__(self, t, report, cfg, lexicon):
        self.t = t
        self.report = report
        self.cfg = cfg
        self.ws = _Workspace(t, report)
        self.cache = _ModelCache(cfg)
        self.lexicon = lexicon
        self.entries = []
        self.features = {}
        self.fallbacks = 0
        self.guard = _CollisionGuard(t, cfg)

    def features_for(self, target):
        f = self.features.get(target)
        if f is None:
            f = self.features[target] = correlated_features(self.t, target, self.cfg)
        return f

    def targets(self, dimension):
        """Flagged cells of ``dimension`` still open, in (column, row) order."""
        col_order = {n: i for i, n in enumerate(self.ws.names)}
        cells = sorted({(r.column, r.row) for r in self.report.by_dimension(dimension)
                        if r.column in col_order},
                       key=lambda c: (col_order[c[0]], c[1]))
        return [(c, r) for c, r in cells
                if not self.ws.retired[r] and (r, c) not in self.ws.changed]

    def apply(self, updates):
        """Write a stage's ``{(row, col): (value, conf, model_id, label, dim)}`` in fixed order."""
        col_order = {n: i for i, n in enumerate(self.ws.names)}
        for (r, c) in sorted(updates, key=lambda k: (col_order[k[1]], k[0])):
            value, conf, model_id, label, dim, old = updates[(r, c)]
            self.ws.values[c][r] = value
            self.ws.pending[c][r] = False
            self.ws.changed.add((r, c))
            self.entries.append(ChangeLogEntry(r, c, dim, old, value, conf, model_id, label))

    def impute(self, dimension, cells):
        """Predict every cell in ``cells`` from the clean rows of its column."""
        updates = {}
        by_col = {}
        for c, r in cells:
            by_col.setdefault(c, []).append(r)
        old = {(r, c): self.ws.values[c][r] for c, r in cells}
        for c, rows in by_col.items():
            for r in rows:
                self.ws.pending[c][r] = True
                self.ws.values[c][r] = None
        for c, rows in by_col.items():
            features = self.features_for(c)
            clean = self.ws.clean_rows(c, features)
            if len(clean) == 0:
                log.warning("no clean rows to learn %s; %d cells left", c, len(rows))
                for r in rows:
                    self.ws.values[c][r] = old[(r, c)]
                continue
            for r, p in zip(rows, _predict(self.ws, self.cache, c, features, clean, rows,
                                           self.guard)):
                updates[(r, c)] = (*p, dimension, old[(r, c)])
        self.apply(updates)

    def conformity(self):
        cells = self.targets("Conformity")
        updates = {}
        by_col = {}
        for c, r in cells:
            by_col.setdefault(c, []).append(r)
        for c, rows in by_col.items():
            features = self.features_for(c)
            clean = self.ws.clean_rows(c, features)
            if len(clean) == 0:
                log.warning("no conforming rows in %s; %d cells left", c, len(rows))
                continue
            values = {r: render_value(self.ws.values[c][r]) for r in rows}
            hoods = _embedding_neighborhood(self.ws, c, features, clean,
                                            list(values.values()), self.cfg)
            groups = {}
            for r in rows:
                hood = hoods[values[r]]
                if len(hood) == 0:
                    self.fallbacks += 1
                    log.info("empty Conformity neighborhood for (%d, %s); using all clean rows",
                             r, c)
                    hood = clean
                key = hashlib.sha1(hood.tobytes()).hexdigest()
                groups.setdefault(key, (hood, []))[1].append(r)
            for key in sorted(groups):
                hood, members = groups[key]
                for r, p in zip(members, _predict(self.ws, self.cache, c, features, hood,
                                                  members, self.guard)):
                    updates[(r, c)] = (*p, "Conformity", self.ws.values[c][r])
        self.apply(updates)

    def readability(self):
        cells = self.targets("Readability")
        updates = {}
        fallback = []
        for c, r in cells:
            v = self.ws.values[c][r]
            if not isinstance(v, str):
                continue
            fixed = self.lexicon.correct_text(v, c)
            if fixed != v and self.lexicon.is_readable(fixed, c):
                conf = trigram_cosine(v.lower(), fixed.lower())
                updates[(r, c)] = (fixed, conf, "lexicon", None, "Readability", v)
            else:
                fallback.append((c, r))
        self.apply(updates)
        if fallback:
            self.fallbacks += len(fallback)
            log.info("%d unreadable cells without a lexicon match; imputing", len(fallback))
            self.impute("Readability", fallback)

    def consolidate(self):
        pairs = self.report.pairs("Uniqueness") + self.report.pairs("Consistency")
        for cl in clusters_from_pairs(pairs):
            members = [m for m in cl if not self.ws.retired[m]]
            if len(members) >= 2:
                self.entries.extend(_consolidate(self.ws, members, self.cfg, self.features_for,
                                                 self.cache))

    def verify(self, matcher, max_block_size=200, rounds=5):
        """Revise model fills that the matcher pairs with another row.

        A fill that makes its row a near-duplicate of an unrelated record
        forges a duplicate. A categorical fill bans the values the pair
        holds and takes the next-ranked class. A binned fill moves to the
        observed bin value farthest from the pair, and to the next-ranked bin
        once its own bin has no better value. At most ``rounds`` passes are
        made.
        """
        fills = self.guard.fills
        if not fills:
            return
        by_row = {}
        for r, c in fills:
            by_row.setdefault(r, []).append(c)
        where = {(e.row, e.column): i for i, e in enumerate(self.entries)}
        for _ in range(rounds):
            live = np.flatnonzero(~self.ws.retired)
            table = _materialize(self.t, self.ws)
            redo = []
            for cl in resolve(table, matcher, max_block_size):
                rows = [int(live[i]) for i in cl]
                filled = [r for r in rows if r in by_row]
                if not filled:
                    continue
                # when every member was filled, one of them may keep its value
                if len(filled) == len(rows):
                    filled = filled[1:]
                redo += [(r, rows) for r in filled]
            if not redo:
                return
            moved = 0
            for r, rows in redo:
                for c in by_row[r]:
                    old = self.ws.values[c][r]
                    value, conf = self._revise(fills, (r, c), rows)
                    if value == old:
                        continue
                    moved += 1
                    self.ws.values[c][r] = value
                    i = where[(r, c)]
                    self.entries[i] = replace(self.entries[i], new_value=value,
                                              confidence=conf)
            log.info("revised fills on %d rows the matcher paired", len(redo))
            if not moved:
                return

    def _revise(self, fills, key, rows):
        model, model_id, feats, banned, pred = fills[key]
        r, c = key
        if model.codec.get("task") != "binned":
            banned.update(render_value(self.ws.values[c][m]) for m in rows)
            p = gbt_predict_many(model, [feats], [banned])[0]
            return _to_column_value(p.value, self.ws.kind[c]), p.confidence
        others = [float(self.ws.values[c][m]) for m in rows
                  if m != r and self.ws.values[c][m] is not None]
        current = self.ws.values[c][r]
        if not others:
            return current, pred.confidence
        best = _farthest_in_bin(model.codec, pred.class_index, others)
        if best == current:
            # nothing in this bin separates the pair: take the next-ranked bin
            banned.add(pred.label)
            pred = gbt_predict_many(model, [feats], [banned])[0]
            fills[key] = (model, model_id, feats, banned, pred)
            best = _farthest_in_bin(model.codec, pred.class_index, others)
        return _to_column_value(best, self.ws.kind[c]), pred.confidence

    def run(self):
        done = set()
        for stage in self.cfg.order:
            if stage in ("Uniqueness", "Consistency"):
                if "cluster" in done:
                    continue
                done.add("cluster")
                self.consolidate()
            elif stage == "Conformity":
                self.conformity()
            elif stage == "Readability":
                self.readability()
            elif stage == "Accuracy":
                self.impute("Accuracy", self.targets("Accuracy"))
            elif stage == "Completeness":
                cells = self.targets("Completeness")
                # merged rows may still lack a field no member supplied
                for c in self.ws.names:
                    vals = self.ws.values[c]
                    cells += [(c, r) for r in range(self.ws.n_input, self.ws.n_rows)
                              if vals[r] is None and not self.ws.retired[r]]
                self.impute("Completeness", cells)


def _farthest_in_bin(codec, k, others):
    """Observed value of bin ``k`` farthest from every value in ``others``."""
    cands = [codec["medians"][k]] + [codec[s][k] for s in ("lows", "highs") if s in codec]
    return max(cands, key=lambda v: min(abs(v - o) for o in others))


def _consolidate(ws, members, cfg, features_for, cache=None):
    """Retire ``members`` and append a merged row predicted field by field."""
    cache = cache or _ModelCache(cfg)
    new_row = ws.n_rows
    merged = {}
    pending = []
    for name in ws.names:
        feats = features_for(name)
        rows = [m for m in members if ws.values[name][m] is not None and not ws.pending[name][m]]
        if not rows:
            rows = [m for m in members if ws.values[name][m] is not None]
        if not rows:
            merged[name] = None
            continue
        model, model_id = cache.get(ws, name, feats, np.asarray(rows, dtype=np.int64))
        # the placeholder row is empty: every feature falls back to its training fill
        p = gbt_predict_many(model, [{}])[0]
        value = _to_column_value(p.value, ws.kind[name])
        merged[name] = value
        pending.append((name, value, p.confidence, model_id,
                        p.label if model.codec.get("task") == "binned" else None))
    meta = None
    if ws.meta is not None:
        ms = [ws.meta[m] for m in members]
        meta = RowMeta(min(x.created_at for x in ms), max(x.modified_at for x in ms))
    row = ws.append(merged, meta)
    assert row == new_row
    entries = []
    for m in members:
        ws.retired[m] = True
        entries.append(ChangeLogEntry(m, "*", "Uniqueness", None, new_row, 1.0, "retired"))
    for name, value, conf, model_id, label in pending:
        entries.append(ChangeLogEntry(new_row, name, "Uniqueness", None, value, conf, model_id,
                                      label))
    return entries


def consolidate_cluster(t, cluster, cfg=None):
    """Merged row (a tuple in column order) and change-log entries for one cluster.

    Each field is predicted by a model trained on the cluster members for an
    empty placeholder row. The placeholder is numbered ``t.n_rows``.
    """
    cfg = cfg or CorrectionConfig()
    members = sorted(set(int(m) for m in cluster))
    if len(members) < 2:
        raise ValidationError("a cluster needs at least two rows")
    if members[0] < 0 or members[-1] >= t.n_rows:
        raise ValidationError("cluster row outside the table")
    ws = _Workspace(t)
    features = {}

    def features_for(name):
        if name not in features:
            features[name] = correlated_features(t, name, cfg) if len(t.names) > 1 else []
        return features[name]

    entries = _consolidate(ws, members, cfg, features_for)
    return tuple(ws.values[n][-1] for n in ws.names), entries


def _materialize(t, ws):
    updates = {(r, c): ws.values[c][r] for r, c in ws.changed if r < ws.n_input}
    out = t.with_values(updates, op="correct") if updates else t
    if ws.n_rows > ws.n_input:
        extra = [tuple(ws.values[n][r] for n in ws.names) for r in range(ws.n_input, ws.n_rows)]
        meta = None if ws.meta is None else ws.meta[ws.n_input:]
        out = out.append_rows(extra, meta, op="correct:merge")
    retired = np.flatnonzero(ws.retired)
    if len(retired):
        out = out.drop_rows(retired.tolist(), op="correct:retire")
    return out


def correct_all(t, report, cfg=None, lexicon=None, matcher=None, max_block_size=200):
    """Correct every anomaly in ``report``; return ``(table, change_log)``.

    Stages run in ``cfg.order``. Merged duplicate rows are appended in
    cluster order and retired rows dropped, so log rows refer to ``t`` with
    merged rows numbered from ``t.n_rows``. Cells outside the report are
    never modified. With a duplicate ``matcher`` the output is checked for
    duplicates forged by identifier fills, which are then re-predicted.
    """
    cfg = cfg or CorrectionConfig()
    if report.snapshot_id != t.snapshot_id:
        raise StaleReport(
            f"report snapshot {report.snapshot_id!r} does not match table {t.snapshot_id!r}")
    if not report.records:
        return t, []
    for r in report.records:
        if not 0 <= r.row < t.n_rows or (r.column != "*" and r.column not in t):
            raise ValidationError(f"anomaly record {r} does not fit the table")
    lexicon = lexicon if lexicon is not None else Lexicon.from_table(t)
    run = _Run(t, report, cfg, lexicon)
    run.run()
    if matcher is not None:
        run.verify(matcher, max_block_size)
    return _materialize(t, run.ws), run.entries


# evaluation

def _same(pred, truth):
    if isinstance(pred, (int, float)) and isinstance(truth, (int, float)):
        return float(pred) == float(truth)
    if pred is None or truth is None:
        return pred is None and truth is None
    return _json_value(pred) == _json_value(truth)


def _as_float(v):
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, datetime):
        return v.timestamp() / 86400.0
    return None


def evaluate_correction(log_entries, truth):
    """Accuracy and error rate of the logged corrections against the original values.

    Only entries on injected cells are judged. A binned prediction is correct
    when the original value lies inside its bin. With nothing to judge both
    rates describe an empty log: accuracy 1, error 0.
    """
    by_cell = {(e.row, e.col): e for e in truth.entries}
    correct = total = unmatched = 0
    per_dim = {}
    for e in log_entries:
        te = by_cell.get((e.row, e.column))
        if te is None:
            unmatched += 1
            continue
        if te.dimension == "Completeness" and e.old_value is not None:
            raise TruthMismatch(f"cell ({e.row}, {e.column}) was missing in truth but not in log")
        if te.original_value is not None and _same(e.old_value, te.original_value) \
                and te.dimension != "Completeness":
            raise TruthMismatch(f"cell ({e.row}, {e.column}) was not altered by injection")
        if e.label is not None and _as_float(te.original_value) is not None:
            ok = bin_contains(e.label, _as_float(te.original_value))
        else:
            ok = _same(e.new_value, te.original_value)
        d = per_dim.setdefault(te.dimension, [0, 0])
        d[0] += ok
        d[1] += 1
        correct += ok
        total += 1

    def rates(c, n):
        acc = c / n if n else 1.0
        return {"correct": c, "total": n, "accuracy": acc, "error_rate": 1.0 - acc}

    out = rates(correct, total)
    out["unmatched"] = unmatched
    out["by_dimension"] = {d: rates(*v) for d, v in sorted(per_dim.items())}
    return out


def quality_improvement(before, after):
    """Per-metric deltas and the change in global score (percentage points)."""
    if before.weights_used.to_dict() != after.weights_used.to_dict():
        raise WeightMismatch("reports were scored with different weights")
    deltas = {}
    for m, v in before.metric_scores.items():
        w = after.metric_scores.get(m)
        if v is not None and w is not None:
            deltas[m] = float(w) - float(v)
    return {"deltas": deltas, "improvement_rate": float(after.global_score - before.global_score)}
