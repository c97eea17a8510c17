"""Per-dimension dataset patterns and quality-anomaly detection.

Each dimension re-encodes the table as a numeric pattern whose anomalies are
separable by value. Binary patterns (Completeness, Conformity, Readability)
are resolved exactly; continuous ones (Accuracy, Uniqueness, Consistency)
go through an extended isolation forest with a quantile threshold.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .eif import eif_score, eif_train
from .entity_resolution import (
    ERConfig,
    PairFeaturizer,
    fit_model,
    match_pairs,
)
from .errors import (
    AllZeroWeights,
    EmptyTrainingSet,
    SingleClassTraining,
    TruthMismatch,
    ValidationError,
)
from .table import ACCEPTED_KINDS, DEFAULT_DATE_FORMATS, ValueKind, parse_date, parse_number
from .text import Lexicon

log = logging.getLogger(__name__)

DIMENSIONS = ("Accuracy", "Conformity", "Completeness", "Uniqueness", "Consistency", "Readability")
BINARY_DIMENSIONS = ("Completeness", "Conformity", "Readability")
CONFORMITY_CODES = {
    ValueKind.NUMERIC: (1, 0, 0),
    ValueKind.STRING: (0, 1, 0),
    ValueKind.DATE: (0, 0, 1),
    ValueKind.ALPHANUMERIC: (0, 0, 0),
}
ROW = "*"


@dataclass
class DatasetPattern:
    """Numeric re-encoding of one dimension.

    ``locator[i]`` is ``(row, column)`` for cell patterns or
    ``(row_a, row_b, column)`` for pair patterns. ``flags`` is set for binary
    patterns and marks the anomalous rows exactly.
    """

    dimension: str
    matrix: np.ndarray
    locator: list
    flags: np.ndarray | None = None
    column: str | None = None
    matched: np.ndarray | None = None

    def __len__(self):
        return len(self.locator)


def pattern_completeness(t):
    loc, bits = [], []
    for c in t.columns:
        m = c.missing_mask
        bits.append(m.astype(float))
        loc.extend((r, c.name) for r in range(t.n_rows))
    flags = np.concatenate(bits) if bits else np.zeros(0)
    return DatasetPattern("Completeness", flags[:, None], loc, flags.astype(bool))


def conformity_code(kind):
    return CONFORMITY_CODES.get(kind, (0, 0, 0))


def pattern_conformity(t):
    """Three bits per present cell: (is_numeric, is_string, is_date)."""
    loc, codes, flags = [], [], []
    for c in t.columns:
        kinds = t.kinds(c.name)
        accepted = ACCEPTED_KINDS[c.declared_kind]
        for r, k in enumerate(kinds):
            if k is ValueKind.MISSING:
                continue
            loc.append((r, c.name))
            codes.append(conformity_code(k))
            flags.append(k not in accepted)
    matrix = np.asarray(codes, dtype=float).reshape(-1, 3)
    return DatasetPattern("Conformity", matrix, loc, np.asarray(flags, dtype=bool))


def pattern_readability(t, lexicon):
    """One bit per text cell: 1 if any alphabetic token is outside the lexicon."""
    from .assessment import readability_flags, text_columns

    loc, bits = [], []
    for name in text_columns(t):
        flags = readability_flags(t, lexicon, name)
        for r, v in enumerate(t[name].values):
            if isinstance(v, str):
                loc.append((r, name))
                bits.append(flags[r])
    flags = np.asarray(bits, dtype=bool)
    return DatasetPattern("Readability", flags.astype(float)[:, None], loc, flags)


def _lenient_number(v):
    if isinstance(v, float):
        return v
    if isinstance(v, str):
        return parse_number(v)
    return None


def _lenient_days(v, formats):
    if hasattr(v, "timestamp"):
        return v.timestamp() / 86400.0
    if isinstance(v, str):
        dt = parse_date(v, formats)
        return None if dt is None else dt.timestamp() / 86400.0
    return None


def pattern_accuracy(t, lenient_formats=DEFAULT_DATE_FORMATS, columns=None):
    """Z-scored values per Numeric/Date column (dates as epoch days).

    Text cells are parsed leniently, so a date written in a format the
    column does not accept still gets a position on the time axis. Columns
    with zero variance are skipped.
    """
    out = []
    for c in t.columns:
        if columns is not None and c.name not in columns:
            continue
        if c.declared_kind is ValueKind.NUMERIC:
            vals = [_lenient_number(v) for v in c.values]
        elif c.declared_kind is ValueKind.DATE:
            vals = [_lenient_days(v, lenient_formats) for v in c.values]
        else:
            continue
        rows = [r for r, v in enumerate(vals) if v is not None and math.isfinite(v)]
        if len(rows) < 2:
            continue
        x = np.asarray([vals[r] for r in rows], dtype=float)
        sd = x.std()
        if sd == 0:
            log.info("accuracy pattern: column %s has zero variance, skipped", c.name)
            continue
        z = (x - x.mean()) / sd
        out.append(DatasetPattern("Accuracy", z[:, None], [(r, c.name) for r in rows],
                                  column=c.name))
    return out


def pattern_uniqueness(t, model, max_block_size=200):
    """Weighted similarity of every candidate pair the model's predicates admit."""
    cands, matched, _ = match_pairs(t, model, max_block_size)
    loc = [(a, b, ROW) for a, b in zip(cands.a.tolist(), cands.b.tolist())]
    sims = np.asarray(cands.weighted_sim if len(cands) else np.zeros(0), dtype=float)
    return DatasetPattern("Uniqueness", sims[:, None], loc, matched=np.asarray(matched, bool))


def pattern_consistency(t, flagged_pairs, space):
    """Per-field similarity for each flagged duplicate pair."""
    pairs = sorted(set((min(a, b), max(a, b)) for a, b in flagged_pairs))
    if not pairs:
        return DatasetPattern("Consistency", np.zeros((0, 1)), [])
    a = np.asarray([p[0] for p in pairs])
    b = np.asarray([p[1] for p in pairs])
    feats = PairFeaturizer(t, space).features(a, b)
    loc, vals = [], []
    for i, (x, y) in enumerate(pairs):
        for j, f in enumerate(space.fields):
            loc.append((x, y, f))
            vals.append(feats[i, j])
    return DatasetPattern("Consistency", np.asarray(vals, float)[:, None], loc)


@dataclass(frozen=True)
class AnomalyRecord:
    row: int
    column: str
    dimension: str
    score: float
    pair: tuple | None = None

    def to_dict(self):
        d = {"row": self.row, "col": self.column, "dimension": self.dimension,
             "score": round(float(self.score), 10)}
        if self.pair is not None:
            d["pair"] = list(self.pair)
        return d

    @classmethod
    def from_dict(cls, d):
        pair = tuple(d["pair"]) if d.get("pair") is not None else None
        return cls(int(d["row"]), d["col"], d["dimension"], float(d["score"]), pair)


def metric_anomaly_score(records):
    """Mean record score; 0 with no records."""
    scores = [r.score for r in records]
    return float(sum(scores) / len(scores)) if scores else 0.0


def global_anomaly_score(metric_scores, weights, score_normalized=False):
    """Weighted aggregate of per-dimension scores.

    Default is the normalized mean ``sum(w*S) / sum(w)``; ``score_normalized``
    divides by ``sum(S)`` instead.
    """
    ws = {k: float(weights.get(k, 0.0)) for k in metric_scores}
    if any(w < 0 for w in ws.values()):
        raise ValidationError("anomaly weights must be nonnegative")
    if not any(w > 0 for w in ws.values()):
        raise AllZeroWeights("at least one dimension weight must be positive")
    num = sum(ws[k] * metric_scores[k] for k in metric_scores)
    if score_normalized:
        den = sum(metric_scores.values())
        return num / den if den else 0.0
    return num / sum(ws.values())


@dataclass
class DetectionConfig:
    contamination: dict = field(default_factory=lambda: {
        "Accuracy": 0.01, "Uniqueness": "auto", "Consistency": 0.05})
    n_trees: int = 100
    sample_size: int = 265
    extension_level: int | None = None
    seed: int = 0
    dimension_weights: dict = field(default_factory=lambda: {d: 1.0 for d in DIMENSIONS})
    score_normalized: bool = False
    binary_via_forest: bool = False
    accuracy_mode: str = "per_column"
    lenient_date_formats: tuple = DEFAULT_DATE_FORMATS
    dimensions: tuple = DIMENSIONS
    max_block_size: int = 200

    def __post_init__(self):
        if self.accuracy_mode not in ("per_column", "multivariate"):
            raise ValidationError(f"unknown accuracy_mode {self.accuracy_mode!r}")
        for d, c in self.contamination.items():
            if d not in DIMENSIONS:
                raise ValidationError(f"unknown dimension {d!r}")
            if c != "auto" and not 0 <= float(c) <= 0.5:
                raise ValidationError(f"contamination for {d} must lie in [0, 0.5]")
        unknown = set(self.dimensions) - set(DIMENSIONS)
        if unknown:
            raise ValidationError(f"unknown dimensions {sorted(unknown)}")

    def to_dict(self):
        return {
            "contamination": dict(self.contamination),
            "n_trees": self.n_trees,
            "sample_size": self.sample_size,
            "extension_level": self.extension_level,
            "seed": self.seed,
            "dimension_weights": dict(self.dimension_weights),
            "score_normalized": self.score_normalized,
            "binary_via_forest": self.binary_via_forest,
            "accuracy_mode": self.accuracy_mode,
            "lenient_date_formats": list(self.lenient_date_formats),
            "dimensions": list(self.dimensions),
            "max_block_size": self.max_block_size,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        if "contamination" in d:
            merged = cls().contamination
            merged.update(d["contamination"])
            d["contamination"] = merged
        for key in ("lenient_date_formats", "dimensions"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class AnomalyReport:
    records: list
    metric_scores: dict
    global_score: float
    weights: dict
    params: dict = field(default_factory=dict)
    snapshot_id: str = ""

    def by_dimension(self, dimension):
        return [r for r in self.records if r.dimension == dimension]

    def cells(self, dimension=None):
        return {(r.row, r.column) for r in self.records
                if dimension is None or r.dimension == dimension}

    def pairs(self, dimension="Uniqueness"):
        return sorted({tuple(r.pair) for r in self.records
                       if r.dimension == dimension and r.pair is not None})

    def to_dict(self):
        return {
            "records": [r.to_dict() for r in self.records],
            "metric_scores": {k: round(float(v), 10) for k, v in self.metric_scores.items()},
            "global_score": round(float(self.global_score), 10),
            "weights": dict(self.weights),
            "params": dict(self.params),
            "snapshot_id": self.snapshot_id,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            [AnomalyRecord.from_dict(r) for r in d.get("records", [])],
            dict(d.get("metric_scores", {})),
            float(d.get("global_score", 0.0)),
            dict(d.get("weights", {})),
            dict(d.get("params", {})),
            d.get("snapshot_id", ""),
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def forest_flags(x, contamination, cfg, orientation=None, seed_offset=0):
    """Quantile-threshold the forest scores of ``x``.

    The top ``ceil(contamination * n)`` scores are flagged. ``orientation``
    restricts flags to one side of the median of the first column
    (``"high"`` or ``"low"``), for patterns where only one tail is an anomaly.
    Returns ``(flags, scores)``.
    """
    x = np.asarray(x, float)
    n = len(x)
    if n == 0 or contamination <= 0:
        return np.zeros(n, dtype=bool), np.zeros(n)
    forest = eif_train(x, cfg.n_trees, cfg.sample_size, cfg.extension_level,
                       cfg.seed + seed_offset)
    scores = eif_score(forest, x)
    eligible = np.ones(n, dtype=bool)
    if orientation is not None:
        med = np.median(x[:, 0])
        eligible = x[:, 0] > med if orientation == "high" else x[:, 0] < med
    k = int(math.ceil(contamination * n))
    cand = scores[eligible]
    if k == 0 or len(cand) == 0:
        return np.zeros(n, dtype=bool), scores
    k = min(k, len(cand))
    thr = np.sort(cand)[::-1][k - 1]
    return eligible & (scores >= thr), scores


def estimate_contamination(truth, dimension, t, fraction=0.1, seed=0):
    """Share of anomalous cells of ``dimension`` in a random row subsample.

    Only cells of the columns that the dimension's pattern covers count in
    the denominator (numeric and date columns for Accuracy).
    """
    rng = np.random.default_rng(seed)
    n = t.n_rows
    k = max(1, int(round(fraction * n)))
    rows = set(rng.choice(n, min(k, n), replace=False).tolist())
    if dimension == "Accuracy":
        cols = [c.name for c in t.columns if c.declared_kind in (ValueKind.NUMERIC, ValueKind.DATE)]
    else:
        cols = list(t.names)
    cells = truth.cells(dimension)
    hits = sum(1 for r, c in cells if r in rows and c in cols)
    return hits / (len(rows) * max(len(cols), 1))


def _binary_records(pattern, cfg, dimension):
    if not cfg.binary_via_forest:
        return [AnomalyRecord(r, c, dimension, 100.0)
                for (r, c), f in zip(pattern.locator, pattern.flags) if f]
    # fidelity path: forest over the pattern with contamination = share of set flags
    rate = float(pattern.flags.mean()) if len(pattern.flags) else 0.0
    flags, _ = forest_flags(pattern.matrix, rate, cfg)
    return [AnomalyRecord(r, c, dimension, 100.0)
            for (r, c), f in zip(pattern.locator, flags) if f]


def detect(t, cfg=None, *, model=None, lexicon=None, er_config=None):
    """Run every configured dimension and assemble an :class:`AnomalyReport`.

    ``model`` is the duplicate matcher used for Uniqueness; when omitted one
    is fitted on ``t`` (and the dimension skipped if no duplicates can be
    labeled). With Uniqueness contamination ``"auto"`` the pairs the matcher
    accepts are flagged, scored by the forest.
    """
    cfg = cfg or DetectionConfig()
    records = []
    params = cfg.to_dict()
    params["table"] = {"rows": t.n_rows, "columns": list(t.names)}
    dims = set(cfg.dimensions)
    if "Completeness" in dims:
        records += _binary_records(pattern_completeness(t), cfg, "Completeness")
    if "Conformity" in dims:
        records += _binary_records(pattern_conformity(t), cfg, "Conformity")
    if "Readability" in dims:
        lexicon = lexicon if lexicon is not None else Lexicon.from_table(t)
        records += _binary_records(pattern_readability(t, lexicon), cfg, "Readability")
    if "Accuracy" in dims:
        rate = float(cfg.contamination.get("Accuracy", 0.01))
        pats = pattern_accuracy(t, cfg.lenient_date_formats)
        if cfg.accuracy_mode == "per_column":
            for j, pat in enumerate(pats):
                flags, scores = forest_flags(pat.matrix, rate, cfg, seed_offset=j)
                records += [AnomalyRecord(r, c, "Accuracy", 100.0 * s)
                            for (r, c), f, s in zip(pat.locator, flags, scores) if f]
        elif pats:
            records += _multivariate_accuracy(t, pats, rate, cfg)
    flagged_pairs = []
    if dims & {"Uniqueness", "Consistency"}:
        if model is None:
            try:
                model, _ = fit_model(t, er_config or ERConfig(seed=cfg.seed))
            except (EmptyTrainingSet, SingleClassTraining) as exc:
                log.info("uniqueness skipped: %s", exc)
        if model is not None:
            params["match_model_version"] = model.version
            pat = pattern_uniqueness(t, model, cfg.max_block_size)
            c = cfg.contamination.get("Uniqueness", "auto")
            if c == "auto":
                # the matcher decides; the forest only scores. On small candidate
                # sets the true matches are a dense block that isolates poorly.
                _, scores = forest_flags(pat.matrix, 1.0, cfg, seed_offset=101)
                flags = np.asarray(pat.matched, bool)
            else:
                flags, scores = forest_flags(pat.matrix, float(c), cfg, orientation="high",
                                             seed_offset=101)
            for (a, b, _), f, s in zip(pat.locator, flags, scores):
                if f:
                    flagged_pairs.append((a, b))
                    if "Uniqueness" in dims:
                        records.append(AnomalyRecord(b, ROW, "Uniqueness", 100.0 * s, (a, b)))
            if "Consistency" in dims and flagged_pairs:
                cpat = pattern_consistency(t, flagged_pairs, model.space)
                rate = float(cfg.contamination.get("Consistency", 0.05))
                flags, scores = forest_flags(cpat.matrix, rate, cfg, orientation="low",
                                             seed_offset=202)
                for (a, b, col), f, s in zip(cpat.locator, flags, scores):
                    if f:
                        records.append(AnomalyRecord(b, col, "Consistency", 100.0 * s, (a, b)))
    order = {d: i for i, d in enumerate(DIMENSIONS)}
    col_order = {n: i for i, n in enumerate(t.names)}
    records.sort(key=lambda r: (order[r.dimension], r.row, col_order.get(r.column, -1),
                                r.pair or ()))
    metric_scores = {d: metric_anomaly_score([r for r in records if r.dimension == d])
                     for d in DIMENSIONS if d in dims}
    weights = {d: float(cfg.dimension_weights.get(d, 0.0)) for d in metric_scores}
    overall = global_anomaly_score(metric_scores, weights, cfg.score_normalized)
    return AnomalyReport(records, metric_scores, overall, weights, params, t.snapshot_id)


def _multivariate_accuracy(t, pats, rate, cfg):
    rows = sorted(set.intersection(*[{r for r, _ in p.locator} for p in pats]))
    if not rows:
        return []
    cols = []
    for p in pats:
        lookup = {r: v for (r, _), v in zip(p.locator, p.matrix[:, 0])}
        cols.append([lookup[r] for r in rows])
    x = np.asarray(cols).T
    flags, scores = forest_flags(x, rate, cfg)
    out = []
    for i, r in enumerate(rows):
        if flags[i]:
            # attribute the row anomaly to its most extreme column
            j = int(np.argmax(np.abs(x[i])))
            out.append(AnomalyRecord(r, pats[j].column, "Accuracy", 100.0 * scores[i]))
    return out


# evaluation

@dataclass
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def population(self):
        return self.tp + self.fp + self.tn + self.fn

    def metrics(self):
        pred_pos = self.tp + self.fp
        true_pos = self.tp + self.fn
        p = self.tp / pred_pos if pred_pos else 0.0
        r = self.tp / true_pos if true_pos else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        acc = (self.tp + self.tn) / self.population if self.population else 0.0
        return {
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "precision": p, "recall": r, "f_score": f, "accuracy": acc,
            "precision_undefined": pred_pos == 0,
            "recall_undefined": true_pos == 0,
        }


def _confusion(pred, true, population):
    tp = len(pred & true)
    fp = len(pred - true)
    fn = len(true - pred)
    return Confusion(tp, fp, population - tp - fp - fn, fn)


def true_pairs(truth):
    out = set()
    for cl in truth.clusters():
        for i, a in enumerate(cl):
            for b in cl[i + 1:]:
                out.add((a, b))
    return out


def true_inconsistencies(truth, t):
    """Cells of duplicate copies whose value differs from their source row."""
    out = set()
    for dup, src in truth.duplicate_map.items():
        for name in t.names:
            col = t[name].values
            if col[dup] != col[src]:
                out.add((dup, name))
    return out


def evaluate_detection(pred, truth, t=None):
    """Per-dimension and overall confusion counts with precision, recall, F, accuracy.

    Cell dimensions are judged over every cell of the table; Uniqueness over
    all row pairs; Consistency over the cells of duplicate copies. Without
    ``t`` the table shape comes from ``pred.params["table"]`` and
    Consistency, which needs the cell values, is skipped.
    """
    if t is not None:
        n, names = t.n_rows, list(t.names)
    else:
        shape = pred.params.get("table")
        if not shape:
            raise TruthMismatch("report carries no table shape; pass the table")
        n, names = int(shape["rows"]), list(shape["columns"])
    name_set = set(names)
    for e in truth.entries:
        if not 0 <= e.row < n or e.col not in name_set:
            raise TruthMismatch(f"truth entry {e} does not fit the table")
    for a, b in truth.duplicate_map.items():
        if not (0 <= a < n and 0 <= b < n):
            raise TruthMismatch(f"duplicate map entry {a}->{b} outside the table")
    n_cells = n * len(names)
    out = {}
    total = Confusion()
    for d in ("Accuracy", "Conformity", "Completeness", "Readability"):
        if d not in pred.metric_scores:
            continue
        c = _confusion(pred.cells(d), truth.cells(d), n_cells)
        out[d] = c.metrics()
        total = Confusion(total.tp + c.tp, total.fp + c.fp, total.tn + c.tn, total.fn + c.fn)
    if "Uniqueness" in pred.metric_scores:
        c = _confusion(set(pred.pairs("Uniqueness")), true_pairs(truth), n * (n - 1) // 2)
        out["Uniqueness"] = c.metrics()
        total = Confusion(total.tp + c.tp, total.fp + c.fp, total.tn + c.tn, total.fn + c.fn)
    if "Consistency" in pred.metric_scores and t is not None:
        dup_cells = len(truth.duplicate_map) * len(names)
        predicted = {(r.row, r.column) for r in pred.by_dimension("Consistency")}
        true = true_inconsistencies(truth, t)
        pop = max(dup_cells, len(predicted | true))
        c = _confusion(predicted, true, pop)
        out["Consistency"] = c.metrics()
        total = Confusion(total.tp + c.tp, total.fp + c.fp, total.tn + c.tn, total.fn + c.fn)
    out["overall"] = total.metrics()
    return out
