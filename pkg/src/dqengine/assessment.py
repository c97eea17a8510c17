"""Weighted data-quality assessment.

Twelve metrics are scored in percent, grouped into five aspects by metric
weights, and folded into a global score by aspect weights. Field-level metrics
take per-field weights derived from 1-10 relevance factors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime
from fractions import Fraction
from itertools import combinations

import numpy as np

from .errors import (
    BadClusterIndex,
    BadFactor,
    BadTimestamp,
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
from .table import ValueKind, _normalized_equal, diff_count, format_timestamp
from .text import Lexicon

METRICS = (
    "completeness",
    "uniqueness",
    "consistency",
    "conformity",
    "timeliness",
    "volatility",
    "readability",
    "ease_of_manipulation",
    "relevancy",
    "security",
    "accessibility",
    "integrity",
)
ASPECTS = ("reliability", "availability", "pertinence", "validity", "usability")

DEFAULT_METRIC_WEIGHTS = {
    "reliability": {"integrity": 0.7, "volatility": 0.3},
    "availability": {"security": 0.8, "accessibility": 0.2},
    "pertinence": {"timeliness": 0.7, "uniqueness": 0.3},
    "validity": {"consistency": 0.4, "conformity": 0.4, "readability": 0.2},
    "usability": {"completeness": 0.5, "relevancy": 0.3, "ease_of_manipulation": 0.2},
}
DEFAULT_ASPECT_WEIGHTS = {
    "reliability": 0.3,
    "availability": 0.1,
    "pertinence": 0.1,
    "validity": 0.3,
    "usability": 0.2,
}


def field_weights(factors):
    """Normalize 1-10 relevance factors into field weights.

    Returns ``Fraction`` weights, so they sum to exactly 1.

    >>> w = field_weights({"Address": 3, "Email": 6, "Phone": 4, "City": 2, "Country": 2,
    ...                    "First": 1, "Last": 1, "Age": 1})
    >>> float(w["Email"]), float(w["Address"])
    (0.3, 0.15)
    """
    if not factors:
        raise BadFactor("at least one field factor is required")
    for name, f in factors.items():
        if isinstance(f, bool) or int(f) != f or not 1 <= f <= 10:
            raise BadFactor(f"factor for {name!r} must be an integer in [1, 10], got {f!r}")
    total = sum(int(f) for f in factors.values())
    return {name: Fraction(int(f), total) for name, f in factors.items()}


def _close_to_one(total):
    return abs(float(total) - 1.0) <= 1e-9


@dataclass
class WeightConfig:
    field_factors: dict = field(default_factory=dict)
    metric_weights: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_METRIC_WEIGHTS.items()})
    aspect_weights: dict = field(default_factory=lambda: dict(DEFAULT_ASPECT_WEIGHTS))

    def __post_init__(self):
        if self.field_factors:
            field_weights(self.field_factors)
        for aspect, ws in self.metric_weights.items():
            if not _close_to_one(sum(ws.values())):
                raise ValidationError(f"metric weights of {aspect!r} sum to {sum(ws.values())}")
            unknown = set(ws) - set(METRICS)
            if unknown:
                raise ValidationError(f"unknown metrics {sorted(unknown)}")
        if not _close_to_one(sum(self.aspect_weights.values())):
            raise ValidationError(f"aspect weights sum to {sum(self.aspect_weights.values())}")

    def weights_for(self, names):
        """Field weights over ``names`` (uniform when no factors are configured)."""
        if not self.field_factors:
            return {n: 1.0 / len(names) for n in names} if names else {}
        missing = [n for n in names if n not in self.field_factors]
        factors = dict(self.field_factors)
        for n in missing:
            factors[n] = 1
        return {n: float(w) for n, w in field_weights({n: factors[n] for n in names}).items()}

    def to_dict(self):
        return {
            "field_factors": dict(self.field_factors),
            "metric_weights": {k: dict(v) for k, v in self.metric_weights.items()},
            "aspect_weights": dict(self.aspect_weights),
        }

    @classmethod
    def from_dict(cls, d):
        d = d or {}
        kw = {}
        for key in ("field_factors", "metric_weights", "aspect_weights"):
            if key in d:
                kw[key] = d[key]
        return cls(**kw)


@dataclass(frozen=True)
class SecurityChecklist:
    policy_compliance: bool = False
    transfer_protocols: bool = False
    threat_detection: bool = False
    encryption: bool = False
    documentation: bool = False

    def items(self):
        return (self.policy_compliance, self.transfer_protocols, self.threat_detection,
                self.encryption, self.documentation)

    def to_dict(self):
        return {
            "policy_compliance": self.policy_compliance,
            "transfer_protocols": self.transfer_protocols,
            "threat_detection": self.threat_detection,
            "encryption": self.encryption,
            "documentation": self.documentation,
        }


def _require_rows(t):
    if t.n_rows == 0 or not t.columns:
        raise EmptyTable("metric undefined on an empty table")


def _resolve_weights(t, weights, names=None):
    names = t.names if names is None else names
    if weights is None:
        return {n: 1.0 / len(names) for n in names}
    w = {n: float(weights.get(n, 0.0)) for n in names}
    total = sum(w.values())
    if total <= 0:
        return {n: 1.0 / len(names) for n in names}
    return {n: v / total for n, v in w.items()}


def _weighted(per_field, weights):
    return float(sum(weights[n] * s for n, s in per_field.items()))


def completeness_by_field(t):
    _require_rows(t)
    n = t.n_rows
    return {c.name: 100.0 * (n - int(c.missing_mask.sum())) / n for c in t.columns}


def completeness(t, weights=None):
    """Weighted mean of per-field non-missing percentages."""
    per = completeness_by_field(t)
    return _weighted(per, _resolve_weights(t, weights))


def weighted_mean(scores, weights):
    """Σ w·s over the fields of ``scores``; weights need not be normalized."""
    total = sum(weights[k] for k in scores)
    return sum(weights[k] * scores[k] for k in scores) / total


def uniqueness(t):
    _require_rows(t)
    return 100.0 * len(set(t.rows())) / t.n_rows


def consistency(t, clusters):
    """Share of agreeing field comparisons over all intra-cluster record pairs."""
    agree = total = 0
    n = t.n_rows
    for cluster in clusters:
        members = sorted(set(cluster))
        if len(members) < 2:
            raise BadClusterIndex(f"cluster {cluster!r} has fewer than two rows")
        for r in members:
            if not 0 <= r < n:
                raise BadClusterIndex(f"row {r} outside table of {n} rows")
        rows = [t.row(r) for r in members]
        for a, b in combinations(rows, 2):
            for x, y in zip(a, b):
                total += 1
                agree += _normalized_equal(x, y)
    return 100.0 if total == 0 else 100.0 * agree / total


def conformity_by_field(t):
    _require_rows(t)
    out = {}
    for c in t.columns:
        present = ~c.missing_mask
        n = int(present.sum())
        if n == 0:
            continue
        out[c.name] = 100.0 * int(t.conforming_mask(c.name)[present].sum()) / n
    return out


def conformity(t, weights=None):
    per = conformity_by_field(t)
    if not per:
        return 100.0
    return _weighted(per, _resolve_weights(t, weights, list(per)))


def _row_ages(t, now):
    if t.row_meta is None:
        raise MissingRowMeta("timeliness/volatility need per-row timestamps")
    out = []
    for i, m in enumerate(t.row_meta):
        if m.modified_at > now:
            raise BadTimestamp(f"row {i}: modified_at is after the evaluation time")
        age = now - m.created_at
        if age.total_seconds() <= 0:
            out.append(None)
            continue
        out.append((m, age))
    if all(x is None for x in out):
        raise DegenerateAge("every row was created at the evaluation time")
    return out


def _us(td):
    return (td.days * 86400 + td.seconds) * 1_000_000 + td.microseconds


def timeliness_rows(t, now):
    """Per-row ``(now - modified) / (now - created) * 100`` as exact fractions.

    Rows created exactly at ``now`` are ``None``.
    """
    return [
        None if x is None else Fraction(100 * _us(now - x[0].modified_at), _us(x[1]))
        for x in _row_ages(t, now)
    ]


def volatility_rows(t, now):
    """Per-row ``(created - modified) / (now - created) * 100`` as exact fractions."""
    return [
        None if x is None else Fraction(100 * _us(x[0].created_at - x[0].modified_at), _us(x[1]))
        for x in _row_ages(t, now)
    ]


def _mean_fraction(values):
    # per-row values stay exact; an exact Fraction sum grows superlinearly in
    # its denominators, so the mean uses a correctly rounded float sum
    vals = [float(v) for v in values if v is not None]
    return math.fsum(vals) / len(vals)


def timeliness(t, now, complement=False):
    """Mean per-row timeliness; ``complement`` reports ``100 - value`` per row."""
    score = _mean_fraction(timeliness_rows(t, now))
    return 100.0 - score if complement else score


def volatility(t, now):
    return _mean_fraction(volatility_rows(t, now))


def text_columns(t):
    return [c.name for c in t.columns
            if c.declared_kind in (ValueKind.STRING, ValueKind.ALPHANUMERIC)]


def readability_flags(t, lexicon, name):
    """Boolean per row: True where a text cell holds an out-of-lexicon token."""
    col = t[name]
    memo = {}
    out = np.zeros(t.n_rows, dtype=bool)
    for i, v in enumerate(col.values):
        if isinstance(v, str):
            bad = memo.get(v)
            if bad is None:
                bad = memo[v] = not lexicon.is_readable(v, name)
            out[i] = bad
    return out


def readability_by_field(t, lexicon):
    _require_rows(t)
    if lexicon is None:
        raise EmptyLexicon("readability needs a lexicon")
    out = {}
    for name in text_columns(t):
        is_text = np.fromiter((isinstance(v, str) for v in t[name].values), bool, t.n_rows)
        n = int(is_text.sum())
        if n == 0:
            continue
        bad = int(readability_flags(t, lexicon, name).sum())
        out[name] = 100.0 * (n - bad) / n
    return out


def readability(t, lexicon, weights=None):
    """Share of text cells whose alphabetic tokens are all in the lexicon."""
    per = readability_by_field(t, lexicon)
    if not per:
        return 100.0
    return _weighted(per, _resolve_weights(t, weights, list(per)))


def _diff_score(original, other, literal):
    _require_rows(original)
    if original.names != other.names or original.n_rows != other.n_rows:
        raise ShapeMismatch("tables are not aligned")
    ratio = diff_count(original, other) / original.n_cells
    return 100.0 * ratio if literal else 100.0 * (1.0 - ratio)


def ease_of_manipulation(original, cleaned, literal_formula=False):
    """Complement of the share of cells cleaning had to change (literal: the share)."""
    return _diff_score(original, cleaned, literal_formula)


def integrity(original, processed, literal_formula=False):
    """Complement of the share of cells processing altered (literal: the share)."""
    return _diff_score(original, processed, literal_formula)


def relevancy_by_field(t):
    total = sum(c.access_count for c in t.columns)
    if total <= 0:
        raise NoAccessData("no field access counts recorded")
    return {c.name: 100.0 * c.access_count / total for c in t.columns}


def relevancy(t, weights=None):
    return _weighted(relevancy_by_field(t), _resolve_weights(t, weights))


def security(checklist):
    return 20.0 * sum(bool(x) for x in checklist.items())


def accessibility(t):
    _require_rows(t)
    return 100.0 * sum(len(c) for c in t.columns if c.accessible) / t.n_cells


def aspect_scores(metric_scores, cfg, strict=True):
    """Per-aspect weighted mean of metric scores.

    With ``strict=False`` metrics absent from ``metric_scores`` are dropped and
    the remaining weights renormalized; aspects with no scored metric are
    omitted.
    """
    out = {}
    for aspect, ws in cfg.metric_weights.items():
        use = {m: w for m, w in ws.items() if w > 0}
        missing = [m for m in use if m not in metric_scores]
        if missing:
            if strict:
                raise MissingMetric(f"aspect {aspect!r} needs {missing}")
            use = {m: w for m, w in use.items() if m in metric_scores}
            if not use:
                continue
        total = sum(use.values())
        out[aspect] = sum(w * metric_scores[m] for m, w in use.items()) / total
    return out


def global_score(aspects, cfg, strict=True):
    use = {a: w for a, w in cfg.aspect_weights.items() if w > 0}
    missing = [a for a in use if a not in aspects]
    if missing:
        if strict:
            raise MissingAspect(f"global score needs aspects {missing}")
        use = {a: w for a, w in use.items() if a in aspects}
        if not use:
            raise MissingAspect("no aspect could be scored")
    total = sum(use.values())
    return sum(w * aspects[a] for a, w in use.items()) / total


@dataclass
class QualityReport:
    metric_scores: dict
    aspect_scores: dict
    global_score: float
    weights_used: WeightConfig
    evaluated_at: datetime | None = None
    field_scores: dict = field(default_factory=dict)
    unavailable: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "metrics": {k: _round(v) for k, v in self.metric_scores.items()},
            "aspects": {k: _round(v) for k, v in self.aspect_scores.items()},
            "global": _round(self.global_score),
            "weights": self.weights_used.to_dict(),
            "evaluated_at": None if self.evaluated_at is None else format_timestamp(self.evaluated_at),
            "fields": {m: {f: _round(s) for f, s in per.items()} for m, per in self.field_scores.items()},
            "unavailable": dict(self.unavailable),
        }

    @classmethod
    def from_dict(cls, d):
        from .table import parse_timestamp

        return cls(
            metric_scores=dict(d["metrics"]),
            aspect_scores=dict(d["aspects"]),
            global_score=float(d["global"]),
            weights_used=WeightConfig.from_dict(d.get("weights")),
            evaluated_at=parse_timestamp(d["evaluated_at"]) if d.get("evaluated_at") else None,
            field_scores=d.get("fields", {}),
            unavailable=d.get("unavailable", {}),
        )


def _round(x):
    return None if x is None else round(float(x), 10)


def assess(
    t,
    cfg,
    now,
    *,
    cleaned=None,
    processed=None,
    clusters=(),
    checklist=None,
    lexicon=None,
    timeliness_complement=False,
    literal_formula=False,
    strict=False,
):
    """Score every metric that ``t`` has the inputs for and roll them up.

    ``cleaned`` and ``processed`` are the aligned outputs of the cleaning and
    processing steps used by ease of manipulation and integrity; when omitted
    the table is compared with itself. Metrics whose inputs are missing are
    listed in ``unavailable``; with ``strict`` their absence is an error.
    """
    _require_rows(t)
    weights = cfg.weights_for(t.names)
    lexicon = lexicon if lexicon is not None else Lexicon.from_table(t)
    checklist = checklist or SecurityChecklist()
    scores = {}
    fields = {}
    unavailable = {}

    per = completeness_by_field(t)
    fields["completeness"] = per
    scores["completeness"] = weighted_mean(per, weights)
    scores["uniqueness"] = uniqueness(t)
    scores["consistency"] = consistency(t, clusters)
    per = conformity_by_field(t)
    fields["conformity"] = per
    scores["conformity"] = weighted_mean(per, weights) if per else 100.0
    try:
        scores["timeliness"] = timeliness(t, now, complement=timeliness_complement)
        scores["volatility"] = volatility(t, now)
    except (MissingRowMeta, DegenerateAge) as exc:
        unavailable["timeliness"] = unavailable["volatility"] = str(exc)
    per = readability_by_field(t, lexicon)
    fields["readability"] = per
    scores["readability"] = weighted_mean(per, weights) if per else 100.0
    scores["ease_of_manipulation"] = ease_of_manipulation(
        t, t if cleaned is None else cleaned, literal_formula)
    try:
        per = relevancy_by_field(t)
        fields["relevancy"] = per
        scores["relevancy"] = weighted_mean(per, weights)
    except NoAccessData as exc:
        unavailable["relevancy"] = str(exc)
    scores["security"] = security(checklist)
    scores["accessibility"] = accessibility(t)
    scores["integrity"] = integrity(t, t if processed is None else processed, literal_formula)

    aspects = aspect_scores(scores, cfg, strict=strict)
    overall = global_score(aspects, cfg, strict=strict)
    return QualityReport(scores, aspects, overall, cfg, now, fields, unavailable)
