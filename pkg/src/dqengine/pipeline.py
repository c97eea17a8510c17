"""End-to-end runs: assess, detect, correct, re-assess, evaluate.

A run reads one JSON configuration, works on a loaded or synthesized table
and writes every artifact to an output directory. JSON artifacts are
deterministic for fixed seeds; wall-clock timings go to ``timings.csv``.
"""

from __future__ import annotations

import hashlib
import json
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anomaly import (
    DetectionConfig,
    detect,
    estimate_contamination,
    evaluate_detection,
    pattern_completeness,
    pattern_conformity,
    pattern_readability,
    true_inconsistencies,
)
from .assessment import SecurityChecklist, WeightConfig, assess
from .correction import (
    CorrectionConfig,
    correct_all,
    evaluate_correction,
    quality_improvement,
    write_changelog,
)
from .entity_resolution import ERConfig, clusters_to_dict, fit_model, resolve
from .errors import (
    DQError,
    EmptyTrainingSet,
    SchemaMismatch,
    SingleClassTraining,
    StageError,
    ValidationError,
)
from .synth import DEFAULT_NOW, SCHEMA, InjectionSpec, generate_base, inject
from .table import (
    DEFAULT_DATE_FORMATS,
    PreprocessOptions,
    ValueKind,
    load_csv,
    parse_timestamp,
    preprocess,
)
from .text import Lexicon

TARGETED_METRICS = ("completeness", "uniqueness", "consistency", "conformity", "readability",
                    "accuracy")
_CONFIG_KEYS = {"weights", "detection", "correction", "er", "preprocess", "schema", "now",
                "security", "contamination_from_truth", "date_formats", "accuracy_z", "synth"}


@dataclass
class PipelineConfig:
    """The single JSON configuration document of a run."""

    weights: WeightConfig = field(default_factory=WeightConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    correction: CorrectionConfig = field(default_factory=CorrectionConfig)
    er: ERConfig = field(default_factory=ERConfig)
    preprocess: PreprocessOptions | None = None
    schema: dict | None = None
    now: object = DEFAULT_NOW
    security: SecurityChecklist = field(default_factory=SecurityChecklist)
    contamination_from_truth: bool = True
    date_formats: tuple = DEFAULT_DATE_FORMATS
    accuracy_z: float = 6.0
    synth: dict | None = None

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - _CONFIG_KEYS
        if unknown:
            raise ValidationError(f"unknown config keys {sorted(unknown)}")
        try:
            now = DEFAULT_NOW
            if d.get("now") is not None:
                now = parse_timestamp(str(d["now"]))
                if now is None:
                    raise ValidationError(f"cannot parse 'now' timestamp {d['now']!r}")
            schema = d.get("schema")
            if schema is not None:
                schema = {k: ValueKind.parse(v) for k, v in schema.items()}
            return cls(
                weights=WeightConfig.from_dict(d.get("weights")),
                detection=DetectionConfig.from_dict(d.get("detection")),
                correction=CorrectionConfig.from_dict(d.get("correction")),
                er=ERConfig.from_dict(d.get("er")),
                preprocess=(PreprocessOptions.from_dict(d["preprocess"])
                            if d.get("preprocess") is not None else None),
                schema=schema,
                now=now,
                security=SecurityChecklist(**(d.get("security") or {})),
                contamination_from_truth=bool(d.get("contamination_from_truth", True)),
                date_formats=tuple(d.get("date_formats", DEFAULT_DATE_FORMATS)),
                accuracy_z=float(d.get("accuracy_z", 6.0)),
                synth=d.get("synth"),
            )
        except TypeError as exc:
            raise ValidationError(f"bad config: {exc}") from exc

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self):
        return {
            "weights": self.weights.to_dict(),
            "detection": self.detection.to_dict(),
            "correction": self.correction.to_dict(),
            "er": self.er.to_dict(),
            "preprocess": None if self.preprocess is None else self.preprocess.to_dict(),
            "schema": None if self.schema is None else {k: v.value for k, v in self.schema.items()},
            "now": self.now.strftime("%Y-%m-%dT%H:%M:%SZ"),
            "security": self.security.to_dict(),
            "contamination_from_truth": self.contamination_from_truth,
            "date_formats": list(self.date_formats),
            "accuracy_z": self.accuracy_z,
            "synth": self.synth,
        }


# input

def infer_schema(t):
    """Declared kind per column: the most common kind among its present cells.

    Text columns whose cells are mostly mixed letters and digits become
    Alphanumeric. Ties prefer Numeric, then Date, then String.
    """
    rank = {ValueKind.NUMERIC: 0, ValueKind.DATE: 1, ValueKind.STRING: 2, ValueKind.ALPHANUMERIC: 3}
    out = {}
    for name in t.names:
        counts = Counter(k for k in t.kinds(name) if k is not ValueKind.MISSING)
        if not counts:
            out[name] = ValueKind.STRING
            continue
        out[name] = min(counts, key=lambda k: (-counts[k], rank[k]))
    return out


def load_input(path, cfg, meta=None):
    """Load a CSV under the configured (or inferred) schema and preprocessing."""
    schema = cfg.schema
    if schema is None:
        raw = load_csv(path, None, meta, date_formats=cfg.date_formats)
        schema = infer_schema(raw)
    t = load_csv(path, schema, meta, date_formats=cfg.date_formats)
    if cfg.preprocess is not None:
        t = preprocess(t, cfg.preprocess)
    return t


def synthesize(rows, seed, spec, now=DEFAULT_NOW):
    """Clean base table plus injected anomalies; returns ``(table, truth)``."""
    base = generate_base(rows, seed, now)
    return inject(base, spec, now)


def check_config_columns(t, cfg):
    """Reject configuration that names columns the table does not have."""
    names = set(t.names)
    refs = {"weights.field_factors": set(cfg.weights.field_factors),
            "er.fields": set(cfg.er.fields),
            "er.key_passes": {f for p in cfg.er.key_passes for f in p},
            "correction.feature_overrides": set(cfg.correction.feature_overrides)}
    for o in cfg.correction.feature_overrides.values():
        refs["correction.feature_overrides"] |= set(o.get("allow", ())) | set(o.get("block", ()))
    if cfg.schema is not None:
        refs["schema"] = set(cfg.schema)
    for where, cols in refs.items():
        missing = sorted(cols - names)
        if missing:
            raise SchemaMismatch(f"{where} names unknown columns {missing}")


# scores beyond the assessment metrics

def accuracy_score(t, z=6.0):
    """Share (percent) of numeric and date cells within ``z`` robust deviations of the median.

    The deviation scale is 1.4826 MAD, falling back to the standard
    deviation when the MAD is zero.
    """
    inside = total = 0
    for c in t.columns:
        if c.declared_kind not in (ValueKind.NUMERIC, ValueKind.DATE):
            continue
        x = np.asarray([v if isinstance(v, float) else v.timestamp() / 86400.0
                        for v in c.values if v is not None and not isinstance(v, str)], float)
        if len(x) == 0:
            continue
        med = np.median(x)
        scale = 1.4826 * np.median(np.abs(x - med))
        if scale == 0:
            scale = x.std()
        total += len(x)
        inside += len(x) if scale == 0 else int((np.abs(x - med) <= z * scale).sum())
    return 100.0 * inside / total if total else 100.0


def binary_counts(t, lexicon):
    """Completeness, Conformity and Readability anomaly counts of ``t``."""
    return {
        "Completeness": int(pattern_completeness(t).flags.sum()),
        "Conformity": int(pattern_conformity(t).flags.sum()),
        "Readability": int(pattern_readability(t, lexicon).flags.sum()),
    }


def detection_config_for(t, truth, cfg):
    """Detection parameters; with truth, contamination is estimated from a labeled sample.

    Accuracy uses the anomalous share of a 10% row sample. Consistency uses
    the share of differing cells among duplicate copies. Uniqueness stays
    with the matcher's own share, or 0 when the truth holds no duplicates.
    """
    det = cfg.detection
    if truth is None or not cfg.contamination_from_truth:
        return det
    cont = dict(det.contamination)
    cont["Accuracy"] = estimate_contamination(truth, "Accuracy", t, seed=det.seed)
    if truth.duplicate_map:
        cont["Uniqueness"] = "auto"
        cells = len(truth.duplicate_map) * len(t.names)
        cont["Consistency"] = min(0.5, len(true_inconsistencies(truth, t)) / cells)
    else:
        cont["Uniqueness"] = 0.0
        cont["Consistency"] = 0.0
    d = det.to_dict()
    d["contamination"] = cont
    return DetectionConfig.from_dict(d)


# artifacts

@dataclass
class EvalReport:
    detection: dict
    correction: dict
    quality_before: dict
    quality_after: dict
    improvement: dict
    targeted_before: dict
    targeted_after: dict
    redetected: dict
    timings: dict = field(default_factory=dict)

    def to_dict(self):
        """JSON form; timings are left out so the document is reproducible."""
        return {
            "detection": self.detection,
            "correction": self.correction,
            "quality_before": self.quality_before,
            "quality_after": self.quality_after,
            "improvement": self.improvement,
            "targeted_before": self.targeted_before,
            "targeted_after": self.targeted_after,
            "redetected": self.redetected,
        }


@dataclass
class PipelineResult:
    table: object
    truth: object
    quality_before: object
    anomalies: object
    corrected: object
    changelog: list
    quality_after: object
    evaluation: EvalReport | None
    clusters_before: list
    clusters_after: list
    timings: dict
    files: dict = field(default_factory=dict)
    synthesized: bool = False


def _round_floats(obj):
    if isinstance(obj, float):
        return round(obj, 10)
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_round_floats(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class _Stages:
    """Runs named stages, recording wall-clock and attributing errors."""

    def __init__(self):
        self.timings = {}

    def run(self, name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        except StageError:
            raise
        except DQError as exc:
            raise StageError(name, exc) from exc
        except (ValueError, KeyError, TypeError, OSError) as exc:
            raise StageError(name, exc) from exc
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0


def _fit_matcher(t, er_cfg):
    try:
        model, _ = fit_model(t, er_cfg)
    except (EmptyTrainingSet, SingleClassTraining):
        return None
    return model


def _targeted(report, accuracy):
    out = {m: report.metric_scores.get(m) for m in TARGETED_METRICS if m != "accuracy"}
    out["accuracy"] = accuracy
    return out


def run_pipeline(cfg, table=None, truth=None, outdir=None, *, meta=None, input_path=None):
    """Assess, detect, correct, re-assess and (with truth) evaluate.

    The table comes from ``table``, from ``input_path`` (CSV plus optional
    ``meta`` sidecar) or from ``cfg.synth`` (``{"rows", "seed", "inject"}``).
    With ``outdir`` every artifact is written there together with a
    ``manifest.json``. Failures are raised as :class:`StageError` naming the
    stage.
    """
    stages = _Stages()
    synthesized = False
    if table is None:
        if input_path is not None:
            table = stages.run("load", load_input, input_path, cfg, meta)
        elif cfg.synth:
            spec = stages.run("synth", InjectionSpec.from_dict, cfg.synth.get("inject"))
            table, truth = stages.run("synth", synthesize, int(cfg.synth.get("rows", 1000)),
                                      int(cfg.synth.get("seed", 0)), spec, cfg.now)
            synthesized = True
        else:
            raise StageError("load", ValidationError("no input table, path or synth spec"))
    t = table

    def _assess(tab, clusters, lexicon):
        return assess(tab, cfg.weights, cfg.now, clusters=clusters, checklist=cfg.security,
                      lexicon=lexicon)

    def stage_assess():
        check_config_columns(t, cfg)
        lexicon = Lexicon.from_table(t)
        model = _fit_matcher(t, cfg.er)
        clusters = [] if model is None else resolve(t, model, cfg.detection.max_block_size)
        return lexicon, model, clusters, _assess(t, clusters, lexicon)

    lexicon, model, clusters_before, before = stages.run("assess", stage_assess)
    det_cfg = stages.run("detect", detection_config_for, t, truth, cfg)
    dims = det_cfg.dimensions
    if model is None:
        dims = tuple(d for d in dims if d not in ("Uniqueness", "Consistency"))
        det_cfg = DetectionConfig.from_dict({**det_cfg.to_dict(), "dimensions": list(dims)})
    report = stages.run("detect", detect, t, det_cfg, model=model, lexicon=lexicon)
    corrected, changelog = stages.run("correct", correct_all, t, report, cfg.correction,
                                      lexicon=lexicon, matcher=model,
                                      max_block_size=cfg.detection.max_block_size)

    def stage_reassess():
        if corrected is t:
            return clusters_before, before
        clusters = [] if model is None else resolve(corrected, model, cfg.detection.max_block_size)
        return clusters, _assess(corrected, clusters, lexicon)

    clusters_after, after = stages.run("reassess", stage_reassess)

    def stage_evaluate():
        acc_before = accuracy_score(t, cfg.accuracy_z)
        acc_after = accuracy_score(corrected, cfg.accuracy_z)
        return EvalReport(
            detection=evaluate_detection(report, truth, t) if truth is not None else {},
            correction=evaluate_correction(changelog, truth) if truth is not None else {},
            quality_before=before.to_dict(),
            quality_after=after.to_dict(),
            improvement=quality_improvement(before, after),
            targeted_before=_targeted(before, acc_before),
            targeted_after=_targeted(after, acc_after),
            redetected=binary_counts(corrected, lexicon),
        )

    evaluation = stages.run("evaluate", stage_evaluate)
    evaluation.timings = stages.timings
    result = PipelineResult(t, truth, before, report, corrected, changelog, after, evaluation,
                            clusters_before, clusters_after, stages.timings,
                            synthesized=synthesized)
    if outdir is not None:
        stages.run("write", write_artifacts, result, cfg, Path(outdir), model)
    return result


def write_artifacts(result, cfg, outdir, model=None):
    outdir.mkdir(parents=True, exist_ok=True)
    files = {}

    def out(name):
        files[name] = outdir / name
        return outdir / name

    write_json(out("config.json"), cfg.to_dict())
    if result.synthesized:
        result.table.to_csv(out("data.csv"))
        write_json(out("data.meta.json"), result.table.metadata_document())
    if result.truth is not None:
        write_json(out("truth.json"), result.truth.to_dict())
    write_json(out("quality_before.json"), result.quality_before.to_dict())
    write_json(out("anomalies.json"), result.anomalies.to_dict())
    version = 0 if model is None else model.version
    write_json(out("clusters.json"), clusters_to_dict(result.clusters_before, version))
    write_changelog(out("changes.jsonl"), result.changelog)
    result.corrected.to_csv(out("corrected.csv"))
    write_json(out("quality_after.json"), result.quality_after.to_dict())
    write_json(out("eval.json"), result.evaluation.to_dict())
    manifest = {
        "artifacts": {name: _sha256(path) for name, path in sorted(files.items())},
        "input_snapshot": result.table.snapshot_id,
        "output_snapshot": result.corrected.snapshot_id,
        "rows_in": result.table.n_rows,
        "rows_out": result.corrected.n_rows,
        "changes": len(result.changelog),
        "stages": ["assess", "detect", "correct", "reassess", "evaluate"],
    }
    write_json(outdir / "manifest.json", manifest)
    with open(outdir / "timings.csv", "w", encoding="utf-8") as fh:
        fh.write("stage,seconds\n")
        for name, secs in result.timings.items():
            fh.write(f"{name},{secs:.6f}\n")
    files["manifest.json"] = outdir / "manifest.json"
    files["timings.csv"] = outdir / "timings.csv"
    result.files = files
    return files


__all__ = [
    "PipelineConfig", "PipelineResult", "EvalReport", "run_pipeline", "load_input",
    "synthesize", "infer_schema", "accuracy_score", "binary_counts", "detection_config_for",
    "write_artifacts", "write_json", "SCHEMA",
]
