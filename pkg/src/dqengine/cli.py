"""The ``dq`` command.

Exit codes: 0 on success, 1 for input or configuration validation errors,
2 for any other failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .anomaly import AnomalyReport, detect, evaluate_detection
from .assessment import assess
from .correction import correct_all, evaluate_correction, read_changelog, write_changelog
from .entity_resolution import MatchModel, clusters_to_dict, fit_model, resolve
from .errors import DQError, StageError, ValidationError
from .pipeline import (
    PipelineConfig,
    check_config_columns,
    load_input,
    run_pipeline,
    synthesize,
    write_json,
)
from .synth import SCHEMA, GroundTruth, InjectionSpec
from .text import Lexicon

log = logging.getLogger("dq")
# a missing input file is an input error, not a runtime failure
_INPUT_ERRORS = (ValidationError, FileNotFoundError)


def _config(path):
    return PipelineConfig.load(path) if path else PipelineConfig()


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON: {exc}") from exc


def _table(args, cfg):
    t = load_input(args.input, cfg, getattr(args, "meta", None))
    check_config_columns(t, cfg)
    return t


def cmd_synth(args):
    spec = InjectionSpec.from_dict(_read_json(args.inject) if args.inject else None)
    t, truth = synthesize(args.rows, args.seed, spec)
    t.to_csv(args.out)
    meta = args.meta or str(Path(args.out).with_suffix(".meta.json"))
    write_json(meta, t.metadata_document())
    if args.truth:
        write_json(args.truth, truth.to_dict())


def cmd_assess(args):
    cfg = _config(args.config)
    t = _table(args, cfg)
    report = assess(t, cfg.weights, cfg.now, checklist=cfg.security, lexicon=Lexicon.from_table(t))
    write_json(args.out, report.to_dict())


def cmd_dedupe(args):
    cfg = _config(args.config)
    t = _table(args, cfg)
    if args.model and Path(args.model).exists():
        model = MatchModel.load(args.model)
    else:
        model, _ = fit_model(t, cfg.er)
        if args.model:
            model.save(args.model)
    clusters = resolve(t, model, cfg.detection.max_block_size)
    write_json(args.out, clusters_to_dict(clusters, model.version))


def cmd_detect(args):
    cfg = _config(args.config)
    t = _table(args, cfg)
    report = detect(t, cfg.detection, lexicon=Lexicon.from_table(t), er_config=cfg.er)
    write_json(args.out, report.to_dict())


def cmd_correct(args):
    cfg = _config(args.config)
    t = _table(args, cfg)
    report = AnomalyReport.from_dict(_read_json(args.anomalies))
    matcher = MatchModel.load(args.model) if args.model else None
    corrected, entries = correct_all(t, report, cfg.correction, Lexicon.from_table(t),
                                     matcher=matcher,
                                     max_block_size=cfg.detection.max_block_size)
    corrected.to_csv(args.out)
    write_changelog(args.changelog, entries)


def cmd_eval(args):
    cfg = _config(args.config)
    schema = cfg.schema or SCHEMA
    truth = GroundTruth.from_dict(_read_json(args.truth), schema)
    out = {}
    if args.pred:
        pred = AnomalyReport.from_dict(_read_json(args.pred))
        t = _table(args, cfg) if args.input else None
        out["detection"] = evaluate_detection(pred, truth, t)
    if args.changelog:
        out["correction"] = evaluate_correction(read_changelog(args.changelog), truth)
    if not out:
        raise ValidationError("eval needs --pred, --changelog or both")
    write_json(args.out, out)


def cmd_pipeline(args):
    cfg = _config(args.config)
    if args.synth:
        synth = dict(cfg.synth or {})
        if args.rows is not None:
            synth["rows"] = args.rows
        if args.seed is not None:
            synth["seed"] = args.seed
        if args.inject:
            synth["inject"] = _read_json(args.inject)
        cfg.synth = synth
        result = run_pipeline(cfg, outdir=args.outdir)
    else:
        truth = None
        if args.truth:
            truth = GroundTruth.from_dict(_read_json(args.truth), cfg.schema or SCHEMA)
        result = run_pipeline(cfg, truth=truth, outdir=args.outdir, meta=args.meta,
                              input_path=args.input)
    ev = result.evaluation
    print(f"global quality {result.quality_before.global_score:.4f} -> "
          f"{result.quality_after.global_score:.4f}; {len(result.changelog)} changes; "
          f"artifacts in {args.outdir}")
    if ev is not None and ev.correction:
        print(f"correction accuracy {ev.correction['accuracy']:.4f}")


def build_parser():
    p = argparse.ArgumentParser(prog="dq", description="Assess, detect and correct data-quality "
                                "anomalies in CSV tables.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic table with injected anomalies")
    s.add_argument("--rows", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--inject", help="JSON injection spec")
    s.add_argument("--out", required=True, help="output CSV")
    s.add_argument("--truth", help="ground-truth JSON")
    s.add_argument("--meta", help="metadata sidecar (default: <out>.meta.json)")
    s.set_defaults(func=cmd_synth)

    def table_args(sp, out_help):
        sp.add_argument("--input", required=True, help="input CSV")
        sp.add_argument("--config", help="JSON configuration")
        sp.add_argument("--meta", help="metadata sidecar JSON")
        sp.add_argument("--out", required=True, help=out_help)

    s = sub.add_parser("assess", help="score quality metrics")
    table_args(s, "quality report JSON")
    s.set_defaults(func=cmd_assess)

    s = sub.add_parser("dedupe", help="cluster duplicate records")
    table_args(s, "clusters JSON")
    s.add_argument("--model", help="match model JSON (loaded if present, else trained and saved)")
    s.set_defaults(func=cmd_dedupe)

    s = sub.add_parser("detect", help="detect anomalies")
    table_args(s, "anomaly report JSON")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("correct", help="correct detected anomalies")
    table_args(s, "corrected CSV")
    s.add_argument("--anomalies", required=True, help="anomaly report JSON")
    s.add_argument("--changelog", required=True, help="change log JSONL")
    s.add_argument("--model", help="match model JSON; fills that forge duplicates are redone")
    s.set_defaults(func=cmd_correct)

    s = sub.add_parser("eval", help="score detections and corrections against ground truth")
    s.add_argument("--pred", help="anomaly report JSON")
    s.add_argument("--changelog", help="change log JSONL")
    s.add_argument("--truth", required=True, help="ground-truth JSON")
    s.add_argument("--input", help="the detected CSV (needed for Consistency scoring)")
    s.add_argument("--config", help="JSON configuration")
    s.add_argument("--meta", help="metadata sidecar JSON")
    s.add_argument("--out", required=True, help="evaluation JSON")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("pipeline", help="run assess, detect, correct, re-assess and evaluate")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="input CSV")
    src.add_argument("--synth", action="store_true", help="synthesize the input")
    s.add_argument("--config", help="JSON configuration")
    s.add_argument("--meta", help="metadata sidecar JSON (with --input)")
    s.add_argument("--truth", help="ground-truth JSON (with --input)")
    s.add_argument("--rows", type=int, help="synthetic rows (with --synth)")
    s.add_argument("--seed", type=int, help="synthetic seed (with --synth)")
    s.add_argument("--inject", help="JSON injection spec (with --synth)")
    s.add_argument("--outdir", required=True, help="artifact directory")
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(f"dq: error in stage {exc.stage!r}: {exc.error}", file=sys.stderr)
        return 1 if isinstance(exc.error, _INPUT_ERRORS) else 2
    except _INPUT_ERRORS as exc:
        print(f"dq: invalid input: {exc}", file=sys.stderr)
        return 1
    except (DQError, OSError, ValueError) as exc:
        print(f"dq: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
