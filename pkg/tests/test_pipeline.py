import json

import pytest

from dqengine.errors import SchemaMismatch, StageError, ValidationError
from dqengine.pipeline import PipelineConfig, infer_schema, run_pipeline
from dqengine.synth import generate_base
from dqengine.table import ValueKind

from conftest import make_table

SMALL = {"rows": 600, "seed": 3}


def test_config_round_trip_and_unknown_keys():
    cfg = PipelineConfig.from_dict({"accuracy_z": 5.0, "now": "2023-06-01T00:00:00Z"})
    assert PipelineConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()
    with pytest.raises(ValidationError):
        PipelineConfig.from_dict({"weigths": {}})
    with pytest.raises(ValidationError):
        PipelineConfig.from_dict({"now": "yesterday"})


def test_infer_schema():
    t = make_table(["n", "d", "s", "m"], [["1", "2020-01-01", "x", ""], ["2", "2021-01-01", "y", ""],
                                          ["x", "2022-01-01", "3", ""]])
    s = infer_schema(t)
    assert s["n"] is ValueKind.NUMERIC and s["d"] is ValueKind.DATE
    assert s["s"] is ValueKind.STRING


def test_clean_synthetic_input_changes_nothing():
    zero = dict(missing=0, outlier=0, nonconforming=0, misspell=0, duplicate=0)
    cfg = PipelineConfig.from_dict({"synth": {"rows": 400, "seed": 1, "inject": zero}})
    res = run_pipeline(cfg)
    assert res.anomalies.records == []
    assert res.changelog == [] and res.corrected is res.table
    assert res.quality_after.to_dict() == res.quality_before.to_dict()


def test_without_truth_the_default_rate_is_flagged():
    # quantile thresholds flag the configured share even on clean data
    t = generate_base(400, 1)
    res = run_pipeline(PipelineConfig(), table=t)
    assert len(res.anomalies.by_dimension("Accuracy")) == pytest.approx(0.01 * 2 * 400, abs=2)


def test_stale_config_column_fails_in_assess():
    cfg = PipelineConfig.from_dict({"er": {"fields": ["Name", "Nickname"]}})
    with pytest.raises(StageError) as info:
        run_pipeline(cfg, table=generate_base(100, 0))
    assert info.value.stage == "assess"
    assert isinstance(info.value.error, SchemaMismatch)


def test_synthetic_run_writes_manifest(tmp_path):
    cfg = PipelineConfig.from_dict({"synth": SMALL})
    res = run_pipeline(cfg, outdir=tmp_path)
    names = {"config.json", "truth.json", "data.csv", "data.meta.json", "quality_before.json",
             "anomalies.json", "clusters.json", "changes.jsonl", "corrected.csv",
             "quality_after.json", "eval.json", "manifest.json", "timings.csv"}
    assert names <= {p.name for p in tmp_path.iterdir()}
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert set(man["artifacts"]) == names - {"manifest.json", "timings.csv"}
    assert man["changes"] == len(res.changelog) > 0
    assert man["rows_in"] == res.table.n_rows
    ev = res.evaluation
    assert all(v == 0 for v in ev.redetected.values())
    for m, v in ev.targeted_before.items():
        assert ev.targeted_after[m] >= v - 1e-9, m
    assert res.quality_after.global_score > res.quality_before.global_score


def test_pipeline_is_deterministic(tmp_path):
    cfg = PipelineConfig.from_dict({"synth": SMALL})
    run_pipeline(cfg, outdir=tmp_path / "a")
    run_pipeline(cfg, outdir=tmp_path / "b")
    for p in (tmp_path / "a").iterdir():
        if p.name != "timings.csv":
            assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes(), p.name
