import json

import pytest

from dqengine.cli import main


@pytest.fixture(scope="module")
def synth_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--rows", "500", "--seed", "2", "--out", str(d / "data.csv"),
                 "--truth", str(d / "truth.json")]) == 0
    return d


def test_synth_writes_sidecar(synth_files):
    assert (synth_files / "data.meta.json").exists()
    assert json.loads((synth_files / "truth.json").read_text())["entries"]


def test_stepwise_commands(synth_files, tmp_path):
    d = synth_files
    common = ["--input", str(d / "data.csv"), "--meta", str(d / "data.meta.json")]
    assert main(["assess", *common, "--out", str(tmp_path / "q.json")]) == 0
    assert "global" in json.loads((tmp_path / "q.json").read_text())
    model = tmp_path / "model.json"
    assert main(["dedupe", *common, "--model", str(model), "--out", str(tmp_path / "c.json")]) == 0
    assert model.exists()
    assert main(["dedupe", *common, "--model", str(model), "--out", str(tmp_path / "c2.json")]) == 0
    assert (tmp_path / "c.json").read_bytes() == (tmp_path / "c2.json").read_bytes()
    assert main(["detect", *common, "--out", str(tmp_path / "a.json")]) == 0
    assert main(["correct", *common, "--anomalies", str(tmp_path / "a.json"),
                 "--changelog", str(tmp_path / "log.jsonl"),
                 "--out", str(tmp_path / "fixed.csv")]) == 0
    assert main(["eval", "--pred", str(tmp_path / "a.json"), "--changelog",
                 str(tmp_path / "log.jsonl"), "--truth", str(d / "truth.json"), *common[:2],
                 "--out", str(tmp_path / "e.json")]) == 0
    ev = json.loads((tmp_path / "e.json").read_text())
    assert ev["detection"]["Completeness"]["recall"] == 1.0
    assert 0 <= ev["correction"]["accuracy"] <= 1


def test_pipeline_command(tmp_path, capsys):
    assert main(["pipeline", "--synth", "--rows", "400", "--seed", "1",
                 "--outdir", str(tmp_path)]) == 0
    assert "global quality" in capsys.readouterr().out
    assert (tmp_path / "manifest.json").exists()


def test_exit_codes(synth_files, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"er": {"fields": ["NoSuchColumn"]}}))
    assert main(["pipeline", "--input", str(synth_files / "data.csv"), "--config", str(bad),
                 "--outdir", str(tmp_path / "o")]) == 1
    assert main(["assess", "--input", str(tmp_path / "missing.csv"),
                 "--out", str(tmp_path / "q.json")]) == 1
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert main(["assess", "--input", str(synth_files / "data.csv"), "--config", str(broken),
                 "--out", str(tmp_path / "q.json")]) == 1
    # a directory where a file is expected is an environment failure, not bad input
    assert main(["assess", "--input", str(synth_files / "data.csv"),
                 "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit):
        main(["nope"])
