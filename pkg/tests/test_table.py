import json

import pytest

from dqengine.errors import BadTimestamp, MalformedCsv, SchemaMismatch, ShapeMismatch
from dqengine.table import (
    PreprocessOptions,
    ValueKind,
    cell_kind,
    diff_count,
    load_csv,
    parse_cell,
    preprocess,
)

from conftest import make_table


def write(tmp_path, text, name="t.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_load_three_rows(tmp_path):
    t = load_csv(write(tmp_path, "a,b\n1,x\n2,y\n3,z\n"), {"a": "Numeric"})
    assert t.n_rows == 3
    assert t.snapshot_id
    assert t["a"].values == (1.0, 2.0, 3.0)
    assert t["b"].raw == ("x", "y", "z")


def test_null_token_is_missing(tmp_path):
    t = load_csv(write(tmp_path, "a\nN/A\nnull\nNaN\nok\n"))
    assert t["a"].values == (None, None, None, "ok")
    assert t["a"].raw[0] == "N/A"


def test_header_only_is_empty_table(tmp_path):
    t = load_csv(write(tmp_path, "a,b\n"))
    assert t.n_rows == 0
    assert t.names == ["a", "b"]


def test_load_errors(tmp_path):
    with pytest.raises(MalformedCsv):
        load_csv(write(tmp_path, "a,b\n1\n"))
    with pytest.raises(MalformedCsv):
        load_csv(write(tmp_path, ""))
    with pytest.raises(SchemaMismatch):
        load_csv(write(tmp_path, "a\n1\n"), {"zz": "Numeric"})


def test_sidecar(tmp_path):
    csv = write(tmp_path, "a,b\n1,x\n2,y\n")
    meta = tmp_path / "m.json"
    meta.write_text(json.dumps({
        "fields": {"a": {"access_count": 5, "accessible": False}},
        "rows": [{"created_at": "2020-01-01T00:00:00Z", "modified_at": "2021-01-01T00:00:00Z"}] * 2,
    }))
    t = load_csv(csv, None, meta)
    assert t["a"].access_count == 5 and not t["a"].accessible
    assert t["b"].access_count == 0 and t["b"].accessible
    assert t.row_meta[0].created_at.year == 2020


def test_sidecar_rejects_modified_before_created(tmp_path):
    csv = write(tmp_path, "a\n1\n")
    meta = tmp_path / "m.json"
    meta.write_text(json.dumps({"rows": [{"created_at": "2021-01-01T00:00:00Z",
                                          "modified_at": "2020-01-01T00:00:00Z"}]}))
    with pytest.raises(BadTimestamp):
        load_csv(csv, None, meta)


def test_sidecar_row_count_mismatch(tmp_path):
    csv = write(tmp_path, "a\n1\n2\n")
    meta = tmp_path / "m.json"
    meta.write_text(json.dumps({"rows": [{"created_at": "2020-01-01T00:00:00Z",
                                          "modified_at": "2020-01-01T00:00:00Z"}]}))
    with pytest.raises(ShapeMismatch):
        load_csv(csv, None, meta)


@pytest.mark.parametrize("raw,kind", [
    ("12345", ValueKind.NUMERIC),
    ("-3.5e2", ValueKind.NUMERIC),
    ("2020-03-27", ValueKind.DATE),
    ("05/2030", ValueKind.DATE),
    ("27/03/2020", ValueKind.DATE),
    ("AB12", ValueKind.ALPHANUMERIC),
    ("hello world", ValueKind.STRING),
    ("13/45/9999", ValueKind.ALPHANUMERIC),
    ("", ValueKind.MISSING),
])
def test_cell_kind(raw, kind):
    assert cell_kind(raw) is kind


def test_nonconforming_cell_keeps_text():
    assert parse_cell("abc", ValueKind.NUMERIC) == "abc"
    assert parse_cell(" 7 ", ValueKind.NUMERIC) == 7.0


def test_preprocess_examples():
    t = make_table(["s", "n", "z"], [["Good Morning!!", 0, "  NULL "], ["x", 5, "a"],
                                     ["y", 10, "b"]], {"n": "Numeric"})
    out = preprocess(t, PreprocessOptions(lowercase=True, strip_symbols=True,
                                          normalize_nulls=True, minmax_scale=True))
    assert out["s"].values[0] == "good morning"
    assert out["n"].values == (0.0, 0.5, 1.0)
    assert out["z"].values[0] is None
    # the input snapshot is untouched
    assert t["s"].values[0] == "Good Morning!!"
    assert out.snapshot_id != t.snapshot_id


def test_stopwords_only_on_free_text():
    t = make_table(["free", "cat"], [["the cat and the dog", "the end"]])
    out = preprocess(t, PreprocessOptions(remove_stopwords=True, free_text_columns=("free",)))
    assert out["free"].values[0] == "cat dog"
    assert out["cat"].values[0] == "the end"


def test_strip_symbols_keeps_dates_and_numbers():
    t = make_table(["d", "n"], [["2020-03-27", "-1.5"]])
    out = preprocess(t, PreprocessOptions(strip_symbols=True))
    assert out["d"].values[0] == "2020-03-27"
    assert out["n"].values[0] == "-1.5"


def test_diff_count_examples():
    t = make_table(["a", "b"], [[1, 2], [3, 4]])
    assert diff_count(t, t) == 0
    u = t.with_values({(0, "a"): "9"})
    assert diff_count(t, u) == 1
    rows = [[i, i, i] for i in range(4)]
    a = make_table(["x", "y", "z"], rows)
    b = make_table(["x", "y", "z"], [[r[0], r[1], "changed"] for r in rows])
    assert diff_count(a, b) == 4


def test_diff_count_missing_differs_and_shape():
    a = make_table(["x"], [["1"], [""]])
    b = make_table(["x"], [["1"], ["0"]])
    assert diff_count(a, b) == 1
    with pytest.raises(ShapeMismatch):
        diff_count(a, make_table(["x"], [["1"]]))


def test_derivations_are_new_snapshots(people):
    before = people.rows()
    u = people.with_values({(0, "Age"): 35.0})
    assert people.rows() == before
    assert u.snapshot_id != people.snapshot_id
    assert people.drop_rows([0]).n_rows == 3
    assert people.take([1, 2]).row(0) == people.row(1)


def test_csv_round_trip(tmp_path, people):
    p = tmp_path / "out.csv"
    people.to_csv(p)
    back = load_csv(p, {c.name: c.declared_kind for c in people.columns})
    assert back.rows() == people.rows()
