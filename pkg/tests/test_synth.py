import pytest

from dqengine.errors import RateConflict, ValidationError
from dqengine.synth import (
    GroundTruth,
    InjectionSpec,
    SCHEMA,
    clean_rows_mask,
    generate_base,
    inject,
)
from dqengine.table import load_csv
from dqengine.text import Lexicon

ZERO = dict(missing=0, outlier=0, nonconforming=0, misspell=0, duplicate=0)


def test_generate_base_deterministic_and_sane():
    a, b = generate_base(500, 3), generate_base(500, 3)
    assert a.rows() == b.rows() and a.snapshot_id == b.snapshot_id
    assert generate_base(500, 4).rows() != a.rows()
    assert list(a.names) == list(SCHEMA)
    ages = a["Age"].values
    assert min(ages) >= 18 and max(ages) <= 90
    assert set(a["Gender"].values) == {"Male", "Female"}
    with pytest.raises(ValidationError):
        generate_base(0)


def test_zero_rates_leave_table_unchanged():
    base = generate_base(300, 1)
    t, truth = inject(base, InjectionSpec(**ZERO))
    assert t.rows() == base.rows()
    assert truth.entries == [] and truth.duplicate_map == {}


def test_exact_counts():
    base = generate_base(100, 2)
    t, truth = inject(base, InjectionSpec(**{**ZERO, "missing": 0.01}))
    assert len(truth.cells("Completeness")) == 5
    assert sum(v is None for c in t.columns for v in c.values) == 5
    t, truth = inject(generate_base(2000, 2), InjectionSpec(**{**ZERO, "duplicate": 0.005}))
    assert len(truth.duplicate_map) == 10 and t.n_rows == 2010
    t, truth = inject(generate_base(1000, 2), InjectionSpec(**{**ZERO, "outlier": 0.01}))
    assert len(truth.cells("Accuracy")) == 20  # 10 per numeric column


def test_truth_is_sound():
    base = generate_base(1000, 5)
    t, truth = inject(base, InjectionSpec(seed=5))
    lex = Lexicon.from_table(t)
    for e in truth.entries:
        v = t[e.col].values[e.row]
        assert v != e.original_value
        if e.dimension == "Completeness":
            assert v is None
        if e.dimension == "Readability":
            assert not lex.is_readable(v, e.col)
    cells = [(e.row, e.col) for e in truth.entries]
    assert len(cells) == len(set(cells))
    dup_rows = set(truth.duplicate_map) | set(truth.duplicate_map.values())
    assert not dup_rows & {e.row for e in truth.entries}
    mask = clean_rows_mask(truth, t.n_rows)
    assert not mask[list(dup_rows)].any()


def test_truth_round_trip(tmp_path):
    t, truth = inject(generate_base(400, 6), InjectionSpec(seed=2))
    p = tmp_path / "truth.json"
    truth.save(p)
    back = GroundTruth.load(p)
    assert back.cells() == truth.cells() and back.duplicate_map == truth.duplicate_map
    numeric = [e for e in back.entries if e.col in ("Age", "Salary")
               and e.original_value is not None]
    assert all(isinstance(e.original_value, float) for e in numeric)


def test_csv_round_trip(tmp_path):
    t, _ = inject(generate_base(200, 7), InjectionSpec(seed=1))
    p = tmp_path / "d.csv"
    t.to_csv(p)
    back = load_csv(p, SCHEMA)
    assert back.rows() == t.rows()


def test_rate_validation_and_conflict():
    with pytest.raises(ValidationError):
        InjectionSpec(missing=0.6)
    with pytest.raises(RateConflict):
        inject(generate_base(10, 0), InjectionSpec(**{**ZERO, "missing": 0.5,
                                                     "nonconforming": 0.5, "misspell": 0.5}))
