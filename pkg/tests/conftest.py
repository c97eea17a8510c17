from datetime import datetime, timedelta, timezone

import pytest

from dqengine.table import RowMeta, Table

NOW = datetime(2024, 1, 1, tzinfo=timezone.utc)

# acceptance results, filled by tests/test_acceptance.py and printed at the end
ACCEPTANCE = {}


def make_table(header, rows, schema=None, meta=None, **kw):
    return Table.from_rows(header, [[("" if v is None else str(v)) for v in r] for r in rows],
                           schema, meta, **kw)


def row_meta(n, created_days=100, modified_days=50, now=NOW):
    return [RowMeta(now - timedelta(days=created_days), now - timedelta(days=modified_days))
            for _ in range(n)]


@pytest.fixture
def people():
    rows = [
        ["Alice Smith", "12 Oak Street", "Female", 34, 52000],
        ["Bob Jones", "4 Elm Road", "Male", 45, 61000],
        ["Carol White", "9 Pine Avenue", "Female", 29, 48000],
        ["Dan Brown", "", "Male", None, 70000],
    ]
    return make_table(["Name", "Address", "Gender", "Age", "Salary"], rows,
                      {"Address": "Alphanumeric", "Age": "Numeric", "Salary": "Numeric"},
                      row_meta(4))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
