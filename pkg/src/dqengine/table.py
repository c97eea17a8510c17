"""Immutable columnar tables with typed cells.

A :class:`Table` holds one :class:`Column` per field. Each column keeps the
raw ingested strings next to the parsed values, where a parsed value is one of
``None`` (missing), ``float``, ``str`` or a UTC ``datetime``. Every
transformation returns a new table with a new ``snapshot_id``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import re
import unicodedata
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import BadTimestamp, MalformedCsv, SchemaMismatch, ShapeMismatch


class ValueKind(str, Enum):
    NUMERIC = "Numeric"
    STRING = "String"
    DATE = "Date"
    ALPHANUMERIC = "Alphanumeric"
    MISSING = "Missing"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        for kind in cls:
            if kind.value.lower() == str(name).lower():
                return kind
        raise SchemaMismatch(f"unknown kind {name!r}")


# Declared "Alphanumeric" marks a free-text column: letters and digits mixed.
ACCEPTED_KINDS = {
    ValueKind.NUMERIC: frozenset({ValueKind.NUMERIC}),
    ValueKind.STRING: frozenset({ValueKind.STRING}),
    ValueKind.DATE: frozenset({ValueKind.DATE}),
    ValueKind.ALPHANUMERIC: frozenset({ValueKind.STRING, ValueKind.ALPHANUMERIC}),
}

DEFAULT_NULL_TOKENS = frozenset({"", "n/a", "na", "null", "nan"})
DEFAULT_DATE_FORMATS = ("iso-date", "iso-datetime", "%m/%Y", "%d/%m/%Y")

_NUMBER_RE = re.compile(r"^[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?$")
_ALPHA_RE = re.compile(r"^[^\W\d_]+(?: [^\W\d_]+)*$")
_DATEISH_RE = re.compile(r"^[\d\-/:.T Z+]+$")
_ISO_DATE_RE = re.compile(r"^\d{4}-\d{2}-\d{2}$")
_ISO_DATETIME_RE = re.compile(
    r"^(\d{4}-\d{2}-\d{2})[T ](\d{2}:\d{2}(?::\d{2}(?:\.\d{1,6})?)?)(Z|[+-]\d{2}:?\d{2})?$"
)


class Cell(NamedTuple):
    raw: str
    value: object


def is_null_token(raw, null_tokens=DEFAULT_NULL_TOKENS):
    return raw is None or raw.strip().lower() in null_tokens


def parse_number(text):
    text = text.strip()
    if _NUMBER_RE.match(text):
        return float(text)
    return None


def parse_timestamp(text):
    """Parse an ISO-8601 date or date-time into an aware UTC datetime."""
    text = text.strip()
    if _ISO_DATE_RE.match(text):
        try:
            return datetime.strptime(text, "%Y-%m-%d").replace(tzinfo=timezone.utc)
        except ValueError:
            return None
    m = _ISO_DATETIME_RE.match(text)
    if not m:
        return None
    date, clock, tz = m.groups()
    if tz == "Z":
        tz = "+00:00"
    elif tz and ":" not in tz:
        tz = tz[:3] + ":" + tz[3:]
    try:
        dt = datetime.fromisoformat(f"{date}T{clock}{tz or ''}")
    except ValueError:
        return None
    if dt.tzinfo is None:
        return dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def parse_date(text, formats=DEFAULT_DATE_FORMATS):
    """Return the first successful parse of ``text`` under ``formats``, else None."""
    text = text.strip()
    if not text or not _DATEISH_RE.match(text) or not any(c.isdigit() for c in text):
        return None
    for fmt in formats:
        if fmt == "iso-date":
            if _ISO_DATE_RE.match(text):
                dt = parse_timestamp(text)
                if dt is not None:
                    return dt
        elif fmt == "iso-datetime":
            if _ISO_DATETIME_RE.match(text):
                dt = parse_timestamp(text)
                if dt is not None:
                    return dt
        else:
            try:
                return datetime.strptime(text, fmt).replace(tzinfo=timezone.utc)
            except ValueError:
                continue
    return None


def cell_kind(raw, date_formats=DEFAULT_DATE_FORMATS):
    """Classify a null-normalized raw string.

    Order is fixed: Missing, Date, Numeric, String, then Alphanumeric for
    everything else.
    """
    if raw is None:
        return ValueKind.MISSING
    text = raw.strip()
    if not text:
        return ValueKind.MISSING
    if parse_date(text, date_formats) is not None:
        return ValueKind.DATE
    if _NUMBER_RE.match(text):
        return ValueKind.NUMERIC
    if _ALPHA_RE.match(text):
        return ValueKind.STRING
    return ValueKind.ALPHANUMERIC


def value_kind(value, date_formats=DEFAULT_DATE_FORMATS):
    """Kind of a parsed value; text values are classified by their content."""
    if value is None:
        return ValueKind.MISSING
    if isinstance(value, float):
        return ValueKind.NUMERIC
    if isinstance(value, datetime):
        return ValueKind.DATE
    return cell_kind(value, date_formats)


def parse_cell(raw, kind, null_tokens=DEFAULT_NULL_TOKENS, date_formats=DEFAULT_DATE_FORMATS):
    if is_null_token(raw, null_tokens):
        return None
    text = raw.strip()
    if kind is ValueKind.NUMERIC:
        num = parse_number(text)
        return text if num is None else num
    if kind is ValueKind.DATE:
        dt = parse_date(text, date_formats)
        return text if dt is None else dt
    return text


def render_value(value, date_format="iso-date"):
    if value is None:
        return ""
    if isinstance(value, float):
        if value.is_integer() and abs(value) < 1e15:
            return str(int(value))
        return repr(value)
    if isinstance(value, datetime):
        if date_format in ("iso-date", "iso-datetime"):
            if date_format == "iso-date" and (value.hour, value.minute, value.second) == (0, 0, 0):
                return value.strftime("%Y-%m-%d")
            return value.strftime("%Y-%m-%dT%H:%M:%SZ")
        return value.strftime(date_format)
    return str(value)


def format_timestamp(dt):
    return dt.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True, eq=False)
class Column:
    name: str
    declared_kind: ValueKind
    raw: tuple
    values: tuple
    access_count: int = 0
    accessible: bool = True

    def __post_init__(self):
        if len(self.raw) != len(self.values):
            raise ShapeMismatch(f"column {self.name!r}: raw/value length differ")
        if self.access_count < 0:
            raise SchemaMismatch(f"column {self.name!r}: negative access_count")

    def __len__(self):
        return len(self.values)

    @property
    def cells(self):
        return [Cell(r, v) for r, v in zip(self.raw, self.values)]

    @cached_property
    def missing_mask(self):
        return np.fromiter((v is None for v in self.values), dtype=bool, count=len(self.values))

    def numeric_array(self):
        """Float view of the column; non-numeric cells become NaN."""
        return np.fromiter(
            (v if isinstance(v, float) else np.nan for v in self.values),
            dtype=float,
            count=len(self.values),
        )


@dataclass(frozen=True)
class RowMeta:
    created_at: datetime
    modified_at: datetime

    def __post_init__(self):
        if self.modified_at < self.created_at:
            raise BadTimestamp(
                f"modified_at {self.modified_at} precedes created_at {self.created_at}"
            )


def _digest(parts):
    h = hashlib.sha1()
    for p in parts:
        h.update(p.encode("utf-8", "surrogatepass"))
        h.update(b"\x1e")
    return h.hexdigest()[:16]


def _content_digest(columns, row_meta):
    parts = []
    for c in columns:
        parts.append(c.name)
        parts.append(c.declared_kind.value)
        parts.append(repr(c.values))
    if row_meta is not None:
        parts.append(repr([(m.created_at, m.modified_at) for m in row_meta]))
    return _digest(parts)


@dataclass(frozen=True, eq=False)
class Table:
    columns: tuple
    row_meta: tuple | None = None
    snapshot_id: str = ""
    date_formats: tuple = DEFAULT_DATE_FORMATS
    _kind_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaMismatch(f"duplicate column names in {names}")
        lengths = {len(c) for c in self.columns}
        if len(lengths) > 1:
            raise ShapeMismatch(f"columns have unequal lengths {sorted(lengths)}")
        n = lengths.pop() if lengths else 0
        if self.row_meta is not None and len(self.row_meta) != n:
            raise ShapeMismatch(f"row_meta has {len(self.row_meta)} entries for {n} rows")
        if not self.snapshot_id:
            object.__setattr__(self, "snapshot_id", _content_digest(self.columns, self.row_meta))

    # construction helpers
    @classmethod
    def from_rows(
        cls,
        header,
        rows,
        schema=None,
        row_meta=None,
        *,
        access_counts=None,
        accessible=None,
        null_tokens=DEFAULT_NULL_TOKENS,
        date_formats=DEFAULT_DATE_FORMATS,
    ):
        """Build a table from raw string rows, parsing by declared kind."""
        schema = {k: ValueKind.parse(v) for k, v in (schema or {}).items()}
        unknown = set(schema) - set(header)
        if unknown:
            raise SchemaMismatch(f"schema names not in header: {sorted(unknown)}")
        rows = [list(r) for r in rows]
        for i, r in enumerate(rows):
            if len(r) != len(header):
                raise MalformedCsv(f"row {i + 1} has {len(r)} fields, header has {len(header)}")
        access_counts = access_counts or {}
        accessible = accessible or {}
        columns = []
        for j, name in enumerate(header):
            kind = schema.get(name, ValueKind.STRING)
            raw = tuple("" if r[j] is None else str(r[j]) for r in rows)
            values = tuple(parse_cell(x, kind, null_tokens, date_formats) for x in raw)
            columns.append(
                Column(
                    name,
                    kind,
                    raw,
                    values,
                    int(access_counts.get(name, 0)),
                    bool(accessible.get(name, True)),
                )
            )
        return cls(tuple(columns), None if row_meta is None else tuple(row_meta),
                   date_formats=tuple(date_formats))

    # basic access
    @property
    def n_rows(self):
        return len(self.columns[0]) if self.columns else 0

    @property
    def names(self):
        return [c.name for c in self.columns]

    @property
    def n_cells(self):
        return self.n_rows * len(self.columns)

    def __getitem__(self, name):
        for c in self.columns:
            if c.name == name:
                return c
        raise SchemaMismatch(f"unknown column {name!r}")

    def __contains__(self, name):
        return any(c.name == name for c in self.columns)

    def row(self, i):
        return tuple(c.values[i] for c in self.columns)

    def rows(self):
        return list(zip(*(c.values for c in self.columns)))

    def kinds(self, name):
        """Per-cell :class:`ValueKind` for one column (cached)."""
        kinds = self._kind_cache.get(name)
        if kinds is None:
            fmts = self.date_formats
            memo = {}
            out = []
            for v in self[name].values:
                if isinstance(v, str):
                    k = memo.get(v)
                    if k is None:
                        k = memo[v] = cell_kind(v, fmts)
                    out.append(k)
                else:
                    out.append(value_kind(v, fmts))
            kinds = self._kind_cache[name] = tuple(out)
        return kinds

    def conforming_mask(self, name):
        """True where a non-missing cell's kind is accepted by the declared kind."""
        col = self[name]
        accepted = ACCEPTED_KINDS[col.declared_kind]
        return np.fromiter(
            (k in accepted for k in self.kinds(name)), dtype=bool, count=self.n_rows
        )

    # derivation
    def _derive(self, op, columns, row_meta="keep"):
        meta = self.row_meta if row_meta == "keep" else row_meta
        digest = _content_digest(columns, meta)
        return Table(
            tuple(columns),
            meta,
            _digest([self.snapshot_id, op, digest]),
            self.date_formats,
        )

    def with_values(self, updates, op="update"):
        """Return a new table with ``updates[(row, column)] = value`` applied."""
        by_col = {}
        for (r, name), v in updates.items():
            by_col.setdefault(name, {})[r] = v
        fmt = self.date_formats[0] if self.date_formats else "iso-date"
        columns = []
        for c in self.columns:
            edits = by_col.pop(c.name, None)
            if not edits:
                columns.append(c)
                continue
            values = list(c.values)
            raw = list(c.raw)
            for r, v in edits.items():
                if isinstance(v, (int, np.integer, np.floating)) and not isinstance(v, bool):
                    v = float(v)
                values[r] = v
                raw[r] = render_value(v, fmt)
            columns.append(replace(c, raw=tuple(raw), values=tuple(values)))
        if by_col:
            raise SchemaMismatch(f"unknown columns in update: {sorted(by_col)}")
        return self._derive(op, columns)

    def take(self, rows, op="take"):
        rows = list(rows)
        columns = [
            replace(c, raw=tuple(c.raw[i] for i in rows), values=tuple(c.values[i] for i in rows))
            for c in self.columns
        ]
        meta = None if self.row_meta is None else tuple(self.row_meta[i] for i in rows)
        return self._derive(op, columns, meta)

    def drop_rows(self, rows, op="drop_rows"):
        drop = set(rows)
        return self.take([i for i in range(self.n_rows) if i not in drop], op)

    def append_rows(self, rows, row_meta=None, op="append_rows"):
        """Append rows of parsed values (one tuple per row, schema order)."""
        fmt = self.date_formats[0] if self.date_formats else "iso-date"
        columns = []
        for j, c in enumerate(self.columns):
            new_vals = tuple(r[j] for r in rows)
            columns.append(
                replace(
                    c,
                    raw=c.raw + tuple(render_value(v, fmt) for v in new_vals),
                    values=c.values + new_vals,
                )
            )
        meta = self.row_meta
        if meta is not None:
            if row_meta is None or len(row_meta) != len(rows):
                raise ShapeMismatch("row_meta required for every appended row")
            meta = meta + tuple(row_meta)
        return self._derive(op, columns, meta)

    def with_metadata(self, access_counts=None, accessible=None, row_meta="keep"):
        access_counts = access_counts or {}
        accessible = accessible or {}
        columns = [
            replace(
                c,
                access_count=int(access_counts.get(c.name, c.access_count)),
                accessible=bool(accessible.get(c.name, c.accessible)),
            )
            for c in self.columns
        ]
        meta = self.row_meta if row_meta == "keep" else (None if row_meta is None else tuple(row_meta))
        return self._derive("metadata", columns, meta)

    def render_rows(self):
        """Rows of strings suitable for CSV output."""
        fmt = self.date_formats[0] if self.date_formats else "iso-date"
        rendered = []
        for c in self.columns:
            out = []
            for raw, v in zip(c.raw, c.values):
                if v is None:
                    out.append("")
                elif isinstance(v, str):
                    out.append(v)
                elif isinstance(v, float):
                    out.append(raw.strip() if parse_number(raw) == v else render_value(v, fmt))
                else:
                    out.append(raw.strip() if parse_date(raw, self.date_formats) == v
                               else render_value(v, fmt))
            rendered.append(out)
        return [list(r) for r in zip(*rendered)] if rendered else []

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.names)
            w.writerows(self.render_rows())

    def metadata_document(self):
        """Sidecar JSON document describing this table's metadata."""
        doc = {
            "fields": {
                c.name: {"access_count": c.access_count, "accessible": c.accessible}
                for c in self.columns
            }
        }
        if self.row_meta is not None:
            doc["rows"] = [
                {"created_at": format_timestamp(m.created_at),
                 "modified_at": format_timestamp(m.modified_at)}
                for m in self.row_meta
            ]
        return doc


def _parse_meta_timestamp(text, where):
    dt = parse_timestamp(str(text))
    if dt is None:
        raise BadTimestamp(f"{where}: cannot parse timestamp {text!r}")
    return dt


def read_metadata(path):
    """Parse a metadata sidecar into (access_counts, accessible, row_meta)."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    fields = doc.get("fields", {}) or {}
    access = {k: int(v.get("access_count", 0)) for k, v in fields.items()}
    accessible = {k: bool(v.get("accessible", True)) for k, v in fields.items()}
    rows = doc.get("rows")
    meta = None
    if rows is not None:
        meta = []
        for i, r in enumerate(rows):
            created = _parse_meta_timestamp(r["created_at"], f"rows[{i}].created_at")
            modified = _parse_meta_timestamp(r["modified_at"], f"rows[{i}].modified_at")
            meta.append(RowMeta(created, modified))
    return access, accessible, meta


def load_csv(
    path,
    schema=None,
    meta=None,
    *,
    null_tokens=DEFAULT_NULL_TOKENS,
    date_formats=DEFAULT_DATE_FORMATS,
):
    """Load an RFC-4180 UTF-8 CSV with a mandatory header row.

    Parameters
    ----------
    path : path-like
        CSV file.
    schema : mapping, optional
        Column name to declared kind ("Numeric", "String", "Date",
        "Alphanumeric"). Columns absent from the schema are String.
    meta : path-like, optional
        Metadata sidecar with field access counts/accessibility and per-row
        creation and modification timestamps.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, strict=True)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedCsv(f"{path}: missing header row") from None
        except csv.Error as exc:
            raise MalformedCsv(f"{path}: {exc}") from exc
        try:
            rows = list(reader)
        except csv.Error as exc:
            raise MalformedCsv(f"{path}: {exc}") from exc
    access = accessible = row_meta = None
    if meta is not None:
        access, accessible, row_meta = read_metadata(meta)
        unknown = set(access) - set(header)
        if unknown:
            raise SchemaMismatch(f"sidecar fields not in header: {sorted(unknown)}")
        if row_meta is not None and len(row_meta) != len(rows):
            raise ShapeMismatch(f"sidecar has {len(row_meta)} rows, CSV has {len(rows)}")
    return Table.from_rows(
        header,
        rows,
        schema,
        row_meta,
        access_counts=access,
        accessible=accessible,
        null_tokens=null_tokens,
        date_formats=date_formats,
    )


# preprocessing

_KEEP_IN_NUMERIC = frozenset("-/:.")
_NUMERICISH_RE = re.compile(r"^[\d\-/:.]*\d[\d\-/:.]*$")
_WS_RE = re.compile(r"\s+")


def _is_symbol(ch):
    return unicodedata.category(ch)[0] in "PS"


_PLAIN_RE = re.compile(r"[A-Za-z0-9\s]*\Z")


def strip_symbols(text):
    """Remove punctuation and symbols; keep ``- / : .`` inside numeric/date tokens."""
    if _PLAIN_RE.match(text):
        return " ".join(text.split())
    out = []
    for tok in text.split():
        kept = "".join(ch for ch in tok if not _is_symbol(ch) or ch in _KEEP_IN_NUMERIC)
        if not _NUMERICISH_RE.match(kept):
            kept = "".join(ch for ch in kept if not _is_symbol(ch))
        if kept:
            out.append(kept)
    return " ".join(out)


def _load_wordlist(name):
    path = Path(__file__).with_name("data") / name
    with open(path, encoding="utf-8") as fh:
        return frozenset(
            line.strip().lower() for line in fh if line.strip() and not line.startswith("#")
        )


STOPWORDS = _load_wordlist("stopwords.txt")


@dataclass(frozen=True)
class PreprocessOptions:
    lowercase: bool = False
    strip_symbols: bool = False
    remove_stopwords: bool = False
    normalize_nulls: bool = False
    minmax_scale: bool = False
    free_text_columns: tuple = ()
    null_tokens: frozenset = DEFAULT_NULL_TOKENS
    stopwords: frozenset = STOPWORDS

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        if "free_text_columns" in d:
            d["free_text_columns"] = tuple(d["free_text_columns"])
        if "null_tokens" in d:
            d["null_tokens"] = frozenset(t.lower() for t in d["null_tokens"])
        d.pop("stopwords", None)
        return cls(**d)

    def to_dict(self):
        return {
            "lowercase": self.lowercase,
            "strip_symbols": self.strip_symbols,
            "remove_stopwords": self.remove_stopwords,
            "normalize_nulls": self.normalize_nulls,
            "minmax_scale": self.minmax_scale,
            "free_text_columns": list(self.free_text_columns),
            "null_tokens": sorted(self.null_tokens),
        }


def _clean_text(v, opts, free_text):
    if opts.normalize_nulls and v.strip().lower() in opts.null_tokens:
        return None
    if opts.lowercase:
        v = v.lower()
    if opts.strip_symbols:
        v = strip_symbols(v)
    if opts.remove_stopwords and free_text:
        v = " ".join(t for t in v.split() if t.lower() not in opts.stopwords)
    v = _WS_RE.sub(" ", v).strip()
    if opts.normalize_nulls and v.lower() in opts.null_tokens:
        return None
    return v


def preprocess(t, opts):
    """Apply the selected normalizations and return a new table.

    >>> from dqengine.table import Table, PreprocessOptions, preprocess
    >>> t = Table.from_rows(["a"], [["Good Morning!!"]])
    >>> preprocess(t, PreprocessOptions(lowercase=True, strip_symbols=True))["a"].values
    ('good morning',)
    """
    columns = []
    for c in t.columns:
        free_text = c.name in opts.free_text_columns
        values = []
        memo = {}
        for v in c.values:
            if isinstance(v, str):
                nv = memo.get(v, memo)
                if nv is memo:
                    nv = memo[v] = _clean_text(v, opts, free_text)
                values.append(nv)
            else:
                values.append(v)
        if opts.minmax_scale and c.declared_kind is ValueKind.NUMERIC:
            nums = [v for v in values if isinstance(v, float)]
            if nums:
                lo, hi = min(nums), max(nums)
                span = hi - lo
                values = [
                    ((v - lo) / span if span > 0 else 0.0) if isinstance(v, float) else v
                    for v in values
                ]
        columns.append(replace(c, values=tuple(values)))
    return t._derive("preprocess:" + json.dumps(opts.to_dict(), sort_keys=True), columns)


def _normalized_equal(a, b):
    if a is None or b is None:
        return a is None and b is None
    return type(a) is type(b) and a == b


def diff_count(a, b):
    """Number of aligned cell positions whose values differ."""
    if a.names != b.names or a.n_rows != b.n_rows:
        raise ShapeMismatch(
            f"cannot diff {len(a.names)}x{a.n_rows} against {len(b.names)}x{b.n_rows}"
        )
    total = 0
    for ca, cb in zip(a.columns, b.columns):
        if ca.values is cb.values:
            continue
        total += sum(1 for x, y in zip(ca.values, cb.values) if not _normalized_equal(x, y))
    return total
