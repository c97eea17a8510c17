"""Synthetic person-records generator with labeled anomaly injection.

:func:`generate_base` builds a clean table (Name, Address, Gender, Age,
Salary) and :func:`inject` plants missing values, outliers, nonconforming
values, misspellings and near-duplicates, recording every site in a
:class:`GroundTruth`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import RateConflict, ValidationError
from .table import Column, RowMeta, Table, ValueKind, parse_date, render_value
from .text import Lexicon, bundled_words

_DATA = Path(__file__).with_name("data")
DEFAULT_NOW = datetime(2024, 1, 1, tzinfo=timezone.utc)
SCHEMA = {
    "Name": ValueKind.STRING,
    "Address": ValueKind.ALPHANUMERIC,
    "Gender": ValueKind.STRING,
    "Age": ValueKind.NUMERIC,
    "Salary": ValueKind.NUMERIC,
}
ACCESS_COUNTS = {"Name": 120, "Address": 45, "Gender": 30, "Age": 60, "Salary": 95}
DIMENSIONS = ("missing", "outlier", "nonconforming", "misspell", "duplicate")
_DIM_LABEL = {
    "missing": "Completeness",
    "outlier": "Accuracy",
    "nonconforming": "Conformity",
    "misspell": "Readability",
}


def _wordlist(name):
    with open(_DATA / name, encoding="utf-8") as fh:
        return [w.strip() for w in fh if w.strip() and not w.startswith("#")]


@lru_cache(maxsize=None)
def _tokens():
    suffixes = [tuple(p.strip() for p in line.split(",")) for line in _wordlist("street_suffixes.txt")]
    return {
        "male": [w.capitalize() for w in _wordlist("male_names.txt")],
        "female": [w.capitalize() for w in _wordlist("female_names.txt")],
        "last": [w.capitalize() for w in _wordlist("last_names.txt")],
        "streets": [w.capitalize() for w in _wordlist("streets.txt")],
        "suffixes": suffixes,
    }


def _meta_rows(rng, n, now):
    span = 5 * 365 * 86400
    created_off = rng.integers(86400, span, n)
    frac = rng.random(n)
    out = []
    for c, f in zip(created_off.tolist(), frac.tolist()):
        created = now - timedelta(seconds=int(c))
        modified = created + timedelta(seconds=int(f * c))
        out.append(RowMeta(created, modified))
    return out


def generate_base(n_rows, seed=0, now=DEFAULT_NOW):
    """Deterministic clean person-records table of ``n_rows`` rows."""
    if n_rows < 1:
        raise ValidationError("n_rows must be at least 1")
    rng = np.random.default_rng(seed)
    tok = _tokens()
    male = rng.random(n_rows) < 0.5
    first_m = rng.integers(0, len(tok["male"]), n_rows)
    first_f = rng.integers(0, len(tok["female"]), n_rows)
    last = rng.integers(0, len(tok["last"]), n_rows)
    number = rng.integers(1, 9999, n_rows)
    street = rng.integers(0, len(tok["streets"]), n_rows)
    suffix = rng.integers(0, len(tok["suffixes"]), n_rows)
    age = np.clip(np.round(rng.normal(40, 12, n_rows)), 18, 90)
    # salary rises with age so the numeric fields carry some signal for each other
    salary = np.round(np.exp(10.0 + 0.02 * (age - 40) + rng.normal(0, 0.35, n_rows)))
    names, addresses, genders = [], [], []
    for i in range(n_rows):
        first = tok["male"][first_m[i]] if male[i] else tok["female"][first_f[i]]
        names.append(f"{first} {tok['last'][last[i]]}")
        addresses.append(f"{number[i]} {tok['streets'][street[i]]} "
                         f"{tok['suffixes'][suffix[i]][0].capitalize()}")
        genders.append("Male" if male[i] else "Female")
    values = {
        "Name": names,
        "Address": addresses,
        "Gender": genders,
        "Age": [float(x) for x in age],
        "Salary": [float(x) for x in salary],
    }
    columns = []
    for name, kind in SCHEMA.items():
        vals = tuple(values[name])
        columns.append(Column(name, kind, tuple(render_value(v) for v in vals), vals,
                              ACCESS_COUNTS[name], True))
    return Table(tuple(columns), tuple(_meta_rows(rng, n_rows, now)))


@dataclass
class InjectionSpec:
    missing: float = 0.01
    outlier: float = 0.01
    nonconforming: float = 0.01
    misspell: float = 0.01
    duplicate: float = 0.005
    duplicate_perturbation: int = 2
    swap_names: bool = False
    perturb_fields: tuple = ("Name", "Address", "Age", "Salary")
    seed: int = 0

    def __post_init__(self):
        for d in DIMENSIONS:
            r = getattr(self, d)
            if not 0 <= r <= 0.5:
                raise ValidationError(f"{d} rate {r} outside [0, 0.5]")
        if self.duplicate_perturbation < 0:
            raise ValidationError("duplicate_perturbation must be nonnegative")

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        if "perturb_fields" in d:
            d["perturb_fields"] = tuple(d["perturb_fields"])
        return cls(**d)

    def to_dict(self):
        out = dict(self.__dict__)
        out["perturb_fields"] = list(self.perturb_fields)
        return out


@dataclass(frozen=True)
class TruthEntry:
    row: int
    col: str
    dimension: str
    original_value: object


@dataclass
class GroundTruth:
    entries: list = field(default_factory=list)
    duplicate_map: dict = field(default_factory=dict)

    def cells(self, dimension=None):
        return {(e.row, e.col) for e in self.entries
                if dimension is None or e.dimension == dimension}

    def by_cell(self):
        return {(e.row, e.col): e for e in self.entries}

    def clusters(self):
        """Duplicate clusters implied by ``duplicate_map`` (source plus copies)."""
        groups = {}
        for dup, src in self.duplicate_map.items():
            groups.setdefault(src, [src]).append(dup)
        return sorted(sorted(g) for g in groups.values())

    def to_dict(self):
        return {
            "entries": [
                {"row": e.row, "col": e.col, "dimension": e.dimension,
                 "original_value": render_value(e.original_value)}
                for e in self.entries
            ],
            "duplicate_map": {str(k): v for k, v in sorted(self.duplicate_map.items())},
        }

    @classmethod
    def from_dict(cls, d, schema=None):
        schema = schema or SCHEMA
        entries = []
        for e in d.get("entries", []):
            v = e["original_value"]
            kind = ValueKind.parse(schema.get(e["col"], ValueKind.STRING))
            if kind is ValueKind.NUMERIC:
                try:
                    v = float(v)
                except ValueError:
                    pass
            elif kind is ValueKind.DATE and isinstance(v, str):
                v = parse_date(v) or v
            entries.append(TruthEntry(int(e["row"]), e["col"], e["dimension"], v))
        return cls(entries, {int(k): int(v) for k, v in d.get("duplicate_map", {}).items()})

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path, schema=None):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), schema)


# perturbations

def _abbreviate(address, rng):
    words = address.split(" ")
    for full, abbr in _tokens()["suffixes"]:
        if words[-1].lower() == full:
            words[-1] = abbr.capitalize()
            return " ".join(words)
        if words[-1].lower() == abbr:
            words[-1] = full.capitalize()
            return " ".join(words)
    return address


def _perturb(row, names, rng, max_edits, swap_names, fields):
    """Copy of ``row`` with 1..``max_edits`` small field edits."""
    row = list(row)
    j = {n: i for i, n in enumerate(names)}
    if swap_names:
        parts = row[j["Name"]].split(" ")
        row[j["Name"]] = " ".join([parts[-1]] + parts[:-1])
    fields = [f for f in fields if f in j]
    n_edits = min(int(rng.integers(1, max_edits + 1)) if max_edits else 0, len(fields))
    picks = rng.choice(len(fields), size=n_edits, replace=False)
    for p in sorted(picks.tolist()):
        f = fields[p]
        v = row[j[f]]
        if f == "Name" and not swap_names:
            parts = v.split(" ")
            initial = chr(ord("A") + int(rng.integers(0, 26)))
            row[j[f]] = " ".join(parts[:1] + [initial] + parts[1:])
        elif f == "Address":
            row[j[f]] = _abbreviate(v, rng)
        elif f == "Age":
            row[j[f]] = float(min(90, max(18, v + (1 if rng.random() < 0.5 else -1))))
        elif f == "Salary":
            pct = 0.01 + 0.02 * rng.random()
            row[j[f]] = float(round(v * (1 + pct if rng.random() < 0.5 else 1 - pct)))
    return tuple(row)


_LETTERS = "abcdefghijklmnopqrstuvwxyz"


def _misspell(value, rng, base, max_tries=50):
    """Apply one or two letter edits to one token, leaving the word list."""
    toks = [t for t in value.split(" ") if t.isalpha() and len(t) >= 3]
    if not toks:
        return None
    for _ in range(max_tries):
        tok = toks[int(rng.integers(0, len(toks)))]
        w = list(tok)
        for _ in range(1 if rng.random() < 0.7 else 2):
            op = int(rng.integers(0, 3))
            k = int(rng.integers(1, len(w)))  # keep the first letter
            if op == 0 and len(w) > 3:
                del w[k]
            elif op == 1:
                w[k] = rng.choice(list(_LETTERS.replace(w[k].lower(), "")))
            else:
                w.insert(k, rng.choice(list(_LETTERS)))
        new = "".join(w)
        if new.lower() in base or new.lower() == tok.lower():
            continue
        parts = value.split(" ")
        parts[parts.index(tok)] = new
        return " ".join(parts)
    return None


def _nonconforming(col, value, rng):
    kind = col.declared_kind
    if kind is ValueKind.NUMERIC:
        y = int(rng.integers(1950, 2010))
        return f"{y}-{int(rng.integers(1, 13)):02d}-{int(rng.integers(1, 29)):02d}"
    if kind is ValueKind.ALPHANUMERIC:
        return f"{int(rng.integers(1, 13)):02d}/{int(rng.integers(1990, 2030))}"
    if kind is ValueKind.DATE:
        return str(int(rng.integers(1000, 99999)))
    return str(int(rng.integers(1, 99999)))


def inject(t, spec, now=DEFAULT_NOW):
    """Plant labeled anomalies into ``t``.

    Duplicates are appended first; every other injection avoids duplicate
    sources and copies so clusters stay clean. Cell injections are disjoint.
    Returns ``(table, truth)``.
    """
    rng = np.random.default_rng(spec.seed)
    n = t.n_rows
    names = list(t.names)
    truth = GroundTruth()
    # duplicates
    n_dup = int(round(spec.duplicate * n))
    rows = t.rows()
    new_rows = []
    if n_dup:
        sources = np.sort(rng.choice(n, n_dup, replace=False)).tolist()
        for k, s in enumerate(sources):
            new_rows.append(_perturb(rows[s], names, rng, spec.duplicate_perturbation,
                                     spec.swap_names, spec.perturb_fields))
            truth.duplicate_map[n + k] = s
        meta = None if t.row_meta is None else _meta_rows(rng, n_dup, now)
        t = t.append_rows(new_rows, meta, op="inject:duplicates")
    reserved = set(truth.duplicate_map) | set(truth.duplicate_map.values())
    free_rows = np.asarray([i for i in range(n) if i not in reserved], dtype=np.int64)
    used = set()
    updates = {}

    def pick(col_names, count, accept):
        cells = []
        if count == 0:
            return cells
        pool = [(int(r), c) for c in col_names for r in free_rows]
        order = rng.permutation(len(pool))
        for idx in order.tolist():
            r, c = pool[idx]
            if (r, c) in used or not accept(r, c):
                continue
            cells.append((r, c))
            used.add((r, c))
            if len(cells) == count:
                return cells
        raise RateConflict(f"only {len(cells)} of {count} disjoint cells available")

    values = {c.name: c.values for c in t.columns}
    # outliers: exactly round(rate * n) per numeric column
    numeric = [c.name for c in t.columns if c.declared_kind is ValueKind.NUMERIC]
    for name in numeric:
        arr = np.asarray([v for v in values[name][:n] if isinstance(v, float)])
        if len(arr) < 2:
            continue
        mean, sd = float(arr.mean()), float(arr.std())
        for r, c in pick([name], int(round(spec.outlier * n)), lambda r, c: True):
            x = values[c][r]
            new = round(max(x, mean) + (6 + 4 * rng.random()) * sd)
            updates[(r, c)] = float(new)
            truth.entries.append(TruthEntry(r, c, "Accuracy", x))
    total_cells = n * len(names)
    cols = {c.name: c for c in t.columns}
    for r, c in pick(names, int(round(spec.nonconforming * total_cells)), lambda r, c: True):
        new = _nonconforming(cols[c], values[c][r], rng)
        updates[(r, c)] = new
        truth.entries.append(TruthEntry(r, c, "Conformity", values[c][r]))
    base = bundled_words()
    text = [c.name for c in t.columns if c.declared_kind in (ValueKind.STRING, ValueKind.ALPHANUMERIC)]
    misspelled = {}

    def can_misspell(r, c):
        v = values[c][r]
        if not isinstance(v, str):
            return False
        new = _misspell(v, rng, base)
        if new is None:
            return False
        misspelled[(r, c)] = new
        return True

    for r, c in pick(text, int(round(spec.misspell * total_cells)), can_misspell):
        updates[(r, c)] = misspelled[(r, c)]
        truth.entries.append(TruthEntry(r, c, "Readability", values[c][r]))
    for r, c in pick(names, int(round(spec.missing * total_cells)), lambda r, c: True):
        updates[(r, c)] = None
        truth.entries.append(TruthEntry(r, c, "Completeness", values[c][r]))
    if updates:
        t = t.with_values(updates, op="inject:cells")
    t = _settle_readability(t, truth)
    truth.entries.sort(key=lambda e: (e.row, names.index(e.col)))
    return t, truth


def _settle_readability(t, truth):
    """Keep only misspellings that the table's own lexicon flags.

    A frequency-admitted variant would be readable by construction; such
    sites are reverted so the truth matches what the metric can see.
    """
    while True:
        lex = Lexicon.from_table(t)
        revert = {}
        for e in truth.entries:
            if e.dimension != "Readability":
                continue
            v = t[e.col].values[e.row]
            if lex.is_readable(v, e.col):
                revert[(e.row, e.col)] = e.original_value
        if not revert:
            return t
        truth.entries[:] = [e for e in truth.entries if (e.row, e.col) not in revert]
        t = t.with_values(revert, op="inject:revert")


def clean_rows_mask(truth, n_rows):
    """Rows with no injected anomaly and not part of a duplicate cluster."""
    mask = np.ones(n_rows, dtype=bool)
    for e in truth.entries:
        mask[e.row] = False
    for a, b in truth.duplicate_map.items():
        mask[a] = mask[b] = False
    return mask

