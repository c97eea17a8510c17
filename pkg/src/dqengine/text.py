"""String similarity, lexicons and a small per-column value embedding."""

from __future__ import annotations

import math
import re
from collections import Counter
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import EmptyLexicon

_TOKEN_RE = re.compile(r"[^\W\d_]+")
_DATA = Path(__file__).with_name("data")


def alpha_tokens(text):
    return _TOKEN_RE.findall(text.lower())


def _padded(s):
    return f" {s.lower()} "


def trigrams(s):
    p = _padded(s)
    return Counter(p[i : i + 3] for i in range(len(p) - 2))


def trigram_cosine(a, b):
    """Cosine similarity of character-trigram count vectors (lowercased, space padded)."""
    if a == b:
        return 1.0
    ca, cb = trigrams(a), trigrams(b)
    common = sorted(ca.keys() & cb.keys())
    if not common:
        return 0.0
    dot = sum(ca[g] * cb[g] for g in common)
    na = math.sqrt(sum(v * v for v in ca.values()))
    nb = math.sqrt(sum(v * v for v in cb.values()))
    return min(1.0, dot / (na * nb))


class TrigramIndex:
    """Row-normalized sparse trigram matrix over a sequence of strings.

    ``None`` entries produce empty rows. Vocabulary ids are assigned in
    first-seen order, so the matrix is deterministic for a given input.
    """

    def __init__(self, strings, vocab=None):
        self.vocab = {} if vocab is None else vocab
        indptr = [0]
        indices = []
        data = []
        memo = {}
        for s in strings:
            if s is None:
                indptr.append(len(indices))
                continue
            entry = memo.get(s)
            if entry is None:
                grams = trigrams(s)
                ids = []
                vals = []
                for g, c in grams.items():
                    gid = self.vocab.get(g)
                    if gid is None:
                        gid = self.vocab[g] = len(self.vocab)
                    ids.append(gid)
                    vals.append(float(c))
                norm = math.sqrt(sum(v * v for v in vals)) or 1.0
                order = np.argsort(ids)
                entry = memo[s] = (
                    [ids[i] for i in order],
                    [vals[i] / norm for i in order],
                )
            indices.extend(entry[0])
            data.extend(entry[1])
            indptr.append(len(indices))
        self.matrix = sp.csr_matrix(
            (np.asarray(data, dtype=float), np.asarray(indices, dtype=np.int64),
             np.asarray(indptr, dtype=np.int64)),
            shape=(len(indptr) - 1, max(len(self.vocab), 1)),
        )

    def pair_cosine(self, a, b, chunk=200_000):
        """Cosine for row pairs ``(a[k], b[k])``."""
        a = np.asarray(a, dtype=np.int64)
        b = np.asarray(b, dtype=np.int64)
        out = np.empty(len(a), dtype=float)
        for s in range(0, len(a), chunk):
            xa = self.matrix[a[s : s + chunk]]
            xb = self.matrix[b[s : s + chunk]]
            out[s : s + chunk] = np.asarray(xa.multiply(xb).sum(axis=1)).ravel()
        return np.clip(out, 0.0, 1.0)

    def query(self, s):
        """Cosine of ``s`` against every indexed row."""
        q = TrigramIndex([s], self.vocab)
        # vocab may have grown; pad matrix width
        m = self.matrix
        if q.matrix.shape[1] > m.shape[1]:
            m = sp.csr_matrix((m.data, m.indices, m.indptr), shape=(m.shape[0], q.matrix.shape[1]))
        return np.clip(np.asarray((m @ q.matrix.T).todense()).ravel(), 0.0, 1.0)


def levenshtein(a, b):
    if a == b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _deletes(word, depth):
    out = {word}
    frontier = {word}
    for _ in range(depth):
        nxt = set()
        for w in frontier:
            for i in range(len(w)):
                nxt.add(w[:i] + w[i + 1 :])
        out |= nxt
        frontier = nxt
    return out


@lru_cache(maxsize=None)
def bundled_words():
    words = set()
    for name in ("words.txt", "male_names.txt", "female_names.txt", "last_names.txt",
                 "streets.txt"):
        with open(_DATA / name, encoding="utf-8") as fh:
            words.update(w.strip().lower() for w in fh if w.strip() and not w.startswith("#"))
    with open(_DATA / "street_suffixes.txt", encoding="utf-8") as fh:
        for line in fh:
            if line.strip() and not line.startswith("#"):
                words.update(p.strip().lower() for p in line.split(","))
    return frozenset(words)


class Lexicon:
    """Readability lexicon: a base word list plus per-column frequent tokens.

    A token counts as readable for column ``c`` when it is in the base list or
    occurs at least ``min_count`` times in ``c``, unless it sits one edit away
    from a token that is ``typo_ratio`` times more frequent (a repeated typo).
    Tokens shorter than ``min_length`` are not judged.
    """

    def __init__(self, base=(), columns=None, counts=None, min_length=2):
        self.base = frozenset(w.lower() for w in base)
        self.columns = {k: frozenset(v) for k, v in (columns or {}).items()}
        self.counts = counts or {}
        self.min_length = min_length
        self._index = {}
        if not self.base and not any(self.columns.values()):
            raise EmptyLexicon("lexicon has no words")

    @classmethod
    def bundled(cls):
        return cls(bundled_words())

    @classmethod
    def from_table(cls, t, base=None, min_count=5, typo_ratio=10.0, columns=None):
        from .table import ValueKind

        base = bundled_words() if base is None else frozenset(base)
        per_col = {}
        counts = {}
        for c in t.columns:
            if columns is not None and c.name not in columns:
                continue
            if c.declared_kind not in (ValueKind.STRING, ValueKind.ALPHANUMERIC):
                continue
            cnt = Counter()
            value_counts = Counter(v for v in c.values if isinstance(v, str))
            for v, k in value_counts.items():
                for tok in alpha_tokens(v):
                    cnt[tok] += k
            frequent = {w for w, k in cnt.items() if k >= min_count}
            suspicious = set()
            for w in frequent - base:
                k = cnt[w]
                for other in _neighbors1(w, cnt):
                    if cnt[other] >= typo_ratio * k:
                        suspicious.add(w)
                        break
            per_col[c.name] = frozenset(frequent - suspicious)
            counts[c.name] = cnt
        return cls(base, per_col, counts)

    def words_for(self, column=None):
        return self.base | self.columns.get(column, frozenset())

    def token_ok(self, tok, column=None):
        return len(tok) < self.min_length or tok in self.base or tok in self.columns.get(column, ())

    def is_readable(self, text, column=None):
        return all(self.token_ok(t, column) for t in alpha_tokens(text))

    def _delete_index(self, column):
        idx = self._index.get(column)
        if idx is None:
            idx = {}
            for w in self.words_for(column):
                for d in _deletes(w, 2):
                    idx.setdefault(d, set()).add(w)
            self._index[column] = idx
        return idx

    def nearest(self, token, column=None, max_distance=2):
        """Closest lexicon word by edit distance (ties: more frequent, then alphabetical)."""
        token = token.lower()
        if self.token_ok(token, column):
            return token
        idx = self._delete_index(column)
        cands = set()
        for d in _deletes(token, max_distance):
            cands |= idx.get(d, set())
        cnt = self.counts.get(column, {})
        best = None
        for w in cands:
            dist = levenshtein(token, w)
            if dist > max_distance:
                continue
            key = (dist, -cnt.get(w, 0), w)
            if best is None or key < best:
                best = key
        return None if best is None else best[2]

    def correct_text(self, text, column=None):
        """Replace each unreadable token by its nearest lexicon word, keeping its case."""
        def fix(m):
            tok = m.group(0)
            low = tok.lower()
            if self.token_ok(low, column):
                return tok
            near = self.nearest(low, column)
            return tok if near is None else match_case(near, tok)

        return _TOKEN_RE.sub(fix, text)


def match_case(word, like):
    """Give ``word`` the capitalization pattern of ``like``."""
    if like.isupper() and len(like) > 1:
        return word.upper()
    if like[:1].isupper():
        return word[:1].upper() + word[1:]
    return word


def _neighbors1(word, counter):
    """Words in ``counter`` at edit distance exactly 1 from ``word``."""
    letters = set("".join(counter.keys())) if len(counter) < 50 else set("abcdefghijklmnopqrstuvwxyz")
    out = []
    n = len(word)
    seen = set()
    for i in range(n + 1):
        for ch in letters:
            seen.add(word[:i] + ch + word[i:])
            if i < n:
                seen.add(word[:i] + ch + word[i + 1 :])
        if i < n:
            seen.add(word[:i] + word[i + 1 :])
    for i in range(n - 1):
        seen.add(word[:i] + word[i + 1] + word[i] + word[i + 2 :])
    seen.discard(word)
    for w in seen:
        if w in counter:
            out.append(w)
    return out


def _char_ngrams(s, sizes=(1, 2, 3)):
    p = _padded(s)
    out = Counter()
    for n in sizes:
        for i in range(len(p) - n + 1):
            out["c:" + p[i : i + n]] += 1
    return out


class ValueEmbedding:
    """Dense embedding of the distinct values of one column.

    Each distinct value is described by two normalized count blocks: its
    character 1-3 grams and the co-occurring context tokens (``column=value``
    of the context columns in the same rows, numeric context binned into
    deciles). The concatenation is projected to ``dim`` dimensions with a
    seeded Gaussian random projection.
    """

    def __init__(self, values, context=None, dim=32, seed=0, context_weight=1.0):
        context = context or {}
        distinct = {}
        for v in values:
            if isinstance(v, str) and v not in distinct:
                distinct[v] = len(distinct)
        self.values = list(distinct)
        self.index = distinct
        self.dim = dim
        self.seed = seed
        vocab = {}
        rows, cols, data = [], [], []

        def add_block(i, counter, weight):
            norm = math.sqrt(sum(c * c for c in counter.values())) or 1.0
            for tok, c in counter.items():
                j = vocab.get(tok)
                if j is None:
                    j = vocab[tok] = len(vocab)
                rows.append(i)
                cols.append(j)
                data.append(weight * c / norm)

        ctx_counts = [Counter() for _ in self.values]
        ctx_tokens = []
        for name, col_values in context.items():
            ctx_tokens.append(_context_tokens(name, col_values))
        for r, v in enumerate(values):
            if not isinstance(v, str):
                continue
            i = distinct[v]
            for toks in ctx_tokens:
                tok = toks[r]
                if tok is not None:
                    ctx_counts[i][tok] += 1
        for i, v in enumerate(self.values):
            add_block(i, _char_ngrams(v), 1.0)
            if ctx_counts[i]:
                add_block(i, ctx_counts[i], context_weight)
        self._vocab = vocab
        m = sp.csr_matrix((data, (rows, cols)), shape=(len(self.values), max(len(vocab), 1)))
        rng = np.random.default_rng(seed)
        proj = rng.standard_normal((m.shape[1], dim)) / math.sqrt(dim)
        emb = np.asarray(m @ proj)
        norms = np.linalg.norm(emb, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        self.vectors = emb / norms

    def vector(self, value):
        return self.vectors[self.index[value]]

    def similarities(self, value):
        """Cosine of ``value`` against every distinct value (aligned with ``self.values``)."""
        return self.vectors @ self.vector(value)


def _context_tokens(name, values):
    nums = [v for v in values if isinstance(v, float)]
    edges = None
    if nums and len(nums) >= 0.5 * len(values):
        edges = np.unique(np.quantile(np.asarray(nums), np.linspace(0.1, 0.9, 9)))
    out = []
    for v in values:
        if v is None:
            out.append(None)
        elif isinstance(v, float) and edges is not None:
            out.append(f"{name}=#{int(np.searchsorted(edges, v, side='right'))}")
        else:
            out.append(f"{name}={v}")
    return out
