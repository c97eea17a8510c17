"""Extended isolation forest.

Nodes split on random hyperplanes: a normal vector ``n`` drawn from a
standard normal (with ``d - 1 - extension_level`` coordinates zeroed) and an
intercept ``p`` drawn uniformly inside the node's bounding box; a point goes
left when ``(x - p) . n <= 0``. Scores follow ``s = 2 ** (-E[h] / c(psi))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma

from .errors import DimensionMismatch, EmptyData, ValidationError

_EULER = 0.5772156649015329


def harmonic(i):
    """H(i) for real ``i >= 0`` (exact at integers)."""
    return digamma(np.asarray(i, float) + 1.0) + _EULER


def average_path_length(n):
    """c(n) = 2 H(n-1) - 2 (n-1)/n, the mean unsuccessful-search depth; c(1) = 0."""
    n = np.asarray(n, dtype=float)
    out = np.zeros_like(n)
    big = n > 2
    out[n == 2] = 1.0
    nb = n[big]
    out[big] = 2.0 * harmonic(nb - 1.0) - 2.0 * (nb - 1.0) / nb
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class IsolationTree:
    """Flat arrays; ``left[i] == -1`` marks a leaf holding ``size[i]`` points."""

    normal: np.ndarray
    intercept: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    depth: np.ndarray


@dataclass(frozen=True)
class IsolationForest:
    trees: tuple
    n_trees: int
    sample_size: int
    extension_level: int
    seed: int
    dim: int

    @property
    def c_norm(self):
        return average_path_length(self.sample_size)


def _build_tree(x, rng, extension_level, limit):
    d = x.shape[1]
    normal, intercept, left, right, size, depth = [], [], [], [], [], []

    def new_node(dep, n_pts):
        normal.append(np.zeros(d))
        intercept.append(np.zeros(d))
        left.append(-1)
        right.append(-1)
        size.append(n_pts)
        depth.append(dep)
        return len(left) - 1

    root = new_node(0, len(x))
    stack = [(root, np.arange(len(x)))]
    while stack:
        node, idx = stack.pop()
        dep = depth[node]
        if dep >= limit or len(idx) <= 1:
            continue
        pts = x[idx]
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        if np.all(hi <= lo):
            continue
        n = rng.standard_normal(d)
        zero = d - 1 - extension_level
        if zero > 0:
            n[rng.choice(d, zero, replace=False)] = 0.0
        p = rng.uniform(lo, hi)
        go_left = (pts - p) @ n <= 0
        normal[node] = n
        intercept[node] = p
        li = new_node(dep + 1, int(go_left.sum()))
        ri = new_node(dep + 1, int((~go_left).sum()))
        left[node] = li
        right[node] = ri
        stack.append((ri, idx[~go_left]))
        stack.append((li, idx[go_left]))
    return IsolationTree(
        np.asarray(normal),
        np.asarray(intercept),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(size, dtype=np.int64),
        np.asarray(depth, dtype=np.int64),
    )


def eif_train(data, n_trees=100, sample_size=265, extension_level=None, seed=0):
    """Fit an extended isolation forest.

    Each tree sees a without-replacement subsample of ``min(sample_size, n)``
    points and grows to depth ``ceil(log2 psi)``. Tree ``k`` draws from
    ``default_rng([seed, k])`` so trees are independent of build order.
    """
    x = np.asarray(data, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.size == 0 or len(x) == 0:
        raise EmptyData("cannot fit an isolation forest on no points")
    if sample_size < 2:
        raise ValidationError("sample_size must be at least 2")
    n, d = x.shape
    if extension_level is None:
        extension_level = d - 1
    if not 0 <= extension_level <= d - 1:
        raise ValidationError(f"extension_level must lie in [0, {d - 1}]")
    psi = min(sample_size, n)
    limit = max(1, math.ceil(math.log2(psi))) if psi > 1 else 1
    trees = []
    for k in range(n_trees):
        rng = np.random.default_rng([seed, k])
        idx = rng.choice(n, psi, replace=False) if psi < n else np.arange(n)
        trees.append(_build_tree(x[idx], rng, extension_level, limit))
    return IsolationForest(tuple(trees), n_trees, psi, extension_level, seed, d)


def path_lengths(forest, points):
    """Mean adjusted path length of each point over the forest."""
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None] if forest.dim == 1 else x[None, :]
    if x.shape[1] != forest.dim:
        raise DimensionMismatch(f"points have {x.shape[1]} dims, forest has {forest.dim}")
    total = np.zeros(len(x))
    for tree in forest.trees:
        node = np.zeros(len(x), dtype=np.int64)
        active = np.flatnonzero(tree.left[node] >= 0)
        while len(active):
            nd = node[active]
            side = np.einsum("ij,ij->i", x[active] - tree.intercept[nd], tree.normal[nd]) <= 0
            node[active] = np.where(side, tree.left[nd], tree.right[nd])
            active = active[tree.left[node[active]] >= 0]
        total += tree.depth[node] + average_path_length(tree.size[node])
    return total / forest.n_trees


def eif_score(forest, points):
    """Anomaly score in (0, 1]; accepts one point or a matrix of points."""
    x = np.asarray(points, dtype=float)
    single = x.ndim == 1 and (forest.dim > 1 or x.size == 1)
    h = path_lengths(forest, x)
    c = forest.c_norm
    s = np.power(2.0, -h / c) if c > 0 else np.ones_like(h)
    return float(s[0]) if single else s
