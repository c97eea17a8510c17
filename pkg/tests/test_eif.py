import math

import numpy as np
import pytest

from dqengine.eif import average_path_length, eif_score, eif_train, harmonic, path_lengths
from dqengine.errors import DimensionMismatch, EmptyData, ValidationError


def test_harmonic_and_c():
    assert harmonic(1) == pytest.approx(1.0)
    assert harmonic(4) == pytest.approx(1 + 1 / 2 + 1 / 3 + 1 / 4)
    psi = 265
    expected = 2 * sum(1 / k for k in range(1, psi - 1 + 1)) - 2 * (psi - 1) / psi
    assert average_path_length(psi) == pytest.approx(expected)
    assert average_path_length(1) == 0.0
    assert average_path_length(2) == 1.0


def test_determinism():
    x = np.random.default_rng(0).normal(size=(500, 3))
    a = eif_score(eif_train(x, 50, seed=7), x)
    b = eif_score(eif_train(x, 50, seed=7), x)
    assert np.array_equal(a, b)


def test_one_dimensional_splits_are_thresholds():
    x = np.random.default_rng(1).uniform(size=300)
    f = eif_train(x, 10, seed=1)
    assert f.dim == 1 and f.extension_level == 0
    for tree in f.trees:
        internal = tree.left >= 0
        assert np.all(tree.normal[internal] != 0)
        assert np.all((tree.intercept[internal] >= 0) & (tree.intercept[internal] <= 1))


def test_sample_clamped_to_n():
    x = np.random.default_rng(2).normal(size=(100, 2))
    f = eif_train(x, 5, sample_size=265)
    assert f.sample_size == 100
    assert all(t.size[0] == 100 for t in f.trees)
    assert all(t.depth.max() <= math.ceil(math.log2(100)) for t in f.trees)


def test_score_identities():
    x = np.random.default_rng(3).normal(size=(400, 2))
    f = eif_train(x, 30, seed=0)
    c = f.c_norm
    h = path_lengths(f, x)
    s = eif_score(f, x)
    np.testing.assert_allclose(s, 2.0 ** (-h / c))
    assert 2.0 ** (-c / c) == 0.5
    assert np.all((s > 0) & (s <= 1))


def test_planted_outlier_ranks_high():
    rng = np.random.default_rng(4)
    x = np.vstack([rng.normal(size=(2000, 2)), [[8.0, -8.0]]])
    s = eif_score(eif_train(x, 100, seed=4), x)
    assert s[-1] > np.quantile(s[:-1], 0.99)


def test_errors():
    with pytest.raises(EmptyData):
        eif_train(np.zeros((0, 2)))
    with pytest.raises(ValidationError):
        eif_train(np.zeros((5, 2)), sample_size=1)
    with pytest.raises(ValidationError):
        eif_train(np.zeros((5, 2)), extension_level=2)
    f = eif_train(np.random.default_rng(0).normal(size=(50, 2)), 5)
    with pytest.raises(DimensionMismatch):
        eif_score(f, np.zeros((3, 3)))


def test_single_point_scoring():
    x = np.random.default_rng(5).normal(size=(200, 2))
    f = eif_train(x, 20)
    assert isinstance(eif_score(f, x[0]), float)
