"""Tests for the rank-one Cholesky update."""

import numpy as np
import pytest

from core.linalg import cholesky_update, reconstruction_error


def _spd(rng, n):
    M = rng.standard_normal((n, n))
    return M @ M.T + n * np.eye(n)


def test_update_reconstructs_augmented_matrix(rng):
    A = _spd(rng, 12)
    R = np.linalg.cholesky(A).T
    x = rng.standard_normal(12)
    updated = cholesky_update(R, x)
    target = A + np.outer(x, x)
    assert reconstruction_error(updated, target) <= 1e-8 * np.linalg.norm(target)
    assert np.allclose(np.tril(updated, -1), 0.0)
    assert np.all(np.diag(updated) > 0)


def test_input_factor_is_not_modified(rng):
    R = np.linalg.cholesky(_spd(rng, 5)).T
    before = R.copy()
    cholesky_update(R, rng.standard_normal(5))
    assert np.array_equal(R, before)


def test_many_updates_stay_accurate(rng):
    n = 20
    A = 0.1 * np.eye(n)
    R = np.sqrt(0.1) * np.eye(n)
    for _ in range(100):
        x = rng.standard_normal(n)
        R = cholesky_update(R, x)
        A += np.outer(x, x)
    assert reconstruction_error(R, A) <= 1e-8 * np.linalg.norm(A)


def test_zero_vector_leaves_factor_unchanged(rng):
    R = np.linalg.cholesky(_spd(rng, 4)).T
    assert np.allclose(cholesky_update(R, np.zeros(4)), R)


def test_dimension_mismatch(rng):
    R = np.eye(3)
    with pytest.raises(ValueError):
        cholesky_update(R, np.ones(4))
    with pytest.raises(ValueError):
        cholesky_update(np.ones((3, 2)), np.ones(3))
