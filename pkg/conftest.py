"""Shared fixtures for the EnsembleGP test suite."""

import numpy as np
import pytest

from core.kernels import make_rng, sample_feature_map
from core.models import KernelSpec, StreamSpec


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def rbf_spec():
    return KernelSpec(family="rbf", lengthscale=1.0, magnitude=1.0, noise=0.01)


@pytest.fixture
def rbf_map(rbf_spec):
    return sample_feature_map(rbf_spec, n_rf=50, seed=3)


@pytest.fixture
def rbf_dictionary():
    """Five RBF experts with lengthscales 10^k, k = -2..2."""
    return [KernelSpec(family="rbf", lengthscale=10.0**k) for k in range(-2, 3)]


@pytest.fixture
def gpr_data(rng):
    """50 random inputs in three dimensions with smooth noisy targets."""
    X = rng.standard_normal((50, 3))
    y = np.sin(X[:, 0]) + 0.5 * np.cos(X[:, 1]) - 0.3 * X[:, 2] + 0.1 * rng.standard_normal(50)
    return X, y


@pytest.fixture
def sin_mix_spec():
    return StreamSpec(kind="sin_mix", T=300, noise=0.01, seed=5)
