"""Tests for spectral sampling and random feature maps."""

import math

import numpy as np
import pytest

from core.kernels import (
    FeatureMap,
    input_gradient,
    kernel_approx,
    phi,
    phi_batch,
    phi_jacobian,
    sample_feature_map,
)
from core.models import KernelSpec


def test_features_have_unit_norm(rbf_map, rng):
    """‖φ(x)‖² = 1 up to rounding for any input."""
    for x in rng.standard_normal(20) * 10:
        f = phi(rbf_map, [x])
        assert abs(float(f @ f) - 1.0) <= 10 * np.finfo(float).eps * rbf_map.n_rf


def test_features_at_origin(rbf_map):
    f = phi(rbf_map, [0.0])
    n = rbf_map.n_rf
    assert np.all(f[:n] == 0.0)
    assert np.allclose(f[n:], 1.0 / math.sqrt(n))


def test_same_seed_gives_identical_map(rbf_spec):
    a = sample_feature_map(rbf_spec, n_rf=30, seed=11)
    b = sample_feature_map(rbf_spec, n_rf=30, seed=11)
    c = sample_feature_map(rbf_spec, n_rf=30, seed=12)
    assert np.array_equal(a.frequencies, b.frequencies)
    assert not np.array_equal(a.frequencies, c.frequencies)


def test_frequencies_are_read_only(rbf_map):
    with pytest.raises(ValueError):
        rbf_map.frequencies[0, 0] = 1.0


def test_rbf_frequency_covariance():
    """RBF l=1 frequencies are standard normal: covariance within 5% of identity."""
    spec = KernelSpec(family="rbf", lengthscale=1.0, input_dim=2)
    fm = sample_feature_map(spec, n_rf=10_000, seed=7)
    cov = np.cov(fm.frequencies.T)
    assert np.max(np.abs(cov - np.eye(2))) < 0.05


def test_lengthscale_scales_frequencies():
    spec = KernelSpec(family="rbf", lengthscale=(1.0, 4.0), input_dim=2)
    base = sample_feature_map(KernelSpec(family="rbf", lengthscale=1.0, input_dim=2), n_rf=20, seed=2)
    scaled = sample_feature_map(spec, n_rf=20, seed=2)
    assert np.allclose(scaled.frequencies[:, 0], base.frequencies[:, 0])
    assert np.allclose(scaled.frequencies[:, 1], base.frequencies[:, 1] / 4.0)


def test_huge_lengthscale_gives_flat_kernel():
    spec = KernelSpec(family="rbf", lengthscale=1e6)
    fm = sample_feature_map(spec, n_rf=50, seed=0)
    assert np.all(np.abs(fm.frequencies) < 1e-4)
    assert kernel_approx(fm, [0.0], [10.0]) == pytest.approx(1.0, abs=1e-6)


def test_kernel_approx_is_symmetric_and_normalized(rbf_map):
    assert kernel_approx(rbf_map, [0.3], [0.3]) == pytest.approx(1.0, abs=1e-12)
    assert kernel_approx(rbf_map, [0.3], [-1.2]) == kernel_approx(rbf_map, [-1.2], [0.3])


def test_kernel_approx_is_shift_invariant(rbf_map):
    shift = 0.7
    a = kernel_approx(rbf_map, [0.2], [1.1])
    b = kernel_approx(rbf_map, [0.2 + shift], [1.1 + shift])
    assert a == pytest.approx(b, abs=1e-12)


def test_gram_is_positive_semidefinite(rbf_map, rng):
    Phi = phi_batch(rbf_map, rng.standard_normal((40, 1)))
    assert np.min(np.linalg.eigvalsh(Phi @ Phi.T)) >= -1e-10


def test_rbf_approximation_at_unit_distance():
    """With 400 features, k(0, 1) lands within 0.1 of exp(-1/2) for most seeds."""
    spec = KernelSpec(family="rbf", lengthscale=1.0)
    target = math.exp(-0.5)
    hits = [
        abs(kernel_approx(sample_feature_map(spec, n_rf=400, seed=s), [0.0], [1.0]) - target) < 0.1
        for s in range(100)
    ]
    assert np.mean(hits) >= 0.9


def test_approximation_error_decays_with_features(rng):
    spec = KernelSpec(family="rbf", lengthscale=1.0, input_dim=2)
    A = rng.standard_normal((100, 2))
    B = rng.standard_normal((100, 2))
    exact = np.array([spec.evaluate(a, b) for a, b in zip(A, B)])

    medians = []
    for n_rf in (50, 200, 800):
        errors = []
        for s in range(11):
            fm = sample_feature_map(spec, n_rf=n_rf, seed=s)
            approx = np.sum(phi_batch(fm, A) * phi_batch(fm, B), axis=1)
            errors.append(np.median(np.abs(approx - exact)))
        medians.append(np.median(errors))
    assert medians[0] > medians[1] > medians[2]


@pytest.mark.parametrize("family", ["laplace", "cauchy"])
def test_heavy_tailed_families_approximate_closed_form(family):
    spec = KernelSpec(family=family, lengthscale=1.0)
    fm = sample_feature_map(spec, n_rf=4000, seed=9)
    assert kernel_approx(fm, [0.3], [-0.4]) == pytest.approx(spec.evaluate([0.3], [-0.4]), abs=0.05)


def test_invalid_requests(rbf_spec, rbf_map):
    with pytest.raises(ValueError):
        sample_feature_map(rbf_spec, n_rf=0, seed=0)
    with pytest.raises(ValueError):
        phi(rbf_map, [0.0, 1.0])
    with pytest.raises(ValueError):
        phi_batch(rbf_map, np.zeros((3, 2)))


def test_feature_map_bytes(rbf_map):
    restored = FeatureMap.from_bytes(rbf_map.to_bytes())
    assert restored.seed == rbf_map.seed
    assert np.array_equal(restored.frequencies, rbf_map.frequencies)
    with pytest.raises(ValueError):
        FeatureMap.from_bytes(rbf_map.to_bytes()[:-8])


def test_jacobian_matches_finite_differences(rng):
    spec = KernelSpec(family="rbf", lengthscale=1.5, input_dim=2)
    fm = sample_feature_map(spec, n_rf=20, seed=4)
    x = rng.standard_normal(2)
    J = phi_jacobian(fm, x)
    h = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (phi(fm, x + e) - phi(fm, x - e)) / (2 * h)
        assert np.allclose(J[:, j], fd, atol=1e-7)


def test_input_gradient_agrees_with_jacobian(rng):
    spec = KernelSpec(family="rbf", lengthscale=1.0, input_dim=3)
    fm = sample_feature_map(spec, n_rf=15, seed=8)
    X = rng.standard_normal((6, 3))
    G = rng.standard_normal((6, fm.n_features))
    pulled = input_gradient(fm, X, G)
    for i in range(6):
        assert np.allclose(pulled[i], phi_jacobian(fm, X[i]).T @ G[i], atol=1e-12)
