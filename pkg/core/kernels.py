from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from core.models import KernelSpec
from core.utils import as_vector


logger = logging.getLogger("EnsembleGP")

_FLAT_HEADER = struct.Struct("<QQQ")


def make_rng(seed: int) -> np.random.Generator:
    """Named, portable generator: PCG64 seeded from an unsigned integer."""
    return np.random.Generator(np.random.PCG64(seed))


def _standard_frequencies(family: str, rng: np.random.Generator, shape) -> np.ndarray:
    if family == "rbf":
        return rng.standard_normal(shape)
    u = rng.random(shape)
    if family == "laplace":
        # Laplace kernel -> Cauchy spectral density (inverse CDF)
        return np.tan(np.pi * (u - 0.5))
    # Cauchy kernel -> Laplacian spectral density, difference of two exponentials
    u2 = rng.random(shape)
    return np.log1p(-u2) - np.log1p(-u)


@dataclass(frozen=True)
class FeatureMap:
    """Frozen sample of spectral frequencies defining one expert's feature map."""

    frequencies: np.ndarray
    seed: int

    def __post_init__(self) -> None:
        freqs = np.array(self.frequencies, dtype=float, order="C")
        if freqs.ndim != 2 or freqs.shape[0] < 1:
            raise ValueError("frequencies must be a non-empty n_rf x d matrix")
        freqs.setflags(write=False)
        object.__setattr__(self, "frequencies", freqs)

    @property
    def n_rf(self) -> int:
        return self.frequencies.shape[0]

    @property
    def input_dim(self) -> int:
        return self.frequencies.shape[1]

    @property
    def n_features(self) -> int:
        return 2 * self.n_rf

    def to_bytes(self) -> bytes:
        """Flat block: (n_rf, d, seed) as little-endian uint64, then row-major float64."""
        return _FLAT_HEADER.pack(self.n_rf, self.input_dim, self.seed) + self.frequencies.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "FeatureMap":
        n_rf, dim, seed = _FLAT_HEADER.unpack_from(blob)
        body = np.frombuffer(blob, dtype="<f8", offset=_FLAT_HEADER.size)
        if body.size != n_rf * dim:
            raise ValueError(f"feature map block holds {body.size} values, expected {n_rf * dim}")
        return cls(frequencies=body.reshape(n_rf, dim), seed=seed)


def sample_feature_map(spec: KernelSpec, n_rf: int, seed: int) -> FeatureMap:
    """Draw `n_rf` i.i.d. frequencies from the spectral density of `spec.family`.

    Frequencies are scaled by 1/lengthscale per input dimension. The result is
    a pure function of (spec, n_rf, seed).
    """
    if n_rf < 1:
        raise ValueError(f"n_rf must be positive, got {n_rf}")
    if seed < 0:
        raise ValueError("seed must be an unsigned integer")
    rng = make_rng(seed)
    base = _standard_frequencies(spec.family, rng, (n_rf, spec.input_dim))
    return FeatureMap(frequencies=base / spec.lengthscales(), seed=seed)


def phi(feature_map: FeatureMap, x) -> np.ndarray:
    """Random feature vector (1/sqrt(n_rf)) [sin(Vx), cos(Vx)] of unit norm."""
    z = feature_map.frequencies @ as_vector(x, feature_map.input_dim)
    return np.concatenate((np.sin(z), np.cos(z))) / np.sqrt(feature_map.n_rf)


def phi_batch(feature_map: FeatureMap, X) -> np.ndarray:
    """Row-wise feature matrix for a t x d input matrix."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != feature_map.input_dim:
        raise ValueError(f"inputs have dimension {X.shape[1]}, expected {feature_map.input_dim}")
    Z = X @ feature_map.frequencies.T
    return np.hstack((np.sin(Z), np.cos(Z))) / np.sqrt(feature_map.n_rf)


def phi_jacobian(feature_map: FeatureMap, x) -> np.ndarray:
    """Jacobian d phi / d x, shape (2 n_rf, d)."""
    V = feature_map.frequencies
    z = V @ as_vector(x, feature_map.input_dim)
    scale = 1.0 / np.sqrt(feature_map.n_rf)
    return np.vstack((np.cos(z)[:, None] * V, -np.sin(z)[:, None] * V)) * scale


def kernel_approx(feature_map: FeatureMap, x, x2) -> float:
    """Random-feature approximant of the standardized kernel between x and x2."""
    return float(phi(feature_map, x) @ phi(feature_map, x2))


def input_gradient(feature_map: FeatureMap, X, d_features: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. the rows of phi_batch(X) back to the rows of X."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = X @ feature_map.frequencies.T
    n = feature_map.n_rf
    d_z = (d_features[:, :n] * np.cos(Z) - d_features[:, n:] * np.sin(Z)) / np.sqrt(n)
    return d_z @ feature_map.frequencies
