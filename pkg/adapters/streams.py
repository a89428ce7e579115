from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cholesky

from core.config import ConfigError
from core.kernels import make_rng
from core.models import KernelSpec, StreamRecord, StreamSpec


logger = logging.getLogger("EnsembleGP")

# dense GP draws factor a T x T kernel matrix
MAX_DENSE_DRAW = 10_000


@dataclass(frozen=True)
class SyntheticStream:
    """Materialized synthetic stream.

    `X` holds model inputs (observations for latent-variable streams), `y`
    targets or ±1 labels, `labels` cluster ids kept for evaluation only.
    """

    X: np.ndarray
    y: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    latents: Optional[np.ndarray] = None
    boundary: Optional[int] = None

    def __len__(self) -> int:
        return self.X.shape[0]

    def __iter__(self) -> Iterator[Tuple[np.ndarray, Optional[float]]]:
        for i in range(len(self)):
            yield self.X[i], (None if self.y is None else float(self.y[i]))

    def records(self, start: int = 0) -> Iterator[StreamRecord]:
        for i in range(start, len(self)):
            yield StreamRecord(
                index=i + 1,
                x=self.X[i].tolist(),
                target=None if self.y is None else float(self.y[i]),
            )


def draw_gp(kernel: KernelSpec, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Exact zero-mean GP sample at the rows of X via a jittered dense Cholesky factor."""
    K = kernel.magnitude * kernel.gram(X)
    jitter = 1e-10 * kernel.magnitude
    while True:
        try:
            L = cholesky(K + jitter * np.eye(K.shape[0]), lower=True)
            break
        except LinAlgError:
            if jitter > 1e-3 * kernel.magnitude:
                raise
            jitter *= 10.0
    return L @ rng.standard_normal(K.shape[0])


def _inputs(spec: StreamSpec, rng: np.random.Generator) -> np.ndarray:
    return np.sqrt(spec.input_var) * rng.standard_normal((spec.T, spec.input_dim))


def _noise(spec: StreamSpec, rng: np.random.Generator, size: int) -> np.ndarray:
    return np.sqrt(spec.noise) * rng.standard_normal(size)


def _sin_mix(spec: StreamSpec, rng: np.random.Generator) -> SyntheticStream:
    X = _inputs(spec, rng)
    y = np.sum(np.sin(2.0 * X) + np.sin(3.0 * X), axis=1) + _noise(spec, rng, spec.T)
    return SyntheticStream(X=X, y=y)


def _check_dense(spec: StreamSpec) -> None:
    if spec.T > MAX_DENSE_DRAW:
        raise ConfigError(f"{spec.kind} needs a dense {spec.T}x{spec.T} factorization; limit is {MAX_DENSE_DRAW}")


def _default_kernel(spec: StreamSpec, lengthscale: float) -> KernelSpec:
    return KernelSpec(family="rbf", lengthscale=lengthscale, input_dim=spec.input_dim)


def _gp_draw(spec: StreamSpec, rng: np.random.Generator) -> SyntheticStream:
    _check_dense(spec)
    kernel = spec.kernel or _default_kernel(spec, 1.0)
    X = _inputs(spec, rng)
    y = draw_gp(kernel, X, rng) + _noise(spec, rng, spec.T)
    return SyntheticStream(X=X, y=y)


def _switching_gp_draw(spec: StreamSpec, rng: np.random.Generator) -> SyntheticStream:
    _check_dense(spec)
    first = spec.kernel or _default_kernel(spec, 0.01)
    second = spec.kernel2 or _default_kernel(spec, 100.0)
    boundary = spec.boundary
    X = _inputs(spec, rng)
    f = np.concatenate((draw_gp(first, X[:boundary], rng), draw_gp(second, X[boundary:], rng)))
    return SyntheticStream(X=X, y=f + _noise(spec, rng, spec.T), boundary=boundary)


def _two_gaussians(spec: StreamSpec, rng: np.random.Generator) -> SyntheticStream:
    y = np.where(rng.random(spec.T) < 0.5, -1.0, 1.0)
    X = spec.separation * y[:, None] + rng.standard_normal((spec.T, spec.input_dim))
    return SyntheticStream(X=X, y=y)


def _latent_clusters(spec: StreamSpec, rng: np.random.Generator) -> SyntheticStream:
    k, d, D = spec.n_clusters, spec.latent_dim, spec.output_dim
    angles = 2.0 * np.pi * np.arange(k) / k
    centers = np.zeros((k, d))
    if d == 1:
        centers[:, 0] = 3.0 * np.arange(k)
    else:
        centers[:, 0], centers[:, 1] = 3.0 * np.cos(angles), 3.0 * np.sin(angles)
    labels = rng.integers(0, k, size=spec.T)
    Z = centers[labels] + 0.5 * rng.standard_normal((spec.T, d))
    W = rng.standard_normal((d, D)) / np.sqrt(d)
    W2 = rng.standard_normal((d, D)) / np.sqrt(d)
    Y = Z @ W + 0.3 * np.sin(Z @ W2) + _noise(spec, rng, spec.T * D).reshape(spec.T, D)
    return SyntheticStream(X=Y, labels=labels, latents=Z)


_GENERATORS = {
    "sin_mix": _sin_mix,
    "gp_draw": _gp_draw,
    "switching_gp_draw": _switching_gp_draw,
    "two_gaussians": _two_gaussians,
    "latent_clusters": _latent_clusters,
}


def gen_stream(spec: StreamSpec) -> SyntheticStream:
    """Generate the stream described by `spec`; a pure function of the spec and its seed."""
    stream = _GENERATORS[spec.kind](spec, make_rng(spec.seed))
    logger.debug("Generated %s stream: T=%d seed=%d", spec.kind, spec.T, spec.seed)
    return stream
