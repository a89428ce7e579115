from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize_scalar
from scipy.special import expit, log_expit

from core.config import settings
from core.kernels import FeatureMap, phi_batch
from core.models import HyperFitResult, KernelSpec
from core.utils import LOG_2PI, gradient_ascent, to_signed_labels


logger = logging.getLogger("EnsembleGP")


class HyperparameterBoundsError(RuntimeError):
    """The marginal likelihood became non-finite inside the parameter bounds."""


class DegenerateDataError(ValueError):
    """The initialization window cannot identify the hyperparameters."""


class HyperFitOptions(BaseModel):
    max_iter: int = Field(default_factory=lambda: settings.hyper_max_iter)
    tolerance: float = 1e-6
    lower: float = Field(default_factory=lambda: settings.hyper_lower_bound)
    upper: float = Field(default_factory=lambda: settings.hyper_upper_bound)
    grid_points: int = 25

    @property
    def log_bounds(self) -> Tuple[float, float]:
        return math.log(self.lower), math.log(self.upper)


@dataclass
class MarginalLikelihood:
    """Value and gradients of the random-feature log marginal likelihood."""

    value: float
    d_log_noise: float
    d_log_magnitude: float
    d_features: np.ndarray
    weights: np.ndarray


def rf_log_marginal_likelihood(Phi: np.ndarray, Y: np.ndarray, noise: float, magnitude: float) -> MarginalLikelihood:
    """sum_j log N(Y[:, j]; 0, magnitude Φ Φᵀ + noise I) in O(t · (2 n_rf)²).

    Uses the Woodbury form with A = ΦᵀΦ + (noise/magnitude) I. Also returns the
    gradients w.r.t. log noise, log magnitude and Φ, and the weight mean A⁻¹ΦᵀY.
    """
    Y = Y.reshape(Y.shape[0], -1)
    t, p = Phi.shape
    channels = Y.shape[1]
    ratio = noise / magnitude
    A = Phi.T @ Phi
    A[np.diag_indices_from(A)] += ratio
    R = cholesky(A, lower=False)
    G = Phi.T @ Y
    Theta = cho_solve((R, False), G)
    R_inv = solve_triangular(R, np.eye(p), lower=False)
    A_inv = R_inv @ R_inv.T
    trace_A_inv = float(np.sum(R_inv**2))

    quad = (float(np.sum(Y**2)) - float(np.sum(G * Theta))) / noise
    log_det = t * math.log(noise) + p * math.log(1.0 / ratio) + 2.0 * float(np.sum(np.log(np.diag(R))))
    value = -0.5 * quad - 0.5 * channels * log_det - 0.5 * t * channels * LOG_2PI

    P = (Y - Phi @ Theta) / noise
    trace_C_inv = (t - p + ratio * trace_A_inv) / noise
    d_noise = 0.5 * (float(np.sum(P**2)) - channels * trace_C_inv)
    trace_inner = (ratio * p - ratio**2 * trace_A_inv) / noise
    d_magnitude = 0.5 * (float(np.sum(Theta**2)) / magnitude**2 - channels * trace_inner)
    d_features = P @ Theta.T - channels * (Phi @ A_inv)

    return MarginalLikelihood(
        value=value,
        d_log_noise=noise * d_noise,
        d_log_magnitude=magnitude * d_magnitude,
        d_features=d_features,
        weights=Theta,
    )


def dense_log_marginal_likelihood(Phi: np.ndarray, y: np.ndarray, noise: float, magnitude: float) -> float:
    """Reference t x t evaluation of the single-output marginal likelihood."""
    t = Phi.shape[0]
    C = magnitude * Phi @ Phi.T + noise * np.eye(t)
    L = cholesky(C, lower=True)
    alpha = solve_triangular(L, y, lower=True)
    return float(-0.5 * alpha @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * t * LOG_2PI)


def fit_marginal_likelihood(
    X0: np.ndarray,
    y0: np.ndarray,
    spec: KernelSpec,
    feature_map: FeatureMap,
    opts: Optional[HyperFitOptions] = None,
) -> HyperFitResult:
    """Fit (magnitude, noise) by gradient ascent on the RF log marginal likelihood."""
    opts = opts or HyperFitOptions()
    y0 = np.asarray(y0, dtype=float).reshape(-1)
    if y0.shape[0] < 2:
        raise DegenerateDataError("marginal likelihood fitting needs at least two samples")
    if not np.all(np.isfinite(y0)):
        raise DegenerateDataError("initialization targets must be finite")
    Phi = phi_batch(feature_map, X0)
    lo, hi = opts.log_bounds

    def objective(u: np.ndarray) -> Tuple[float, np.ndarray]:
        try:
            ml = rf_log_marginal_likelihood(Phi, y0, noise=math.exp(u[1]), magnitude=math.exp(u[0]))
        except LinAlgError:
            return -math.inf, np.zeros(2)
        return ml.value, np.array([ml.d_log_magnitude, ml.d_log_noise])

    start = np.clip(np.log([spec.magnitude, spec.noise]), lo, hi)
    try:
        result = gradient_ascent(
            objective, start, max_iter=opts.max_iter, tol=opts.tolerance, step=0.1,
            lower=np.full(2, lo), upper=np.full(2, hi),
        )
    except FloatingPointError as exc:
        raise HyperparameterBoundsError(f"marginal likelihood not finite for {spec.label}") from exc
    magnitude, noise = (float(v) for v in np.exp(result.x))
    logger.info(
        "Fitted %s: magnitude=%.4g noise=%.4g logML=%.4f (%d steps)",
        spec.label, magnitude, noise, result.value, result.iterations,
    )
    return HyperFitResult(
        kernel=spec.label,
        magnitude=magnitude,
        noise=noise,
        log_marginal_likelihood=result.value,
        iterations=result.iterations,
    )


def laplace_log_evidence(Phi: np.ndarray, labels: np.ndarray, magnitude: float, max_iter: int = 50) -> float:
    """Laplace-approximate log evidence of ±1 labels under θ ~ N(0, magnitude I)."""
    p = Phi.shape[1]
    theta = np.zeros(p)

    def psi(th: np.ndarray) -> float:
        return float(np.sum(log_expit(labels * (Phi @ th)))) - 0.5 * float(th @ th) / magnitude

    current = psi(theta)
    for _ in range(max_iter):
        a = Phi @ theta
        grad = Phi.T @ (labels * expit(-labels * a)) - theta / magnitude
        if float(np.linalg.norm(grad)) < settings.newton_tolerance:
            break
        lam = expit(a) * expit(-a)
        H = (Phi.T * lam) @ Phi
        H[np.diag_indices_from(H)] += 1.0 / magnitude
        direction = cho_solve((cholesky(H, lower=False), False), grad)
        step = 1.0
        while psi(theta + step * direction) < current and step > 1e-10:
            step *= 0.5
        theta = theta + step * direction
        current = psi(theta)

    lam = expit(Phi @ theta) * expit(-(Phi @ theta))
    B = magnitude * (Phi.T * lam) @ Phi
    B[np.diag_indices_from(B)] += 1.0
    log_det = 2.0 * float(np.sum(np.log(np.diag(cholesky(B, lower=False)))))
    return current - 0.5 * log_det


def fit_classification_magnitude(
    X0: np.ndarray,
    labels: np.ndarray,
    spec: KernelSpec,
    feature_map: FeatureMap,
    opts: Optional[HyperFitOptions] = None,
) -> HyperFitResult:
    """Pick the kernel magnitude maximizing the Laplace evidence.

    A log-spaced grid across the bounds locates the best cell, then a bounded
    scalar search refines inside the neighbouring cells.
    """
    opts = opts or HyperFitOptions()
    labels = to_signed_labels(labels)
    if np.all(labels == labels[0]):
        raise DegenerateDataError("initialization window contains a single class")
    Phi = phi_batch(feature_map, X0)
    lo, hi = opts.log_bounds
    grid = np.linspace(lo, hi, opts.grid_points)
    values = np.array([laplace_log_evidence(Phi, labels, math.exp(u)) for u in grid])
    if not np.all(np.isfinite(values)):
        raise HyperparameterBoundsError(f"Laplace evidence not finite for {spec.label}")
    best = int(np.argmax(values))
    best_u, best_value = float(grid[best]), float(values[best])

    left, right = grid[max(best - 1, 0)], grid[min(best + 1, len(grid) - 1)]
    refined = minimize_scalar(
        lambda u: -laplace_log_evidence(Phi, labels, math.exp(u)),
        bounds=(left, right),
        method="bounded",
        options={"xatol": 1e-4},
    )
    evaluations = len(grid) + int(refined.nfev)
    if refined.success and -refined.fun > best_value:
        best_u, best_value = float(refined.x), float(-refined.fun)

    magnitude = math.exp(best_u)
    logger.info("Fitted %s magnitude=%.4g Laplace evidence=%.4f", spec.label, magnitude, best_value)
    return HyperFitResult(
        kernel=spec.label,
        magnitude=magnitude,
        noise=spec.noise,
        log_marginal_likelihood=best_value,
        iterations=evaluations,
    )


def fit_dictionary(
    X0: np.ndarray,
    y0: np.ndarray,
    specs: Sequence[KernelSpec],
    maps: Sequence[FeatureMap],
    *,
    likelihood: str = "gaussian",
    opts: Optional[HyperFitOptions] = None,
) -> Tuple[List[KernelSpec], List[HyperFitResult]]:
    """Fit every expert independently and return updated specs with the fit reports."""
    fitted: List[KernelSpec] = []
    reports: List[HyperFitResult] = []
    for spec, feature_map in zip(specs, maps):
        if likelihood == "gaussian":
            report = fit_marginal_likelihood(X0, y0, spec, feature_map, opts)
        else:
            report = fit_classification_magnitude(X0, y0, spec, feature_map, opts)
        fitted.append(spec.model_copy(update={"magnitude": report.magnitude, "noise": report.noise}))
        reports.append(report)
    return fitted, reports
