from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Literal, Optional, Tuple

import numpy as np
from scipy.special import expit, log_expit

from core.config import settings
from core.kernels import FeatureMap, phi
from core.models import KernelSpec
from core.utils import gaussian_nll


logger = logging.getLogger("EnsembleGP")

Likelihood = Literal["gaussian", "logistic"]


class NewtonConvergenceError(RuntimeError):
    """Laplace mode search did not converge; `state` carries the last iterate."""

    def __init__(self, message: str, state: "ExpertState") -> None:
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class PredictiveMoments:
    """One-step-ahead predictive moments of a single expert.

    For the logistic likelihood `mean` is the moderated probability of +1 and
    `variance` the matching Bernoulli variance.
    """

    mean: float
    variance: float
    loss: Optional[float] = None


@dataclass(frozen=True)
class ExpertState:
    """Gaussian belief N(mean, cov) over the 2 n_rf random-feature weights."""

    mean: np.ndarray
    cov: np.ndarray
    spec: KernelSpec
    feature_map: FeatureMap
    likelihood: Likelihood = "gaussian"
    drift: Optional[float] = None

    @property
    def noise(self) -> float:
        return self.spec.noise


def fresh_expert(
    spec: KernelSpec,
    feature_map: FeatureMap,
    likelihood: Likelihood = "gaussian",
    drift: Optional[float] = None,
) -> ExpertState:
    """Prior state: zero mean, covariance magnitude * I."""
    if feature_map.input_dim != spec.input_dim:
        raise ValueError("feature map and kernel spec disagree on the input dimension")
    n = feature_map.n_features
    return ExpertState(
        mean=np.zeros(n),
        cov=spec.magnitude * np.eye(n),
        spec=spec,
        feature_map=feature_map,
        likelihood=likelihood,
        drift=drift,
    )


def _symmetrize(cov: np.ndarray) -> np.ndarray:
    return 0.5 * (cov + cov.T)


def _require(state: ExpertState, likelihood: Likelihood) -> None:
    if state.likelihood != likelihood:
        raise ValueError(f"expert has a {state.likelihood} likelihood, not {likelihood}")


# ---------------- Gaussian likelihood ----------------
def predict_gauss(state: ExpertState, x) -> PredictiveMoments:
    _require(state, "gaussian")
    f = phi(state.feature_map, x)
    return PredictiveMoments(mean=float(f @ state.mean), variance=float(f @ state.cov @ f) + state.noise)


def correct_gauss(state: ExpertState, x, y: float) -> Tuple[ExpertState, float]:
    """Rank-one Bayesian update; the loss is -log N(y; ŷ, σ²) from the pre-update predictive."""
    _require(state, "gaussian")
    f = phi(state.feature_map, x)
    s = state.cov @ f
    y_hat = float(f @ state.mean)
    var = float(f @ s) + state.noise
    loss = gaussian_nll(y, y_hat, var)
    mean = state.mean + s * ((y - y_hat) / var)
    cov = _symmetrize(state.cov - np.outer(s, s) / var)
    return replace(state, mean=mean, cov=cov), loss


def drift_propagate(state: ExpertState) -> ExpertState:
    """Random-walk prediction step: covariance inflated by drift * I, mean unchanged."""
    if not state.drift:
        return state
    cov = state.cov.copy()
    cov[np.diag_indices_from(cov)] += state.drift
    return replace(state, cov=cov)


# ---------------- Logistic likelihood (Laplace) ----------------
def _moderation(s2: float) -> float:
    return 1.0 / math.sqrt(1.0 + math.pi * s2 / 8.0)


def predict_logistic(state: ExpertState, x) -> float:
    """Probit-moderated probability that the label is +1."""
    _require(state, "logistic")
    f = phi(state.feature_map, x)
    mu = float(f @ state.mean)
    s2 = float(f @ state.cov @ f)
    return float(expit(_moderation(s2) * mu))


def logistic_moments(state: ExpertState, x) -> PredictiveMoments:
    p = predict_logistic(state, x)
    return PredictiveMoments(mean=p, variance=p * (1.0 - p))


def correct_logistic(
    state: ExpertState,
    x,
    y: float,
    *,
    max_iter: Optional[int] = None,
    tol: Optional[float] = None,
) -> Tuple[ExpertState, float]:
    """Laplace correction for one ±1 label.

    The posterior mode of N(θ; θ̂, Σ)·σ(y φᵀθ) lies on θ̂ + c Σφ, so damped
    Newton runs on the scalar c. The precision gains σ(a)(1-σ(a)) φφᵀ at the
    mode, applied to Σ through the matrix-inversion identity.
    """
    _require(state, "logistic")
    if y not in (-1, 1, -1.0, 1.0):
        raise ValueError(f"logistic labels must be ±1, got {y}")
    max_iter = settings.newton_max_iter if max_iter is None else max_iter
    tol = settings.newton_tolerance if tol is None else tol

    f = phi(state.feature_map, x)
    s = state.cov @ f
    mu = float(f @ state.mean)
    s2 = float(f @ s)
    loss = -float(log_expit(y * _moderation(s2) * mu))

    def objective(c: float) -> float:
        return -0.5 * c * c * s2 + float(log_expit(y * (mu + c * s2)))

    c = 0.0
    converged = s2 <= 0.0
    for _ in range(max_iter):
        if converged:
            break
        a = mu + c * s2
        grad_c = y * float(expit(-y * a)) - c  # gradient norm along the mode line
        if abs(grad_c) < tol:
            converged = True
            break
        lam = float(expit(a) * expit(-a))
        step = grad_c / (1.0 + s2 * lam)
        current = objective(c)
        while objective(c + step) < current and abs(step) > 1e-16:
            step *= 0.5
        c += step
    else:
        a = mu + c * s2
        converged = abs(y * float(expit(-y * a)) - c) < tol

    a = mu + c * s2
    lam = float(expit(a) * expit(-a))
    mean = state.mean + c * s
    cov = _symmetrize(state.cov - (lam / (1.0 + lam * s2)) * np.outer(s, s))
    new_state = replace(state, mean=mean, cov=cov)
    if not converged:
        raise NewtonConvergenceError(f"Newton did not converge in {max_iter} iterations", new_state)
    return new_state, loss
