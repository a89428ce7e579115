from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from core.config import settings
from core.expert import (
    ExpertState,
    Likelihood,
    NewtonConvergenceError,
    PredictiveMoments,
    correct_gauss,
    correct_logistic,
    drift_propagate,
    fresh_expert,
    logistic_moments,
    predict_gauss,
    predict_logistic,
)
from core.kernels import sample_feature_map
from core.models import KernelSpec, StepRecord
from core.utils import make_pool, parallel_map


logger = logging.getLogger("EnsembleGP")

Mode = Literal["static", "switching", "dynamic", "switching_dynamic"]

# Reported when every expert assigns zero likelihood to an observation.
UNDERFLOW_LOSS = 1.0e6


class EnsembleStateError(RuntimeError):
    """The ensemble cannot serve the request in its current state."""


@dataclass(frozen=True)
class EnsemblePrediction:
    mean: float
    variance: float
    per_expert: List[Optional[PredictiveMoments]]
    weights_used: np.ndarray


@dataclass
class _Staged:
    x: np.ndarray
    experts: List[ExpertState]
    log_weights: np.ndarray
    prediction: EnsemblePrediction


@dataclass
class EnsembleState:
    """Weights over M experts plus the experts themselves.

    Weights are held in the log domain. The state is mutated in place by
    `predict`/`correct` and must have a single writer.
    """

    experts: List[ExpertState]
    log_weights: np.ndarray
    mode: Mode = "static"
    q0: float = 1.0
    shutdown_threshold: float = 1e-16
    active: Optional[np.ndarray] = None
    cum_loss: float = 0.0
    cum_expert_loss: Optional[np.ndarray] = None
    update_counts: Optional[np.ndarray] = None
    t: int = 0
    workers: int = 1
    _staged: Optional[_Staged] = field(default=None, repr=False)
    _pool: Optional[ThreadPoolExecutor] = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        size = len(self.experts)
        if size == 0:
            raise ValueError("an ensemble needs at least one expert")
        self.log_weights = np.asarray(self.log_weights, dtype=float)
        if self.active is None:
            self.active = np.isfinite(self.log_weights)
        if self.cum_expert_loss is None:
            self.cum_expert_loss = np.zeros(size)
        if self.update_counts is None:
            self.update_counts = np.zeros(size, dtype=np.int64)

    @property
    def pool(self) -> Optional[ThreadPoolExecutor]:
        """Per-expert worker pool, created on first use and reused for every step."""
        if self._pool is None:
            self._pool = make_pool(self.workers)
        return self._pool

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    @property
    def size(self) -> int:
        return len(self.experts)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def switching(self) -> bool:
        return self.mode in ("switching", "switching_dynamic")

    @property
    def dynamic(self) -> bool:
        return self.mode in ("dynamic", "switching_dynamic")

    @property
    def likelihood(self) -> Likelihood:
        return self.experts[0].likelihood


def build_ensemble(
    specs: Sequence[KernelSpec],
    n_rf: int,
    seed: int,
    *,
    likelihood: Likelihood = "gaussian",
    mode: Mode = "static",
    q0: Optional[float] = None,
    drift: float = 0.0,
    shutdown_threshold: Optional[float] = None,
    workers: int = 1,
) -> EnsembleState:
    """Fresh ensemble with uniform weights; expert m draws its map with seed + m."""
    if not specs:
        raise ValueError("dictionary must contain at least one kernel")
    dynamic = mode in ("dynamic", "switching_dynamic")
    experts = [
        fresh_expert(spec, sample_feature_map(spec, n_rf, seed + m), likelihood, drift if dynamic else None)
        for m, spec in enumerate(specs)
    ]
    switching = mode in ("switching", "switching_dynamic")
    return EnsembleState(
        experts=experts,
        log_weights=np.full(len(experts), -math.log(len(experts))),
        mode=mode,
        q0=(settings.default_q0 if q0 is None else q0) if switching else 1.0,
        shutdown_threshold=settings.shutdown_threshold if shutdown_threshold is None else shutdown_threshold,
        workers=workers,
    )


# ---------------- Weight prediction ----------------
def _predict_log_weights(log_weights: np.ndarray, q0: float) -> np.ndarray:
    size = log_weights.shape[0]
    if size == 1 or q0 >= 1.0:
        return log_weights.copy()
    with np.errstate(divide="ignore"):
        stay = math.log(q0) + log_weights if q0 > 0 else np.full(size, -np.inf)
        leave = math.log((1.0 - q0) / (size - 1)) + np.log1p(-np.minimum(np.exp(log_weights), 1.0))
    return np.logaddexp(stay, leave)


def predict_weights_switching(weights, q0: float) -> np.ndarray:
    """Markov prediction w'_m = q0 w_m + (1 - q0)/(M - 1) * sum_{m' != m} w_m'."""
    if not 0.0 <= 1.0 - q0 <= 1.0:
        raise ValueError(f"q0 must lie in [0, 1], got {q0}")
    weights = np.asarray(weights, dtype=float)
    if weights.shape[0] == 1 or q0 == 1.0:
        return weights.copy()
    size = weights.shape[0]
    return q0 * weights + (1.0 - q0) / (size - 1) * (weights.sum() - weights)


def update_weights(weights, losses) -> Tuple[np.ndarray, float]:
    """Bayesian weight correction w'_m ∝ w_m exp(-l_m); returns (w', ensemble loss)."""
    with np.errstate(divide="ignore"):
        combined = np.log(np.asarray(weights, dtype=float)) - np.asarray(losses, dtype=float)
    norm = float(logsumexp(combined))
    return np.exp(combined - norm), -norm


# ---------------- Prediction ----------------
def _expert_moments(expert: ExpertState, x: np.ndarray) -> PredictiveMoments:
    if expert.likelihood == "gaussian":
        return predict_gauss(expert, x)
    return logistic_moments(expert, x)


def _mixture(weights: np.ndarray, moments: List[Optional[PredictiveMoments]]) -> Tuple[float, float]:
    used = [(w, pm) for w, pm in zip(weights, moments) if pm is not None and w > 0.0]
    mean = sum(w * pm.mean for w, pm in used)
    variance = sum(w * (pm.variance + (mean - pm.mean) ** 2) for w, pm in used)
    return float(mean), float(variance)


def predict(state: EnsembleState, x) -> EnsemblePrediction:
    """Fuse expert predictive moments at x.

    Order of operations: expert drift (dynamic modes), then Markov weight
    prediction (switching modes), then the per-expert predictions. Repeated
    calls for the same x before `correct` return the staged prediction.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    staged = state._staged
    if staged is not None and np.array_equal(staged.x, x):
        return staged.prediction
    if not state.active.any():
        raise EnsembleStateError("all experts are shut down; cannot predict")

    experts = list(state.experts)
    if state.dynamic:
        experts = [drift_propagate(e) if a else e for e, a in zip(experts, state.active)]
    log_weights = _predict_log_weights(state.log_weights, state.q0) if state.switching else state.log_weights.copy()

    indices = [m for m in range(state.size) if state.active[m]]
    computed = parallel_map(state.pool, lambda m: _expert_moments(experts[m], x), indices)
    per_expert: List[Optional[PredictiveMoments]] = [None] * state.size
    for m, moments in zip(indices, computed):
        per_expert[m] = moments

    weights_used = np.exp(log_weights)
    mean, variance = _mixture(weights_used, per_expert)
    prediction = EnsemblePrediction(mean=mean, variance=variance, per_expert=per_expert, weights_used=weights_used)
    state._staged = _Staged(x=x, experts=experts, log_weights=log_weights, prediction=prediction)
    return prediction


# ---------------- Correction ----------------
def _correct_expert(expert: ExpertState, x: np.ndarray, y: float) -> Tuple[ExpertState, float]:
    if expert.likelihood == "gaussian":
        return correct_gauss(expert, x, y)
    try:
        return correct_logistic(expert, x, y)
    except NewtonConvergenceError as exc:
        logger.warning("Laplace update kept the last Newton iterate: %s", exc)
        p = predict_logistic(expert, x)
        return exc.state, -math.log(p if y > 0 else 1.0 - p)


def correct(state: EnsembleState, x, y: float) -> Tuple[EnsembleState, float]:
    """Correct active experts and the weights with observation y at x.

    Per-expert losses come from the pre-update predictive. The weight update is
    done in the log domain; in non-switching modes experts whose weight drops
    below the shutdown threshold are frozen with weight exactly 0.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    predict(state, x)
    staged = state._staged

    indices = [m for m in range(state.size) if state.active[m]]
    results = parallel_map(state.pool, lambda m: _correct_expert(staged.experts[m], x, y), indices)
    experts = list(staged.experts)
    losses = np.full(state.size, np.inf)
    for m, (expert, loss) in zip(indices, results):
        experts[m] = expert
        losses[m] = loss

    active_before = state.active.copy()
    combined = np.where(active_before, staged.log_weights - losses, -np.inf)
    norm = float(logsumexp(combined[active_before]))
    if math.isfinite(norm):
        log_weights = combined - norm
        ensemble_loss = -norm
    else:
        logger.warning("Every expert likelihood underflowed at t=%d; weights left unchanged", state.t + 1)
        log_weights = staged.log_weights
        ensemble_loss = UNDERFLOW_LOSS

    if not state.switching:
        log_weights = _shutdown(state, log_weights)

    state.experts = experts
    state.log_weights = log_weights
    state.cum_loss += ensemble_loss
    state.cum_expert_loss[active_before] += losses[active_before]
    state.update_counts[active_before] += 1
    state.t += 1
    state._staged = None
    return state, ensemble_loss


def _shutdown(state: EnsembleState, log_weights: np.ndarray) -> np.ndarray:
    if state.shutdown_threshold <= 0.0:
        return log_weights
    below = state.active & (log_weights < math.log(state.shutdown_threshold))
    if not below.any():
        return log_weights
    for m in np.flatnonzero(below):
        logger.warning("Shutting down expert %d (%s) at t=%d", m, state.experts[m].spec.label, state.t + 1)
    state.active = state.active & ~below
    log_weights = np.where(state.active, log_weights, -np.inf)
    return log_weights - logsumexp(log_weights[state.active])


def step(state: EnsembleState, x, y: float) -> StepRecord:
    """Predict-then-correct for one observation, returning the per-step record."""
    prediction = predict(state, x)
    _, loss = correct(state, x, y)
    return StepRecord(
        t=state.t,
        y=float(y),
        mean=prediction.mean,
        variance=prediction.variance,
        loss=loss,
        weights=prediction.weights_used.tolist(),
    )


def regret_accumulators(state: EnsembleState) -> Tuple[float, np.ndarray]:
    """Running sums of the ensemble loss and of each expert's one-step loss."""
    return state.cum_loss, state.cum_expert_loss.copy()
