from __future__ import annotations

import logging
import math
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.special import logsumexp
from sklearn.decomposition import PCA

from core.ann import AnnIndex
from core.config import settings
from core.hyperopt import rf_log_marginal_likelihood
from core.kernels import FeatureMap, input_gradient, phi, phi_batch, phi_jacobian, sample_feature_map
from core.linalg import cholesky_update, reconstruction_error
from core.models import KernelSpec
from core.utils import LOG_2PI, gradient_ascent, make_pool, parallel_map


logger = logging.getLogger("EnsembleGP")


class InitializationError(ValueError):
    """The initialization window cannot seed the latent-variable experts."""


@dataclass
class LvmExpertState:
    """Sufficient statistics of one latent-variable expert.

    R is the upper Cholesky factor of A = ΦᵀΦ + (noise/magnitude) I and B = ΦᵀY,
    so the posterior over the per-channel weights has mean A⁻¹B and the shared
    covariance noise·A⁻¹. `embeddings` is appended in place on every step.
    """

    R: np.ndarray
    B: np.ndarray
    feature_map: FeatureMap
    spec: KernelSpec
    embeddings: List[np.ndarray] = field(default_factory=list)
    prior_var: float = 1.0

    @property
    def noise(self) -> float:
        return self.spec.noise

    @property
    def output_dim(self) -> int:
        return self.B.shape[1]

    def weight_mean(self) -> np.ndarray:
        """Θ̂ᵀ = A⁻¹B, shape (2 n_rf, D)."""
        return cho_solve((self.R, False), self.B)


@dataclass(frozen=True)
class EmbedStep:
    """Per-step emission of the latent-variable ensemble."""

    t: int
    x_hat: np.ndarray
    m_star: int
    log_likelihoods: np.ndarray
    objectives: np.ndarray
    fallback: np.ndarray


# ---------------- Prediction ----------------
def lvm_predict_channelwise(state: LvmExpertState, x) -> Tuple[np.ndarray, float]:
    """Per-channel predictive mean and the shared predictive variance at latent x."""
    f = phi(state.feature_map, x)
    mean = state.weight_mean().T @ f
    v = solve_triangular(state.R, f, trans="T", lower=False)
    return mean, state.noise * (float(v @ v) + 1.0)


def embedding_objective(
    state: LvmExpertState, y: np.ndarray, x: np.ndarray, theta: Optional[np.ndarray] = None
) -> Tuple[float, np.ndarray, float]:
    """log N(y; μ(x), s²(x) I) + log N(x; 0, σ_x² I), its gradient in x, and the likelihood term alone."""
    theta = state.weight_mean() if theta is None else theta
    f = phi(state.feature_map, x)
    J = phi_jacobian(state.feature_map, x)
    u = cho_solve((state.R, False), f)
    s2 = state.noise * (float(f @ u) + 1.0)
    mu = theta.T @ f
    r = y - mu
    D = y.shape[0]
    rr = float(r @ r)

    log_lik = -0.5 * D * (LOG_2PI + math.log(s2)) - 0.5 * rr / s2
    log_prior = -0.5 * x.shape[0] * (LOG_2PI + math.log(state.prior_var)) - 0.5 * float(x @ x) / state.prior_var

    d_s2 = 2.0 * state.noise * (J.T @ u)
    d_mu = theta.T @ J
    grad = -0.5 * D * d_s2 / s2 + (r @ d_mu) / s2 + 0.5 * rr / s2**2 * d_s2 - x / state.prior_var
    return log_lik + log_prior, grad, log_lik


# ---------------- Initialization ----------------
def pca_init(Y0: np.ndarray, d: int) -> np.ndarray:
    """Whitened linear PCA coordinates shared by every expert as the starting latents."""
    return PCA(n_components=d, whiten=True, svd_solver="full").fit_transform(Y0)


def _init_objective(Phi_fn, grad_fn, Y0: np.ndarray, prior_var: float):
    def objective(X: np.ndarray, log_magnitude: float, log_noise: float):
        Phi = Phi_fn(X)
        ml = rf_log_marginal_likelihood(Phi, Y0, noise=math.exp(log_noise), magnitude=math.exp(log_magnitude))
        prior = -0.5 * float(np.sum(X**2)) / prior_var
        return ml, prior, grad_fn(X, ml.d_features) - X / prior_var

    return objective


def _fit_expert(
    Y0: np.ndarray,
    X_init: np.ndarray,
    spec: KernelSpec,
    feature_map: FeatureMap,
    *,
    prior_var: float,
    fit_hyperparameters: bool,
    max_iter: int,
    tol: float,
    radius: Optional[float] = None,
) -> Tuple[np.ndarray, KernelSpec, List[float]]:
    """Alternate ascent over the latents X and over (log magnitude, log noise).

    Each latent coordinate stays within `radius` of its starting value.
    """
    t0, d = X_init.shape
    objective = _init_objective(
        lambda X: phi_batch(feature_map, X),
        lambda X, dPhi: input_gradient(feature_map, X, dPhi),
        Y0,
        prior_var,
    )
    lo, hi = math.log(settings.hyper_lower_bound), math.log(settings.hyper_upper_bound)
    radius = settings.lvm_init_radius if radius is None else radius
    box_lower, box_upper = X_init.reshape(-1) - radius, X_init.reshape(-1) + radius
    X = X_init.copy()
    hyper = np.clip(np.log([spec.magnitude, spec.noise]), lo, hi)

    def latent_block(v: np.ndarray) -> Tuple[float, np.ndarray]:
        try:
            ml, prior, grad = objective(v.reshape(t0, d), hyper[0], hyper[1])
        except LinAlgError:
            return -math.inf, np.zeros_like(v)
        return ml.value + prior, grad.reshape(-1)

    def hyper_block(u: np.ndarray) -> Tuple[float, np.ndarray]:
        try:
            ml, prior, _ = objective(X, u[0], u[1])
        except LinAlgError:
            return -math.inf, np.zeros(2)
        return ml.value + prior, np.array([ml.d_log_magnitude, ml.d_log_noise])

    trace: List[float] = []
    inner = 10
    for _ in range(max(1, max_iter // inner)):
        previous = trace[-1] if trace else -math.inf
        latent = gradient_ascent(
            latent_block, X.reshape(-1), max_iter=inner, tol=tol, step=0.1, lower=box_lower, upper=box_upper,
        )
        X = latent.x.reshape(t0, d)
        trace.extend(latent.trace if not trace else latent.trace[1:])
        moved = latent.iterations
        if fit_hyperparameters:
            fitted = gradient_ascent(
                hyper_block, hyper, max_iter=inner, tol=tol, step=0.1,
                lower=np.full(2, lo), upper=np.full(2, hi),
            )
            hyper = fitted.x
            trace.extend(fitted.trace[1:])
            moved += fitted.iterations
        if moved == 0 or trace[-1] - previous < tol:
            break

    magnitude, noise = (float(v) for v in np.exp(hyper))
    return X, spec.model_copy(update={"magnitude": magnitude, "noise": noise}), trace


def lvm_init(
    Y0,
    specs: Sequence[KernelSpec],
    n_rf: int,
    d: int,
    seed: int,
    *,
    fit_hyperparameters: bool = True,
    prior_var: Optional[float] = None,
    max_iter: Optional[int] = None,
    workers: int = 1,
) -> Tuple[List[LvmExpertState], np.ndarray]:
    """Seed every expert from the first t0 observations.

    Latents start from whitened linear PCA of Y0 (identical for all experts),
    then each expert maximizes its random-feature marginal likelihood plus the
    latent prior over X and, optionally, its magnitude and noise.
    """
    Y0 = np.atleast_2d(np.asarray(Y0, dtype=float))
    t0, D = Y0.shape
    if not specs:
        raise InitializationError("dictionary must contain at least one kernel")
    if t0 < d + 1:
        raise InitializationError(f"initialization window of {t0} rows is too small for d={d}")
    if not np.all(np.isfinite(Y0)):
        raise InitializationError("initialization window contains non-finite values")
    if D < d or np.linalg.matrix_rank(Y0 - Y0.mean(axis=0)) < d:
        raise InitializationError(f"initialization window has rank below the latent dimension {d}")

    prior_var = settings.latent_prior_var if prior_var is None else prior_var
    max_iter = settings.lvm_init_max_iter if max_iter is None else max_iter
    X_pca = pca_init(Y0, d)
    logger.info("LVM init: t0=%d D=%d d=%d, %d experts", t0, D, d, len(specs))

    def seed_expert(m: int) -> LvmExpertState:
        spec = specs[m].model_copy(update={"input_dim": d}) if specs[m].input_dim != d else specs[m]
        feature_map = sample_feature_map(spec, n_rf, seed + m)
        try:
            X, fitted, trace = _fit_expert(
                Y0, X_pca, spec, feature_map,
                prior_var=prior_var, fit_hyperparameters=fit_hyperparameters,
                max_iter=max_iter, tol=settings.map_tolerance,
            )
        except FloatingPointError as exc:
            raise InitializationError(f"marginal likelihood not finite for {spec.label}") from exc
        Phi = phi_batch(feature_map, X)
        A = Phi.T @ Phi
        A[np.diag_indices_from(A)] += fitted.noise / fitted.magnitude
        logger.info(
            "LVM expert %d %s: magnitude=%.4g noise=%.4g objective %.4f -> %.4f",
            m, fitted.label, fitted.magnitude, fitted.noise, trace[0], trace[-1],
        )
        return LvmExpertState(
            R=cholesky(A, lower=False),
            B=Phi.T @ Y0,
            feature_map=feature_map,
            spec=fitted,
            embeddings=[row.copy() for row in X],
            prior_var=prior_var,
        )

    pool = make_pool(workers)
    try:
        states = parallel_map(pool, seed_expert, range(len(specs)))
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
    return states, np.full(len(states), 1.0 / len(states))


# ---------------- Streaming ----------------
def _embed_one(state: LvmExpertState, y: np.ndarray, x0: np.ndarray) -> Tuple[np.ndarray, float, float, bool]:
    """MAP embedding of y searched within a box of half-width `map_radius` around x0."""
    theta = state.weight_mean()

    def objective(x: np.ndarray) -> Tuple[float, np.ndarray]:
        value, grad, _ = embedding_objective(state, y, x, theta)
        return value, grad

    try:
        result = gradient_ascent(
            objective, x0, max_iter=settings.map_max_iter, tol=settings.map_tolerance, step=0.1,
            lower=x0 - settings.map_radius, upper=x0 + settings.map_radius,
        )
        x_hat, fallback = result.x, False
    except FloatingPointError:
        x_hat, fallback = x0.copy(), True
    value, _, log_lik = embedding_objective(state, y, x_hat, theta)
    if not math.isfinite(value):
        x_hat, fallback = x0.copy(), True
        value, _, log_lik = embedding_objective(state, y, x_hat, theta)
    return x_hat, value, log_lik, fallback


def _absorb(state: LvmExpertState, x_hat: np.ndarray, y: np.ndarray) -> LvmExpertState:
    f = phi(state.feature_map, x_hat)
    updated = replace(state, R=cholesky_update(state.R, f), B=state.B + np.outer(f, y))
    updated.embeddings.append(x_hat)
    return updated


def embed_step_log(
    states: Sequence[LvmExpertState],
    log_weights: np.ndarray,
    ann: AnnIndex,
    y,
    *,
    pool: Optional[Executor] = None,
) -> Tuple[EmbedStep, List[LvmExpertState], np.ndarray]:
    """Log-domain core of `lvm_embed_step`; also inserts y into the ANN index."""
    y = np.asarray(y, dtype=float).reshape(-1)
    if not np.all(np.isfinite(y)):
        raise ValueError("observation contains non-finite values")
    if y.shape[0] != states[0].output_dim:
        raise ValueError(f"observation has dimension {y.shape[0]}, expected {states[0].output_dim}")
    key = ann.query(y)

    results = parallel_map(pool, lambda s: _embed_one(s, y, s.embeddings[key]), states)
    objectives = np.array([r[1] for r in results])
    log_liks = np.array([r[2] for r in results])
    fallback = np.array([r[3] for r in results])
    for m in np.flatnonzero(fallback):
        logger.warning("Embedding search for expert %d diverged; kept the nearest-neighbour start", m)

    m_star = int(np.argmax(log_weights + objectives))
    combined = log_weights + log_liks
    new_log_weights = combined - logsumexp(combined)

    updated = [_absorb(s, r[0], y) for s, r in zip(states, results)]
    ann.insert(y)
    record = EmbedStep(
        t=len(ann),
        x_hat=results[m_star][0].copy(),
        m_star=m_star,
        log_likelihoods=log_liks,
        objectives=objectives,
        fallback=fallback,
    )
    return record, updated, new_log_weights


def lvm_embed_step(
    states: Sequence[LvmExpertState],
    weights,
    ann: AnnIndex,
    y,
) -> Tuple[np.ndarray, int, List[LvmExpertState], np.ndarray]:
    """Embed one observation, pick the best expert and update every expert with its own embedding."""
    with np.errstate(divide="ignore"):
        log_weights = np.log(np.asarray(weights, dtype=float))
    record, updated, new_log_weights = embed_step_log(states, log_weights, ann, y)
    return record.x_hat, record.m_star, updated, np.exp(new_log_weights)


@dataclass
class LvmModel:
    """Streaming latent-variable ensemble: experts, log weights and the ANN index."""

    states: List[LvmExpertState]
    log_weights: np.ndarray
    ann: AnnIndex
    offset: np.ndarray
    selections: List[int] = field(default_factory=list)
    selected: List[np.ndarray] = field(default_factory=list)
    workers: int = 1
    _pool: Optional[ThreadPoolExecutor] = field(default=None, repr=False, compare=False)

    @classmethod
    def initialize(
        cls,
        Y0,
        specs: Sequence[KernelSpec],
        n_rf: int,
        d: int,
        seed: int,
        *,
        fit_hyperparameters: bool = True,
        exact_ann: bool = False,
        workers: int = 1,
        max_iter: Optional[int] = None,
    ) -> "LvmModel":
        Y0 = np.atleast_2d(np.asarray(Y0, dtype=float))
        offset = Y0.mean(axis=0)
        states, weights = lvm_init(
            Y0 - offset, specs, n_rf, d, seed,
            fit_hyperparameters=fit_hyperparameters, workers=workers, max_iter=max_iter,
        )
        ann = AnnIndex(exact=exact_ann, seed=seed)
        for row in Y0 - offset:
            ann.insert(row)
        return cls(states=states, log_weights=np.log(weights), ann=ann, offset=offset, workers=workers)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def t(self) -> int:
        return len(self.ann)

    @property
    def pool(self) -> Optional[ThreadPoolExecutor]:
        if self._pool is None:
            self._pool = make_pool(self.workers)
        return self._pool

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def step(self, y) -> EmbedStep:
        y = np.asarray(y, dtype=float).reshape(-1) - self.offset
        record, self.states, self.log_weights = embed_step_log(
            self.states, self.log_weights, self.ann, y, pool=self.pool
        )
        self.selections.append(record.m_star)
        self.selected.append(record.x_hat)
        return record

    def best_expert(self) -> int:
        return int(np.argmax(self.log_weights))

    def embeddings(self, expert: Optional[int] = None) -> np.ndarray:
        """All embeddings (initialization window included) in one expert's coordinates."""
        m = self.best_expert() if expert is None else expert
        return np.vstack(self.states[m].embeddings)

    def reconstruction_errors(self) -> np.ndarray:
        """‖RᵀR − A‖_F / ‖A‖_F per expert, with A rebuilt from the stored embeddings."""
        errors = []
        for state in self.states:
            Phi = phi_batch(state.feature_map, np.vstack(state.embeddings))
            A = Phi.T @ Phi
            A[np.diag_indices_from(A)] += state.noise / state.spec.magnitude
            errors.append(reconstruction_error(state.R, A) / float(np.linalg.norm(A)))
        return np.array(errors)
