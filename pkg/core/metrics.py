from __future__ import annotations

import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import cho_solve, cholesky
from sklearn.neighbors import NearestNeighbors

from core.kernels import FeatureMap, phi_batch
from core.models import KernelSpec
from core.utils import LOG_2PI, to_signed_labels


logger = logging.getLogger("EnsembleGP")

Z_95 = 1.959963984540054


def _paired(y_true, y_pred):
    y_true = np.asarray(y_true, dtype=float).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=float).reshape(-1)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.shape[0]} targets vs {y_pred.shape[0]} predictions")
    return y_true, y_pred


def _running_mean(values: np.ndarray) -> np.ndarray:
    return np.cumsum(values) / np.arange(1, values.shape[0] + 1)


def nmse(y_true, y_pred) -> np.ndarray:
    """Running mean squared error normalized by the sample variance of the full target sequence."""
    y_true, y_pred = _paired(y_true, y_pred)
    if y_true.shape[0] < 2:
        raise ValueError("nMSE needs at least two targets")
    variance = float(np.var(y_true, ddof=1))
    if variance <= 0.0:
        raise ValueError("targets have zero sample variance")
    return _running_mean((y_true - y_pred) ** 2) / variance


def pnll(y_true, means, variances) -> np.ndarray:
    """Per-step predictive negative log-likelihood under N(mean, variance)."""
    y_true, means = _paired(y_true, means)
    variances = np.asarray(variances, dtype=float).reshape(-1)
    return 0.5 * (LOG_2PI + np.log(variances) + (y_true - means) ** 2 / variances)


def running_pnll(losses) -> np.ndarray:
    return _running_mean(np.asarray(losses, dtype=float))


def cumulative_error(labels, probabilities) -> np.ndarray:
    """Running misclassification rate; a probability of at least 0.5 predicts +1."""
    labels = to_signed_labels(labels)
    probabilities = np.asarray(probabilities, dtype=float).reshape(-1)
    if labels.shape != probabilities.shape:
        raise ValueError("labels and probabilities differ in length")
    predicted = np.where(probabilities >= 0.5, 1.0, -1.0)
    return _running_mean((predicted != labels).astype(float))


def coverage_95(means, variances, y_true) -> float:
    """Fraction of targets inside mean ± 1.96 σ."""
    y_true, means = _paired(y_true, means)
    sd = np.sqrt(np.asarray(variances, dtype=float).reshape(-1))
    return float(np.mean(np.abs(y_true - means) <= Z_95 * sd))


def lvm_knn_error(embeddings, labels) -> float:
    """Leave-one-out 1-NN error rate in embedding space."""
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=float))
    labels = np.asarray(labels).reshape(-1)
    t = embeddings.shape[0]
    if t < 2:
        raise ValueError("leave-one-out 1-NN needs at least two points")
    if labels.shape[0] != t:
        raise ValueError("labels and embeddings differ in length")
    _, idx = NearestNeighbors(n_neighbors=2).fit(embeddings).kneighbors(embeddings)
    rows = np.arange(t)
    # duplicates can push the query point itself out of first place
    neighbour = np.where(idx[:, 0] == rows, idx[:, 1], idx[:, 0])
    return float(np.mean(labels[neighbour] != labels))


class BenchmarkSolver:
    """Best-in-hindsight batch fits in each expert's random-feature span.

    For expert m the fit is the ridge solution θ* = (ΦᵀΦ + σ_n²/σ_θ² I)⁻¹Φᵀy.
    The best expert minimizes the penalized loss NLL(θ*) + ½‖θ*‖²/σ_θ²; the
    reported comparator is that expert's unregularized NLL.
    """

    def __init__(self, specs: Sequence[KernelSpec], maps: Sequence[FeatureMap], X, y) -> None:
        if len(specs) != len(maps) or not specs:
            raise ValueError("need one feature map per kernel spec")
        self.specs = list(specs)
        self.maps = list(maps)
        self.X = np.atleast_2d(np.asarray(X, dtype=float))
        self.y = np.asarray(y, dtype=float).reshape(-1)
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError("inputs and targets differ in length")
        self._features: List[Optional[np.ndarray]] = [None] * len(self.specs)

    def __len__(self) -> int:
        return self.y.shape[0]

    def features(self, m: int) -> np.ndarray:
        if self._features[m] is None:
            self._features[m] = phi_batch(self.maps[m], self.X)
        return self._features[m]

    def ridge(self, m: int) -> float:
        return self.specs[m].noise / self.specs[m].magnitude

    def fit(self, m: int, start: int = 0, end: Optional[int] = None) -> np.ndarray:
        Phi = self.features(m)[start:end]
        A = Phi.T @ Phi
        A[np.diag_indices_from(A)] += self.ridge(m)
        return cho_solve((cholesky(A, lower=False), False), Phi.T @ self.y[start:end])

    def _losses(self, m: int, n: int, rss: float, theta: np.ndarray) -> Tuple[float, float]:
        noise = self.specs[m].noise
        nll = 0.5 * (n * (LOG_2PI + math.log(noise)) + max(rss, 0.0) / noise)
        return nll, nll + 0.5 * float(theta @ theta) / self.specs[m].magnitude

    def losses(self, m: int, start: int = 0, end: Optional[int] = None) -> Tuple[float, float]:
        """(unregularized NLL, penalized NLL) of expert m's ridge fit on y[start:end]."""
        theta = self.fit(m, start, end)
        r = self.y[start:end] - self.features(m)[start:end] @ theta
        return self._losses(m, r.shape[0], float(r @ r), theta)

    def nll(self, m: int, start: int = 0, end: Optional[int] = None) -> float:
        return self.losses(m, start, end)[0]

    def comparator(self, start: int = 0, end: Optional[int] = None) -> float:
        nll, _ = min((self.losses(m, start, end) for m in range(len(self.specs))), key=lambda pair: pair[1])
        return nll

    def comparator_series(self, start: int = 0, end: Optional[int] = None) -> np.ndarray:
        """comparator(start, start + k) for k = 1 .. end - start, from running normal equations."""
        end = len(self) if end is None else end
        out = np.full(end - start, np.inf)
        best = np.full(end - start, np.inf)
        for m in range(len(self.specs)):
            Phi = self.features(m)
            A = self.ridge(m) * np.eye(Phi.shape[1])
            b = np.zeros(Phi.shape[1])
            yy = 0.0
            for k, tau in enumerate(range(start, end)):
                f, target = Phi[tau], self.y[tau]
                A += np.outer(f, f)
                b += target * f
                yy += target * target
                theta = cho_solve((cholesky(A, lower=False), False), b)
                # ‖y − Φθ‖² = yᵀy − 2θᵀb + θᵀ(A − λI)θ
                rss = yy - 2.0 * float(theta @ b) + float(theta @ A @ theta) - self.ridge(m) * float(theta @ theta)
                nll, penalized = self._losses(m, k + 1, rss, theta)
                if penalized < best[k]:
                    best[k], out[k] = penalized, nll
        return out


def regret_static(ensemble_losses, benchmark: BenchmarkSolver) -> np.ndarray:
    """Cumulative ensemble loss minus the best fixed-expert batch loss, per horizon t."""
    losses = np.asarray(ensemble_losses, dtype=float).reshape(-1)
    if losses.shape[0] != len(benchmark):
        raise ValueError("losses and benchmark data differ in length")
    return np.cumsum(losses) - benchmark.comparator_series()


def regret_switching(losses, benchmark: BenchmarkSolver, boundaries: Sequence[int] = ()) -> np.ndarray:
    """Average switching regret R(t)/t against per-segment best experts.

    `boundaries` are the first indices of every segment after the first.
    """
    losses = np.asarray(losses, dtype=float).reshape(-1)
    T = losses.shape[0]
    if T != len(benchmark):
        raise ValueError("losses and benchmark data differ in length")
    edges = [0] + sorted(b for b in boundaries if 0 < b < T) + [T]
    comparator = np.empty(T)
    completed = 0.0
    for start, end in zip(edges[:-1], edges[1:]):
        series = benchmark.comparator_series(start, end)
        comparator[start:end] = completed + series
        completed += float(series[-1])
    return (np.cumsum(losses) - comparator) / np.arange(1, T + 1)
