from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Tuple

import numpy as np


logger = logging.getLogger("EnsembleGP")

LOG_2PI = math.log(2.0 * math.pi)

Objective = Callable[[np.ndarray], Tuple[float, np.ndarray]]


def make_stable_id(*parts: Iterable[str]) -> str:
    hasher = hashlib.sha256()
    for part in parts:
        hasher.update(str(part).encode("utf-8"))
        hasher.update(b"|")
    return hasher.hexdigest()[:16]


def gaussian_nll(y: float, mean: float, variance: float) -> float:
    """-log N(y; mean, variance)."""
    return 0.5 * (LOG_2PI + math.log(variance) + (y - mean) ** 2 / variance)


def as_vector(x, dim: int, name: str = "x") -> np.ndarray:
    """Coerce to a float vector of length `dim`, raising ValueError on mismatch."""
    arr = np.asarray(x, dtype=float).reshape(-1)
    if arr.shape[0] != dim:
        raise ValueError(f"{name} has dimension {arr.shape[0]}, expected {dim}")
    return arr


@dataclass
class AscentResult:
    x: np.ndarray
    value: float
    iterations: int
    converged: bool
    trace: List[float] = field(default_factory=list)


def _projected_gradient(x: np.ndarray, grad: np.ndarray, lower, upper) -> np.ndarray:
    pg = grad.copy()
    if lower is not None:
        pg[(x <= lower) & (grad < 0)] = 0.0
    if upper is not None:
        pg[(x >= upper) & (grad > 0)] = 0.0
    return pg


def gradient_ascent(
    objective: Objective,
    x0: np.ndarray,
    *,
    max_iter: int,
    tol: float,
    step: float = 1.0,
    lower: Optional[np.ndarray] = None,
    upper: Optional[np.ndarray] = None,
    min_step: float = 1e-12,
) -> AscentResult:
    """Projected gradient ascent with backtracking (Armijo) step control.

    Accepted steps never decrease the objective. The step length doubles after
    every accepted step and halves on every rejection. Raises FloatingPointError
    if the objective is not finite at the starting point.
    """
    x = np.array(x0, dtype=float)
    if lower is not None or upper is not None:
        x = np.clip(x, lower, upper)
    value, grad = objective(x)
    if not math.isfinite(value):
        raise FloatingPointError("objective is not finite at the starting point")
    trace = [value]
    accepted = 0
    converged = False

    while accepted < max_iter:
        pg = _projected_gradient(x, grad, lower, upper)
        if float(np.linalg.norm(pg)) < tol:
            converged = True
            break
        moved = False
        while step >= min_step:
            candidate = x + step * pg
            if lower is not None or upper is not None:
                candidate = np.clip(candidate, lower, upper)
            cand_value, cand_grad = objective(candidate)
            gain = 1e-4 * float(pg @ (candidate - x))
            if math.isfinite(cand_value) and cand_value >= value + gain:
                x, value, grad = candidate, cand_value, cand_grad
                trace.append(value)
                accepted += 1
                step *= 2.0
                moved = True
                break
            step *= 0.5
        if not moved:
            # no ascent direction left at floating-point resolution
            converged = True
            break

    return AscentResult(x=x, value=value, iterations=accepted, converged=converged, trace=trace)


def to_signed_labels(labels) -> np.ndarray:
    """Map {0, 1} or {-1, +1} labels to ±1 floats."""
    arr = np.asarray(labels, dtype=float).reshape(-1)
    signed = np.where(arr > 0, 1.0, -1.0)
    if not np.all((arr == 1) | (arr == 0) | (arr == -1)):
        raise ValueError("labels must be in {0, 1} or {-1, +1}")
    return signed


def make_pool(workers: int) -> Optional[ThreadPoolExecutor]:
    """Thread pool for per-expert work, or None when a single worker is configured."""
    return ThreadPoolExecutor(max_workers=workers) if workers > 1 else None


def parallel_map(pool: Optional[Executor], fn: Callable, *iterables) -> list:
    """map() that fans out to `pool` when one is given; output order is preserved."""
    if pool is not None:
        return list(pool.map(fn, *iterables))
    return list(map(fn, *iterables))
