from __future__ import annotations

import math
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


KernelFamily = Literal["rbf", "laplace", "cauchy"]
StreamKind = Literal["sin_mix", "gp_draw", "switching_gp_draw", "two_gaussians", "latent_clusters"]


class KernelSpec(BaseModel):
    """One dictionary entry: kernel family, lengthscale(s), magnitude and noise.

    The standardized kernel has unit value at zero lag; the full kernel is
    `magnitude * evaluate(x, x2)`. Laplace and Cauchy kernels are the
    per-dimension product forms, so their spectral densities factorize.
    """

    model_config = ConfigDict(frozen=True)

    family: KernelFamily = "rbf"
    lengthscale: Union[float, Tuple[float, ...]] = 1.0
    magnitude: float = 1.0
    noise: float = 0.01
    input_dim: int = 1

    @field_validator("lengthscale")
    @classmethod
    def _positive_lengthscale(cls, value):
        values = value if isinstance(value, tuple) else (value,)
        if not values or any(not (v > 0) or not math.isfinite(v) for v in values):
            raise ValueError("lengthscale must be positive and finite")
        return value

    @field_validator("magnitude", "noise")
    @classmethod
    def _positive_variance(cls, value: float) -> float:
        if not (value > 0) or not math.isfinite(value):
            raise ValueError("variances must be positive and finite")
        return value

    @model_validator(mode="after")
    def _check_dims(self) -> "KernelSpec":
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if isinstance(self.lengthscale, tuple) and len(self.lengthscale) != self.input_dim:
            raise ValueError(
                f"lengthscale has {len(self.lengthscale)} entries but input_dim is {self.input_dim}"
            )
        return self

    def lengthscales(self) -> np.ndarray:
        """Per-dimension lengthscales; a scalar is broadcast to `input_dim`."""
        if isinstance(self.lengthscale, tuple):
            return np.asarray(self.lengthscale, dtype=float)
        return np.full(self.input_dim, float(self.lengthscale))

    def evaluate(self, x: np.ndarray, x2: np.ndarray) -> float:
        """Closed-form standardized kernel value between two points."""
        delta = (np.asarray(x, dtype=float) - np.asarray(x2, dtype=float)) / self.lengthscales()
        if self.family == "rbf":
            return float(np.exp(-0.5 * np.dot(delta, delta)))
        if self.family == "laplace":
            return float(np.exp(-np.sum(np.abs(delta))))
        return float(np.prod(1.0 / (1.0 + delta**2)))

    def gram(self, X: np.ndarray) -> np.ndarray:
        """Standardized kernel matrix over the rows of X."""
        Z = np.atleast_2d(np.asarray(X, dtype=float)) / self.lengthscales()
        diff = Z[:, None, :] - Z[None, :, :]
        if self.family == "rbf":
            return np.exp(-0.5 * np.sum(diff**2, axis=-1))
        if self.family == "laplace":
            return np.exp(-np.sum(np.abs(diff), axis=-1))
        return np.prod(1.0 / (1.0 + diff**2), axis=-1)

    @property
    def label(self) -> str:
        ls = self.lengthscale if not isinstance(self.lengthscale, tuple) else list(self.lengthscale)
        return f"{self.family}(l={ls})"


class StreamSpec(BaseModel):
    """Synthetic stream description used by the generators in `adapters.streams`."""

    kind: StreamKind = "sin_mix"
    T: int = 1000
    noise: float = 0.01
    seed: int = 0

    input_dim: int = 1
    input_var: float = 1.0
    kernel: Optional[KernelSpec] = None
    kernel2: Optional[KernelSpec] = None
    switch_at: Optional[int] = None

    # Classification and latent-variable streams
    separation: float = 1.5
    output_dim: int = 10
    latent_dim: int = 2
    n_clusters: int = 3

    @model_validator(mode="after")
    def _check(self) -> "StreamSpec":
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.noise < 0:
            raise ValueError("noise variance must be >= 0")
        if self.switch_at is not None and not 0 < self.switch_at < self.T:
            raise ValueError(f"switch_at must lie in (0, {self.T})")
        return self

    @property
    def boundary(self) -> int:
        return self.switch_at if self.switch_at is not None else self.T // 2


class StreamSchema(BaseModel):
    """Column layout expected from an input CSV.

    `n_features` leading columns are inputs (observations for the `reduce`
    task); the following `n_targets` columns are targets or labels.
    """

    n_features: int
    n_targets: int = 1
    names: Optional[List[str]] = None

    @model_validator(mode="after")
    def _check(self) -> "StreamSchema":
        if self.n_features < 1 or self.n_targets < 0:
            raise ValueError("schema needs at least one feature column and non-negative targets")
        if self.names is not None and len(self.names) != self.width:
            raise ValueError(f"schema names list has {len(self.names)} entries, expected {self.width}")
        return self

    @property
    def width(self) -> int:
        return self.n_features + self.n_targets


class StreamRecord(BaseModel):
    """One ingested row: input vector, optional target, arrival index (1-based row)."""

    index: int
    x: List[float]
    target: Optional[float] = None

    @field_validator("x")
    @classmethod
    def _finite(cls, value: List[float]) -> List[float]:
        if not all(math.isfinite(v) for v in value):
            raise ValueError("non-finite feature value")
        return value


class StepRecord(BaseModel):
    """Per-step emission of the ensemble: prediction, loss and weights used."""

    t: int
    y: float
    mean: float
    variance: float
    loss: float
    weights: List[float] = Field(default_factory=list)


class HyperFitResult(BaseModel):
    """Fitted magnitude/noise for one expert and the attained objective."""

    kernel: str
    magnitude: float
    noise: float
    log_marginal_likelihood: float
    iterations: int


class RunSummary(BaseModel):
    """Final values written to the summary JSON of a run."""

    task: str
    mode: str
    n_steps: int
    metrics: Dict[str, float] = Field(default_factory=dict)
    weights: List[float] = Field(default_factory=list)
    kernels: List[str] = Field(default_factory=list)
    hyperparameters: List[HyperFitResult] = Field(default_factory=list)
    sweep: Dict[str, List[float]] = Field(default_factory=dict)
