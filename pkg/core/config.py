from __future__ import annotations

from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict, TomlConfigSettingsSource

from core.models import KernelSpec, StreamSchema, StreamSpec


class ConfigError(ValueError):
    """Raised when an experiment configuration cannot be loaded or is inconsistent."""


class Settings(BaseSettings):
    """Process-level settings loaded from environment variables.

    Uses a .env file in development. All values are safe defaults.
    """

    model_config = SettingsConfigDict(
        env_prefix="EGP_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )

    app_name: str = "EnsembleGP"
    log_level: str = "INFO"

    # Parallelism
    workers: int = 1

    # Checkpoint writes
    checkpoint_max_retries: int = 3
    checkpoint_retry_backoff_seconds: float = 0.2

    # Ensemble defaults
    default_q0: float = 0.99
    shutdown_threshold: float = 1e-16

    # Laplace / Newton
    newton_max_iter: int = 25
    newton_tolerance: float = 1e-8

    # Embedding MAP search
    map_max_iter: int = 50
    map_tolerance: float = 1e-6
    latent_prior_var: float = 1.0
    lvm_init_max_iter: int = 100
    # Trust regions: init latents stay within this box around the PCA start,
    # streamed embeddings within this box around the nearest-neighbour start.
    lvm_init_radius: float = 0.2
    map_radius: float = 0.3

    # Marginal likelihood fitting
    hyper_max_iter: int = 200
    hyper_lower_bound: float = 1e-6
    hyper_upper_bound: float = 1e6

    # Approximate nearest neighbours
    ann_max_degree: int = 16
    ann_ef: int = 64


settings = Settings()


TaskName = Literal["regress", "classify", "reduce", "regret", "switchregret"]
ModeName = Literal["static", "switching", "dynamic", "switching_dynamic"]


def default_dictionary() -> List[KernelSpec]:
    """RBF lengthscale grid {10^k}, unit magnitude before fitting."""
    return [KernelSpec(family="rbf", lengthscale=10.0**k) for k in range(-2, 3)]


class OutputPaths(BaseModel):
    metrics_csv: Optional[Path] = None
    summary_json: Optional[Path] = None
    embeddings_csv: Optional[Path] = None
    svg: Optional[Path] = None
    checkpoint: Optional[Path] = None


class ExperimentConfig(BaseSettings):
    """Declarative description of one experiment run.

    Values come from a TOML file (see `load_experiment_config`), can be
    overridden by `EGP_`-prefixed environment variables, and CLI flags take
    precedence over both.
    """

    model_config = SettingsConfigDict(env_prefix="EGP_", case_sensitive=False, extra="forbid")

    task: TaskName = "regress"
    mode: ModeName = "static"
    q0: float = Field(default_factory=lambda: settings.default_q0)
    drift: float = 0.0
    shutdown_threshold: float = Field(default_factory=lambda: settings.shutdown_threshold)

    dictionary: List[KernelSpec] = Field(default_factory=default_dictionary)
    n_rf: int = 50
    t0: int = 100
    seed: int = 0

    input: Optional[Path] = None
    stream: Optional[StreamSpec] = None
    columns: Optional[StreamSchema] = None
    outputs: OutputPaths = Field(default_factory=OutputPaths)

    standardize: bool = False
    fit_hyperparameters: bool = True
    latent_dim: int = 2

    checkpoint_every: Optional[int] = None
    resume_from: Optional[Path] = None
    stop_after: Optional[int] = None
    workers: int = Field(default_factory=lambda: settings.workers)

    # Regret sweeps
    horizons: List[int] = Field(default_factory=lambda: [200, 400, 800, 1600, 3200])
    sweep_seeds: int = 11

    @field_validator("dictionary")
    @classmethod
    def _non_empty_dictionary(cls, value: List[KernelSpec]) -> List[KernelSpec]:
        if not value:
            raise ValueError("dictionary must contain at least one kernel")
        return value

    @field_validator("n_rf", "latent_dim", "workers", "sweep_seeds")
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    @field_validator("drift")
    @classmethod
    def _non_negative_drift(cls, value: float) -> float:
        if value < 0:
            raise ValueError("drift variance must be >= 0")
        return value

    @model_validator(mode="after")
    def _check_mode(self) -> "ExperimentConfig":
        if not 0.0 <= 1.0 - self.q0 <= 1.0:
            raise ValueError("q0 must lie in [0, 1]")
        if self.stream is not None and self.t0 >= self.stream.T:
            raise ValueError(f"t0={self.t0} must be smaller than the stream length {self.stream.T}")
        return self

    @property
    def switching(self) -> bool:
        return self.mode in ("switching", "switching_dynamic")

    @property
    def dynamic(self) -> bool:
        return self.mode in ("dynamic", "switching_dynamic")


def load_experiment_config(path: Optional[Path] = None, **overrides) -> ExperimentConfig:
    """Load an `ExperimentConfig` from a TOML file with keyword overrides on top.

    Overrides whose value is None are ignored so CLI flags left unset do not
    clobber file values.
    """
    values = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        values = TomlConfigSettingsSource(ExperimentConfig, toml_file=path)()
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**values)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
