from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError
from sklearn.decomposition import PCA

from adapters.checkpoint import checkpoint_load, checkpoint_save, dictionary_fingerprint
from adapters.csv_stream import StreamParseError, ingest_csv
from adapters.report import write_embeddings_csv, write_metrics_csv, write_summary_json, write_svg
from adapters.streams import SyntheticStream, gen_stream
from core.config import ConfigError, ExperimentConfig
from core.ensemble import EnsembleState, build_ensemble, step
from core.hyperopt import fit_dictionary
from core.kernels import sample_feature_map
from core.lvm import InitializationError, LvmModel
from core.metrics import (
    BenchmarkSolver,
    coverage_95,
    cumulative_error,
    lvm_knn_error,
    nmse,
    pnll,
    regret_switching,
    running_pnll,
)
from core.models import HyperFitResult, KernelSpec, RunSummary, StepRecord, StreamRecord, StreamSpec
from core.utils import to_signed_labels


logger = logging.getLogger("EnsembleGP")

# spot-check interval for the LVM Cholesky factors
RECONSTRUCTION_CHECK_EVERY = 100
SWITCHING_HORIZONS = [400, 800, 1600, 3200]


# ---------------- Input preparation ----------------
@dataclass
class Standardizer:
    """z-score statistics estimated on the initialization window, then frozen."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X0) -> "Standardizer":
        X0 = np.atleast_2d(np.asarray(X0, dtype=float))
        scale = X0.std(axis=0)
        return cls(mean=X0.mean(axis=0), scale=np.where(scale > 0.0, scale, 1.0))

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(mean=np.zeros(dim), scale=np.ones(dim))

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.scale

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {"standardizer_mean": self.mean, "standardizer_scale": self.scale}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "Standardizer":
        return cls(mean=arrays["standardizer_mean"], scale=arrays["standardizer_scale"])


def default_stream(task: str) -> StreamSpec:
    """Synthetic stream used when a config names neither an input file nor a stream."""
    if task == "classify":
        return StreamSpec(kind="two_gaussians", T=1000, input_dim=2)
    if task == "reduce":
        return StreamSpec(kind="latent_clusters", T=600, noise=0.01)
    if task == "regret":
        return StreamSpec(kind="sin_mix", T=3200, input_var=100.0)
    if task == "switchregret":
        return StreamSpec(kind="switching_gp_draw", T=3200, noise=1.0)
    return StreamSpec(kind="sin_mix", T=1000)


def default_dictionary_for(task: str) -> List[KernelSpec]:
    if task == "switchregret":
        return [KernelSpec(lengthscale=0.01, noise=1.0), KernelSpec(lengthscale=100.0, noise=1.0)]
    if task == "reduce":
        return [KernelSpec(lengthscale=ls, noise=0.1) for ls in (1.0, 2.0, 4.0)]
    return []


def resolve_dictionary(config: ExperimentConfig, input_dim: int) -> List[KernelSpec]:
    """Config dictionary (or the task default) re-validated for the stream's input dimension."""
    specs = config.dictionary
    if "dictionary" not in config.model_fields_set:
        specs = default_dictionary_for(config.task) or specs
    try:
        return [KernelSpec(**{**spec.model_dump(), "input_dim": input_dim}) for spec in specs]
    except ValidationError as exc:
        raise ConfigError(f"dictionary does not fit input dimension {input_dim}: {exc}") from exc


@dataclass
class StreamSource:
    records: Iterator[StreamRecord]
    labels: Optional[np.ndarray] = None
    boundary: Optional[int] = None


def open_source(config: ExperimentConfig) -> StreamSource:
    if config.input is not None:
        if config.columns is None:
            raise ConfigError("an input CSV needs a [columns] schema")
        return StreamSource(records=ingest_csv(config.input, config.columns))
    spec = config.stream or default_stream(config.task)
    stream = gen_stream(spec)
    return StreamSource(records=stream.records(), labels=stream.labels, boundary=stream.boundary)


def _take_window(records: Iterator[StreamRecord], t0: int) -> List[StreamRecord]:
    window = list(itertools.islice(records, t0))
    if len(window) < t0:
        raise InitializationError(f"stream has {len(window)} rows, the initialization window needs {t0}")
    return window


# ---------------- Results ----------------
@dataclass
class RunResult:
    summary: RunSummary
    frame: pd.DataFrame
    artifacts: Dict[str, Path] = field(default_factory=dict)
    completed: bool = True
    exit_status: int = 0


def _write_outputs(config: ExperimentConfig, result: RunResult, chart: Dict[str, Sequence[float]], chart_title: str, **svg_opts) -> None:
    outputs = config.outputs
    if outputs.metrics_csv is not None:
        result.artifacts["metrics_csv"] = write_metrics_csv(result.frame, outputs.metrics_csv)
    if outputs.summary_json is not None:
        result.artifacts["summary_json"] = write_summary_json(result.summary, outputs.summary_json)
    if outputs.svg is not None and chart:
        result.artifacts["svg"] = write_svg(chart, outputs.svg, title=chart_title, **svg_opts)


# ---------------- Supervised streams ----------------
def _history_arrays(history: List[StepRecord]) -> Dict[str, np.ndarray]:
    return {
        "t": np.array([r.t for r in history], dtype=np.int64),
        "y": np.array([r.y for r in history]),
        "mean": np.array([r.mean for r in history]),
        "variance": np.array([r.variance for r in history]),
        "loss": np.array([r.loss for r in history]),
        "weights": np.array([r.weights for r in history], dtype=float).reshape(len(history), -1) if history else np.empty((0, 0)),
    }


def _history_from_arrays(arrays: Dict[str, np.ndarray]) -> List[StepRecord]:
    return [
        StepRecord(t=int(t), y=float(y), mean=float(m), variance=float(v), loss=float(l), weights=w.tolist())
        for t, y, m, v, l, w in zip(
            arrays["t"], arrays["y"], arrays["mean"], arrays["variance"], arrays["loss"], arrays["weights"]
        )
    ]


def _supervised_frame(task: str, history: List[StepRecord], size: int) -> Tuple[pd.DataFrame, Dict[str, float]]:
    arrays = _history_arrays(history)
    frame = pd.DataFrame({k: arrays[k] for k in ("t", "y", "mean", "variance", "loss")})
    metrics: Dict[str, float] = {}
    if history:
        frame["cum_loss"] = np.cumsum(arrays["loss"])
        metrics["cum_loss"] = float(frame["cum_loss"].iloc[-1])
    if task == "classify" and history:
        frame["error"] = cumulative_error(arrays["y"], arrays["mean"])
        metrics["error"] = float(frame["error"].iloc[-1])
        metrics["mean_loss"] = float(np.mean(arrays["loss"]))
    elif history:
        frame["pnll"] = running_pnll(pnll(arrays["y"], arrays["mean"], arrays["variance"]))
        metrics["pnll"] = float(frame["pnll"].iloc[-1])
        metrics["coverage_95"] = coverage_95(arrays["mean"], arrays["variance"], arrays["y"])
        if len(history) > 1 and np.var(arrays["y"]) > 0:
            frame["nmse"] = nmse(arrays["y"], arrays["mean"])
            metrics["nmse"] = float(frame["nmse"].iloc[-1])
    for m in range(size):
        frame[f"w{m}"] = arrays["weights"][:, m] if history else []
    return frame, metrics


def _target_of(record: StreamRecord, likelihood: str) -> float:
    """Target of one row; ±1 for logistic streams."""
    if record.target is None or not math.isfinite(record.target):
        raise StreamParseError(record.index, "missing target")
    if likelihood != "logistic":
        return float(record.target)
    try:
        return float(to_signed_labels([record.target])[0])
    except ValueError as exc:
        raise StreamParseError(record.index, f"{exc}, got {record.target:g}") from exc


def prepare_ensemble(
    config: ExperimentConfig,
    window: List[StreamRecord],
    likelihood: str,
) -> Tuple[EnsembleState, List[KernelSpec], List[HyperFitResult], Standardizer]:
    """Initialization phase: standardizer, per-expert hyperparameter fits and a fresh ensemble."""
    X0 = np.array([r.x for r in window])
    y0 = np.array([_target_of(r, likelihood) for r in window])
    standardizer = Standardizer.fit(X0) if config.standardize else Standardizer.identity(X0.shape[1])
    X0 = standardizer.transform(X0)

    specs = resolve_dictionary(config, X0.shape[1])
    reports: List[HyperFitResult] = []
    if config.fit_hyperparameters:
        maps = [sample_feature_map(spec, config.n_rf, config.seed + m) for m, spec in enumerate(specs)]
        specs, reports = fit_dictionary(X0, y0, specs, maps, likelihood=likelihood)
    ensemble = build_ensemble(
        specs,
        config.n_rf,
        config.seed,
        likelihood=likelihood,
        mode=config.mode,
        q0=config.q0,
        drift=config.drift,
        shutdown_threshold=config.shutdown_threshold,
        workers=config.workers,
    )
    return ensemble, specs, reports, standardizer


def run_supervised(config: ExperimentConfig) -> RunResult:
    """regress / classify: fit on the first t0 rows, then predict-then-correct every later row."""
    likelihood = "logistic" if config.task == "classify" else "gaussian"
    source = open_source(config)
    window = _take_window(source.records, config.t0)
    ensemble, specs, reports, standardizer = prepare_ensemble(config, window, likelihood)
    logger.info("Initialized %d experts on %d rows (%s mode)", ensemble.size, config.t0, config.mode)

    history: List[StepRecord] = []
    if config.resume_from is not None:
        checkpoint = checkpoint_load(
            config.resume_from, expected_size=len(specs), expected_fingerprint=dictionary_fingerprint(specs)
        )
        if checkpoint.meta.get("task") != config.task or not isinstance(checkpoint.state, EnsembleState):
            raise ConfigError(f"checkpoint {config.resume_from} was not written by a {config.task} run")
        ensemble = checkpoint.state
        standardizer = Standardizer.from_arrays(checkpoint.extras)
        history = _history_from_arrays(checkpoint.extras) if checkpoint.position else []
        source.records = itertools.islice(source.records, checkpoint.position, None)
        logger.info("Resuming at streamed step %d", checkpoint.position)

    def save(position: int) -> None:
        extras = {**standardizer.to_arrays(), **_history_arrays(history)}
        checkpoint_save(config.outputs.checkpoint, ensemble, position=position, extras=extras, meta={"task": config.task})

    completed = True
    try:
        for record in source.records:
            history.append(step(ensemble, standardizer.transform(record.x), _target_of(record, likelihood)))
            done = len(history)
            logger.debug("t=%d loss=%.6f", done, history[-1].loss)
            if config.outputs.checkpoint is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
                save(done)
            if config.stop_after is not None and done >= config.stop_after:
                completed = False
                break
    finally:
        ensemble.close()
    if not completed and config.outputs.checkpoint is not None:
        save(len(history))
    logger.info("Streamed %d rows; cumulative loss %.4f", len(history), ensemble.cum_loss)

    frame, metrics = _supervised_frame(config.task, history, ensemble.size)
    summary = RunSummary(
        task=config.task,
        mode=config.mode,
        n_steps=len(history),
        metrics=metrics,
        weights=ensemble.weights.tolist(),
        kernels=[spec.label for spec in specs],
        hyperparameters=reports,
    )
    result = RunResult(summary=summary, frame=frame, completed=completed)
    series_name = "error" if config.task == "classify" else "nmse"
    chart = {series_name: frame[series_name].tolist()} if series_name in frame else {}
    _write_outputs(config, result, chart, f"{config.task} ({config.mode})")
    return result


# ---------------- Latent-variable streams ----------------
def pca_baseline(Y, d: int) -> np.ndarray:
    """Linear PCA embedding of all observations, fitted in one batch."""
    return PCA(n_components=d, svd_solver="full").fit_transform(np.atleast_2d(np.asarray(Y, dtype=float)))


def run_reduce(config: ExperimentConfig) -> RunResult:
    """Online dimensionality reduction with the latent-variable ensemble."""
    source = open_source(config)
    window = _take_window(source.records, config.t0)
    Y0 = np.array([r.x for r in window])
    window_labels = [r.target for r in window]
    standardizer = Standardizer.fit(Y0) if config.standardize else Standardizer.identity(Y0.shape[1])
    specs = resolve_dictionary(config, config.latent_dim)
    model = LvmModel.initialize(
        standardizer.transform(Y0), specs, config.n_rf, config.latent_dim, config.seed,
        fit_hyperparameters=config.fit_hyperparameters, workers=config.workers,
    )
    specs = [state.spec for state in model.states]

    rows: List[dict] = []
    stream_labels: List[Optional[float]] = []
    if config.resume_from is not None:
        checkpoint = checkpoint_load(config.resume_from, expected_size=len(specs))
        if checkpoint.meta.get("task") != "reduce" or not isinstance(checkpoint.state, LvmModel):
            raise ConfigError(f"checkpoint {config.resume_from} was not written by a reduce run")
        model = checkpoint.state
        standardizer = Standardizer.from_arrays(checkpoint.extras)
        if checkpoint.position:
            rows = pd.DataFrame({k[4:]: v for k, v in checkpoint.extras.items() if k.startswith("row/")}).to_dict("records")
            stream_labels = checkpoint.extras["labels"].tolist()
        source.records = itertools.islice(source.records, checkpoint.position, None)

    def save(position: int) -> None:
        frame = pd.DataFrame(rows)
        extras = {**standardizer.to_arrays(), "labels": np.array(stream_labels, dtype=float)}
        extras.update({f"row/{c}": frame[c].to_numpy() for c in frame.columns})
        checkpoint_save(config.outputs.checkpoint, model, position=position, extras=extras, meta={"task": "reduce"})

    max_error = float(np.max(model.reconstruction_errors()))
    completed = True
    try:
        for record in source.records:
            result = model.step(standardizer.transform(record.x))
            stream_labels.append(record.target)
            row = {"t": result.t, "m_star": result.m_star}
            row.update({f"z{j}": float(v) for j, v in enumerate(result.x_hat)})
            row.update({f"loglik{m}": float(v) for m, v in enumerate(result.log_likelihoods)})
            row["fallback"] = int(result.fallback.any())
            rows.append(row)
            if len(rows) % RECONSTRUCTION_CHECK_EVERY == 0:
                errors = model.reconstruction_errors()
                max_error = max(max_error, float(np.max(errors)))
                logger.debug("Step %d relative factor error %.3e", result.t, float(np.max(errors)))
            if config.outputs.checkpoint is not None and config.checkpoint_every and len(rows) % config.checkpoint_every == 0:
                save(len(rows))
            if config.stop_after is not None and len(rows) >= config.stop_after:
                completed = False
                break
    finally:
        model.close()
    if not completed and config.outputs.checkpoint is not None:
        save(len(rows))

    embeddings = model.embeddings()
    frame = pd.DataFrame(rows)
    metrics: Dict[str, float] = {"max_factor_error": max_error}
    for m, spec in enumerate(specs):
        metrics[f"magnitude{m}"], metrics[f"noise{m}"] = spec.magnitude, spec.noise
    labels = source.labels
    if labels is None and all(v is not None for v in window_labels + stream_labels):
        labels = np.array(window_labels + stream_labels)
    if labels is not None and completed:
        labels = np.asarray(labels)[: embeddings.shape[0]]
        metrics["knn_error"] = lvm_knn_error(embeddings, labels)
        Y_all = model.ann.points + model.offset
        metrics["pca_knn_error"] = lvm_knn_error(pca_baseline(Y_all, config.latent_dim), labels)
        logger.info("1-NN error: embeddings %.4f, linear PCA %.4f", metrics["knn_error"], metrics["pca_knn_error"])

    summary = RunSummary(
        task="reduce",
        mode=config.mode,
        n_steps=len(rows),
        metrics=metrics,
        weights=model.weights.tolist(),
        kernels=[spec.label for spec in specs],
    )
    result = RunResult(summary=summary, frame=frame, completed=completed)
    if config.outputs.embeddings_csv is not None:
        selections = [None] * config.t0 + list(model.selections)
        result.artifacts["embeddings_csv"] = write_embeddings_csv(
            embeddings, config.outputs.embeddings_csv, labels=labels, selections=selections
        )
    chart = {f"expert {m}": frame[f"loglik{m}"].cumsum().tolist() for m in range(len(specs))} if rows else {}
    _write_outputs(config, result, chart, "cumulative log-likelihood per expert")
    return result


# ---------------- Regret sweeps ----------------
def _stream_losses(
    stream: SyntheticStream, specs: Sequence[KernelSpec], config: ExperimentConfig, mode: str
) -> Tuple[EnsembleState, np.ndarray]:
    ensemble = build_ensemble(
        specs, config.n_rf, config.seed, mode=mode, q0=config.q0,
        drift=config.drift, shutdown_threshold=config.shutdown_threshold, workers=config.workers,
    )
    try:
        losses = np.array([step(ensemble, x, y).loss for x, y in stream])
    finally:
        ensemble.close()
    return ensemble, losses


def _benchmark(stream: SyntheticStream, ensemble: EnsembleState) -> BenchmarkSolver:
    return BenchmarkSolver(
        [e.spec for e in ensemble.experts], [e.feature_map for e in ensemble.experts], stream.X, stream.y
    )


def static_regret_sweep(config: ExperimentConfig) -> pd.DataFrame:
    """Median static regret over `sweep_seeds` streams for every horizon T."""
    base = config.stream or default_stream("regret")
    specs = resolve_dictionary(config, base.input_dim)
    rows = []
    for T in config.horizons:
        regrets = []
        for s in range(config.sweep_seeds):
            stream = gen_stream(base.model_copy(update={"T": T, "seed": base.seed + s}))
            ensemble, _ = _stream_losses(stream, specs, config, config.mode)
            regrets.append(ensemble.cum_loss - _benchmark(stream, ensemble).comparator())
        median = float(np.median(regrets))
        logger.info("T=%d median static regret %.4f", T, median)
        rows.append({"T": T, "regret": median, "regret_over_log_T": median / math.log(T), "regret_over_T": median / T})
    return pd.DataFrame(rows)


def head_to_head(
    stream: SyntheticStream,
    specs: Sequence[KernelSpec],
    config: ExperimentConfig,
    switching_mode: str = "switching",
) -> Dict[str, Tuple[EnsembleState, np.ndarray]]:
    """Switching and static ensembles run on the same stream: final state and per-step losses."""
    return {mode: _stream_losses(stream, specs, config, mode) for mode in (switching_mode, "static")}


def nested_switching_stream(master: SyntheticStream, T: int) -> SyntheticStream:
    """Length-T switching stream built from prefixes of both regimes of `master`.

    The first T//2 rows of each regime are kept, so shorter horizons see the
    same draws as longer ones.
    """
    half, boundary = T // 2, master.boundary
    if half > boundary or T - half > len(master) - boundary:
        raise ValueError(f"horizon {T} exceeds the master stream of length {len(master)}")
    rows = np.r_[0:half, boundary:boundary + T - half]
    return SyntheticStream(X=master.X[rows], y=master.y[rows], boundary=half)


def switching_regret_sweep(config: ExperimentConfig) -> pd.DataFrame:
    """Median average switching regret of the switching ensemble, with the static head-to-head.

    Every seed draws one stream at the longest horizon; each horizon runs on
    the nested prefixes of its two regimes.
    """
    base = config.stream or default_stream("switchregret")
    specs = resolve_dictionary(config, base.input_dim)
    mode = config.mode if config.switching else "switching"
    horizons = sorted(config.horizons if "horizons" in config.model_fields_set else SWITCHING_HORIZONS)
    masters = [
        gen_stream(base.model_copy(update={"T": horizons[-1], "seed": base.seed + s, "switch_at": None}))
        for s in range(config.sweep_seeds)
    ]
    rows = []
    for T in horizons:
        averages, switching_losses, static_losses = [], [], []
        for master in masters:
            stream = nested_switching_stream(master, T)
            runs = head_to_head(stream, specs, config, mode)
            ensemble, losses = runs[mode]
            averages.append(float(regret_switching(losses, _benchmark(stream, ensemble), [stream.boundary])[-1]))
            switching_losses.append(ensemble.cum_loss)
            static_losses.append(runs["static"][0].cum_loss)
        logger.info("T=%d median average switching regret %.4f", T, float(np.median(averages)))
        rows.append({
            "T": T,
            "avg_switching_regret": float(np.median(averages)),
            "switching_cum_loss": float(np.median(switching_losses)),
            "static_cum_loss": float(np.median(static_losses)),
        })
    return pd.DataFrame(rows)


def run_sweep(config: ExperimentConfig) -> RunResult:
    if config.task == "regret":
        frame = static_regret_sweep(config)
        chart = {"R(T)/log T": frame["regret_over_log_T"].tolist(), "R(T)/T": frame["regret_over_T"].tolist()}
        title = "static regret"
    else:
        frame = switching_regret_sweep(config)
        chart = {"R_sw(T)/T": frame["avg_switching_regret"].tolist()}
        title = "average switching regret"
    summary = RunSummary(
        task=config.task,
        mode=config.mode,
        n_steps=int(frame["T"].max()),
        metrics={col: float(frame[col].iloc[-1]) for col in frame.columns if col != "T"},
        kernels=[spec.label for spec in resolve_dictionary(config, (config.stream or default_stream(config.task)).input_dim)],
        sweep={col: frame[col].astype(float).tolist() for col in frame.columns},
    )
    result = RunResult(summary=summary, frame=frame)
    _write_outputs(config, result, chart, title, x=frame["T"].tolist(), xlabel="T", log_x=True)
    return result


def run(config: ExperimentConfig) -> RunResult:
    """Dispatch one experiment and write its artifacts."""
    logger.info("Running %s (mode=%s, seed=%d)", config.task, config.mode, config.seed)
    if config.task in ("regress", "classify"):
        return run_supervised(config)
    if config.task == "reduce":
        return run_reduce(config)
    return run_sweep(config)
