from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Optional

import typer
from typing_extensions import Annotated

from adapters.checkpoint import CheckpointError
from adapters.csv_stream import StreamParseError
from core.config import ConfigError, ExperimentConfig, ModeName, load_experiment_config, settings
from core.ensemble import EnsembleStateError
from core.harness import run
from core.hyperopt import DegenerateDataError, HyperparameterBoundsError
from core.lvm import InitializationError


logger = logging.getLogger("EnsembleGP")

app = typer.Typer(
    name="ensemblegp",
    help="Online ensembles of random-feature Gaussian-process experts.",
    no_args_is_help=True,
    add_completion=False,
)

DOMAIN_ERRORS = (
    ConfigError,
    StreamParseError,
    InitializationError,
    CheckpointError,
    DegenerateDataError,
    HyperparameterBoundsError,
    EnsembleStateError,
)

ConfigOpt = Annotated[Optional[Path], typer.Option("--config", "-c", help="TOML experiment file.")]
InputOpt = Annotated[Optional[Path], typer.Option("--input", "-i", help="Input CSV (needs a [columns] schema in the config).")]
ModeOpt = Annotated[Optional[str], typer.Option(help="static | switching | dynamic | switching_dynamic")]
SeedOpt = Annotated[Optional[int], typer.Option(help="Run seed; expert m samples its feature map with seed + m.")]
NrfOpt = Annotated[Optional[int], typer.Option("--n-rf", help="Random features per expert.")]
T0Opt = Annotated[Optional[int], typer.Option("--t0", help="Initialization window length.")]
Q0Opt = Annotated[Optional[float], typer.Option(help="Probability of staying with the current expert (switching modes).")]
DriftOpt = Annotated[Optional[float], typer.Option(help="Random-walk variance added per step (dynamic modes).")]
StandardizeOpt = Annotated[Optional[bool], typer.Option("--standardize/--no-standardize", help="z-score inputs with t0-window statistics.")]
FitOpt = Annotated[Optional[bool], typer.Option("--fit/--no-fit", help="Fit hyperparameters on the initialization window.")]
WorkersOpt = Annotated[Optional[int], typer.Option(help="Worker threads for per-expert updates.")]
MetricsOpt = Annotated[Optional[Path], typer.Option("--metrics-csv", help="Per-step metrics CSV.")]
SummaryOpt = Annotated[Optional[Path], typer.Option("--summary-json", help="Final summary JSON.")]
SvgOpt = Annotated[Optional[Path], typer.Option("--svg", help="SVG line chart.")]
CheckpointOpt = Annotated[Optional[Path], typer.Option("--checkpoint", help="Checkpoint file to write.")]
EveryOpt = Annotated[Optional[int], typer.Option("--checkpoint-every", help="Write a checkpoint every N streamed rows.")]
ResumeOpt = Annotated[Optional[Path], typer.Option("--resume-from", help="Checkpoint to resume from.")]
StopOpt = Annotated[Optional[int], typer.Option("--stop-after", help="Stop after N streamed rows.")]
HorizonOpt = Annotated[Optional[List[int]], typer.Option("--horizon", help="Sweep horizon T (repeatable).")]
SeedsOpt = Annotated[Optional[int], typer.Option("--seeds", help="Streams per horizon; medians are reported.")]
LogLevelOpt = Annotated[Optional[str], typer.Option("--log-level", help="Logging level.")]


def configure_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(
        level=(level or settings.log_level).upper(),
        format="%(asctime)s %(levelname)s [%(name)s] %(message)s",
    )


def build_config(task: str, config_path: Optional[Path], outputs: dict, **flags) -> ExperimentConfig:
    """File values, then flags; output paths are merged key by key."""
    config = load_experiment_config(config_path, task=task, **flags)
    chosen = {k: v for k, v in outputs.items() if v is not None}
    if chosen:
        config = config.model_copy(update={"outputs": config.outputs.model_copy(update=chosen)})
    return config


def _execute(task: str, config_path: Optional[Path], log_level: Optional[str], outputs: dict, **flags) -> None:
    configure_logging(log_level)
    if flags.get("mode") is not None and flags["mode"] not in ModeName.__args__:
        typer.echo(f"error: unknown mode {flags['mode']!r}", err=True)
        raise typer.Exit(code=2)
    try:
        config = build_config(task, config_path, outputs, **flags)
        result = run(config)
    except DOMAIN_ERRORS as exc:
        logger.error("%s failed: %s", task, exc)
        typer.echo(f"error: {exc}", err=True)
        raise typer.Exit(code=2)
    for name, path in result.artifacts.items():
        typer.echo(f"{name}: {path}")
    for key, value in result.summary.metrics.items():
        typer.echo(f"{key} = {value:.6g}")
    raise typer.Exit(code=result.exit_status)


@app.command()
def regress(
    config: ConfigOpt = None,
    input: InputOpt = None,
    mode: ModeOpt = None,
    seed: SeedOpt = None,
    n_rf: NrfOpt = None,
    t0: T0Opt = None,
    q0: Q0Opt = None,
    drift: DriftOpt = None,
    standardize: StandardizeOpt = None,
    fit: FitOpt = None,
    workers: WorkersOpt = None,
    metrics_csv: MetricsOpt = None,
    summary_json: SummaryOpt = None,
    svg: SvgOpt = None,
    checkpoint: CheckpointOpt = None,
    checkpoint_every: EveryOpt = None,
    resume_from: ResumeOpt = None,
    stop_after: StopOpt = None,
    log_level: LogLevelOpt = None,
) -> None:
    """Online GP regression: fit on the first t0 rows, then predict-then-correct."""
    _execute(
        "regress", config, log_level,
        {"metrics_csv": metrics_csv, "summary_json": summary_json, "svg": svg, "checkpoint": checkpoint},
        input=input, mode=mode, seed=seed, n_rf=n_rf, t0=t0, q0=q0, drift=drift, standardize=standardize,
        fit_hyperparameters=fit, workers=workers, checkpoint_every=checkpoint_every,
        resume_from=resume_from, stop_after=stop_after,
    )


@app.command()
def classify(
    config: ConfigOpt = None,
    input: InputOpt = None,
    mode: ModeOpt = None,
    seed: SeedOpt = None,
    n_rf: NrfOpt = None,
    t0: T0Opt = None,
    q0: Q0Opt = None,
    standardize: StandardizeOpt = None,
    fit: FitOpt = None,
    workers: WorkersOpt = None,
    metrics_csv: MetricsOpt = None,
    summary_json: SummaryOpt = None,
    svg: SvgOpt = None,
    checkpoint: CheckpointOpt = None,
    checkpoint_every: EveryOpt = None,
    resume_from: ResumeOpt = None,
    stop_after: StopOpt = None,
    log_level: LogLevelOpt = None,
) -> None:
    """Online binary classification; 0/1 labels are mapped to ±1."""
    _execute(
        "classify", config, log_level,
        {"metrics_csv": metrics_csv, "summary_json": summary_json, "svg": svg, "checkpoint": checkpoint},
        input=input, mode=mode, seed=seed, n_rf=n_rf, t0=t0, q0=q0, standardize=standardize,
        fit_hyperparameters=fit, workers=workers, checkpoint_every=checkpoint_every,
        resume_from=resume_from, stop_after=stop_after,
    )


@app.command()
def reduce(
    config: ConfigOpt = None,
    input: InputOpt = None,
    seed: SeedOpt = None,
    n_rf: NrfOpt = None,
    t0: T0Opt = None,
    latent_dim: Annotated[Optional[int], typer.Option("--latent-dim", "-d", help="Embedding dimension.")] = None,
    standardize: StandardizeOpt = None,
    fit: FitOpt = None,
    workers: WorkersOpt = None,
    metrics_csv: MetricsOpt = None,
    summary_json: SummaryOpt = None,
    embeddings_csv: Annotated[Optional[Path], typer.Option("--embeddings-csv", help="Embedding matrix CSV.")] = None,
    svg: SvgOpt = None,
    checkpoint: CheckpointOpt = None,
    checkpoint_every: EveryOpt = None,
    resume_from: ResumeOpt = None,
    stop_after: StopOpt = None,
    log_level: LogLevelOpt = None,
) -> None:
    """Online nonlinear dimensionality reduction with the latent-variable ensemble."""
    _execute(
        "reduce", config, log_level,
        {
            "metrics_csv": metrics_csv, "summary_json": summary_json, "embeddings_csv": embeddings_csv,
            "svg": svg, "checkpoint": checkpoint,
        },
        input=input, seed=seed, n_rf=n_rf, t0=t0, latent_dim=latent_dim, standardize=standardize,
        fit_hyperparameters=fit, workers=workers, checkpoint_every=checkpoint_every,
        resume_from=resume_from, stop_after=stop_after,
    )


@app.command()
def regret(
    config: ConfigOpt = None,
    mode: ModeOpt = None,
    seed: SeedOpt = None,
    n_rf: NrfOpt = None,
    horizon: HorizonOpt = None,
    seeds: SeedsOpt = None,
    workers: WorkersOpt = None,
    metrics_csv: MetricsOpt = None,
    summary_json: SummaryOpt = None,
    svg: SvgOpt = None,
    log_level: LogLevelOpt = None,
) -> None:
    """Static regret sweep over horizons T, medians across seeds."""
    _execute(
        "regret", config, log_level,
        {"metrics_csv": metrics_csv, "summary_json": summary_json, "svg": svg},
        mode=mode, seed=seed, n_rf=n_rf, horizons=horizon or None, sweep_seeds=seeds, workers=workers,
    )


@app.command()
def switchregret(
    config: ConfigOpt = None,
    seed: SeedOpt = None,
    n_rf: NrfOpt = None,
    q0: Q0Opt = None,
    horizon: HorizonOpt = None,
    seeds: SeedsOpt = None,
    workers: WorkersOpt = None,
    metrics_csv: MetricsOpt = None,
    summary_json: SummaryOpt = None,
    svg: SvgOpt = None,
    log_level: LogLevelOpt = None,
) -> None:
    """Average switching regret sweep on the two-regime stream, with the static head-to-head."""
    _execute(
        "switchregret", config, log_level,
        {"metrics_csv": metrics_csv, "summary_json": summary_json, "svg": svg},
        seed=seed, n_rf=n_rf, q0=q0, horizons=horizon or None, sweep_seeds=seeds, workers=workers,
    )


if __name__ == "__main__":
    app()
