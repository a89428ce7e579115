import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from fastmcp import FastMCP

from cli import DOMAIN_ERRORS
from core.config import ExperimentConfig, default_dictionary, load_experiment_config, settings
from core.harness import run


# ---------------- Logging ----------------
logging.basicConfig(
    level=settings.log_level.upper(),
    format="%(asctime)s %(levelname)s [%(name)s] %(message)s",
)
logger = logging.getLogger("EnsembleGP")


# ---------------- MCP Server ----------------
# stdio transport only; no network listener
mcp = FastMCP(settings.app_name)

_last_run: Dict[str, Any] = {"task": None, "metrics": {}}


def _execute(config: ExperimentConfig) -> Dict[str, Any]:
    try:
        result = run(config)
    except DOMAIN_ERRORS as exc:
        logger.warning("Run failed: %s", exc)
        return {"error": str(exc)}
    _last_run.update(task=config.task, metrics=result.summary.metrics)
    payload = result.summary.model_dump(mode="json")
    payload["artifacts"] = {name: str(path) for name, path in result.artifacts.items()}
    return payload


def _load(task: str, config_path: Optional[str], **overrides) -> ExperimentConfig:
    return load_experiment_config(Path(config_path) if config_path else None, task=task, **overrides)


# ---------------- Tools ----------------
@mcp.tool()
def run_experiment(
    task: Literal["regress", "classify", "reduce"],
    config_path: Optional[str] = None,
    mode: Optional[Literal["static", "switching", "dynamic", "switching_dynamic"]] = None,
    seed: Optional[int] = None,
    n_rf: Optional[int] = None,
    t0: Optional[int] = None,
) -> Dict[str, Any]:
    """Run one streaming experiment and return its summary.

    Without a config file the task's synthetic stream is used.
    """
    try:
        config = _load(task, config_path, mode=mode, seed=seed, n_rf=n_rf, t0=t0)
    except DOMAIN_ERRORS as exc:
        return {"error": str(exc)}
    return _execute(config)


@mcp.tool()
def regret_sweep(
    kind: Literal["static", "switching"] = "static",
    horizons: Optional[List[int]] = None,
    seeds: Optional[int] = None,
    config_path: Optional[str] = None,
) -> Dict[str, Any]:
    """Median regret over seeds for each horizon T."""
    task = "regret" if kind == "static" else "switchregret"
    try:
        config = _load(task, config_path, horizons=horizons, sweep_seeds=seeds)
    except DOMAIN_ERRORS as exc:
        return {"error": str(exc)}
    return _execute(config)


# ---------------- Resources ----------------
@mcp.resource("ensemblegp://dictionary")
def dictionary_resource() -> Dict[str, Any]:
    return {"kernels": [spec.model_dump(mode="json") for spec in default_dictionary()]}


@mcp.resource("ensemblegp://status", mime_type="application/json")
def status_resource() -> Dict[str, Any]:
    return {"name": settings.app_name, "status": "ok", "last_run": _last_run}


# ---------------- Prompts ----------------
@mcp.prompt
def interpret_regret(kind: str = "static") -> str:
    return f"Run a {kind} regret sweep and say whether the regret grows logarithmically in T."


# ---------------- Entrypoint ----------------
if __name__ == "__main__":
    logger.info("Starting %s over stdio", settings.app_name)
    mcp.run()
