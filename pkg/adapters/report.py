from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from core.models import RunSummary  # noqa: E402


logger = logging.getLogger("EnsembleGP")

FLOAT_FORMAT = "%.10g"

# fixed element ids so repeated runs write identical SVG bytes
matplotlib.rcParams["svg.hashsalt"] = "EnsembleGP"


def _prepare(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_metrics_csv(frame: pd.DataFrame, path) -> Path:
    """Header row plus one record per step, with a fixed float format."""
    path = _prepare(path)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info("Metrics CSV written to %s (%d rows)", path, len(frame))
    return path


def write_embeddings_csv(embeddings: np.ndarray, path, labels: Optional[Sequence] = None, selections: Optional[Sequence[int]] = None) -> Path:
    path = _prepare(path)
    frame = pd.DataFrame(embeddings, columns=[f"z{j}" for j in range(embeddings.shape[1])])
    if selections is not None:
        frame["expert"] = pd.array(list(selections), dtype="Int64")
    if labels is not None:
        frame["label"] = list(labels)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info("Embeddings CSV written to %s", path)
    return path


def write_summary_json(summary: RunSummary, path) -> Path:
    path = _prepare(path)
    path.write_text(summary.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info("Summary JSON written to %s", path)
    return path


def write_svg(series: Dict[str, Sequence[float]], path, *, title: str = "", x: Optional[Sequence[float]] = None, xlabel: str = "t", log_x: bool = False) -> Path:
    """Simple line chart of one or more series."""
    path = _prepare(path)
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, values in series.items():
        values = np.asarray(values, dtype=float)
        xs = np.arange(1, values.shape[0] + 1) if x is None else np.asarray(x, dtype=float)
        ax.plot(xs, values, label=name, linewidth=1.2)
    if log_x:
        ax.set_xscale("log")
    ax.set_xlabel(xlabel)
    ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info("SVG chart written to %s", path)
    return path
