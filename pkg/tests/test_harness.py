"""End-to-end runs of the experiment harness."""

import json

import numpy as np
import pandas as pd
import pytest

from adapters.checkpoint import CheckpointError
from adapters.csv_stream import StreamParseError
from adapters.streams import gen_stream
from core.config import ConfigError, ExperimentConfig, OutputPaths
from core.harness import (
    Standardizer,
    nested_switching_stream,
    run,
    static_regret_sweep,
    switching_regret_sweep,
)
from core.lvm import InitializationError
from core.models import KernelSpec, StreamSchema, StreamSpec


def _outputs(directory, **extra):
    return OutputPaths(
        metrics_csv=directory / "metrics.csv",
        summary_json=directory / "summary.json",
        svg=directory / "chart.svg",
        **extra,
    )


def _regress(directory, **overrides):
    values = dict(
        task="regress",
        stream=StreamSpec(kind="sin_mix", T=300, noise=0.01, seed=5),
        t0=50,
        n_rf=20,
        dictionary=[KernelSpec(lengthscale=0.3), KernelSpec(lengthscale=1.0)],
        outputs=_outputs(directory),
    )
    values.update(overrides)
    return ExperimentConfig(**values)


def _write_classification_csv(path, T=1000, binary=True):
    stream = gen_stream(StreamSpec(kind="two_gaussians", T=T, input_dim=2, seed=3))
    labels = (stream.y > 0).astype(int) if binary else stream.y.astype(int)
    frame = pd.DataFrame({"x0": stream.X[:, 0], "x1": stream.X[:, 1], "label": labels})
    frame.to_csv(path, index=False)
    return path


def test_regression_run(tmp_path):
    result = run(_regress(tmp_path))
    assert result.completed and result.exit_status == 0
    assert result.summary.n_steps == 250
    assert list(result.frame.columns) == ["t", "y", "mean", "variance", "loss", "cum_loss", "pnll", "nmse", "w0", "w1"]
    assert result.frame["t"].tolist() == list(range(1, 251))
    assert np.allclose(result.frame[["w0", "w1"]].sum(axis=1), 1.0)
    assert len(result.summary.hyperparameters) == 2
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["metrics"]["cum_loss"] == pytest.approx(result.frame["cum_loss"].iloc[-1])
    assert set(result.artifacts) == {"metrics_csv", "summary_json", "svg"}


def test_runs_are_byte_identical(tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    run(_regress(first))
    run(_regress(second))
    for name in ("metrics.csv", "summary.json", "chart.svg"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_metrics_csv_format(tmp_path):
    run(_regress(tmp_path))
    text = (tmp_path / "metrics.csv").read_bytes()
    assert b"\r\n" not in text
    assert text.splitlines()[0] == b"t,y,mean,variance,loss,cum_loss,pnll,nmse,w0,w1"


def test_resume_matches_uninterrupted_run(tmp_path):
    full = run(_regress(tmp_path / "full"))

    checkpoint = tmp_path / "run.ckpt"
    partial = run(_regress(tmp_path / "part", stop_after=100, outputs=OutputPaths(checkpoint=checkpoint)))
    assert not partial.completed
    assert partial.summary.n_steps == 100
    assert checkpoint.exists()

    resumed = run(_regress(tmp_path / "resumed", resume_from=checkpoint))
    pd.testing.assert_frame_equal(resumed.frame, full.frame)
    assert (tmp_path / "resumed" / "metrics.csv").read_bytes() == (tmp_path / "full" / "metrics.csv").read_bytes()


def test_periodic_checkpoints(tmp_path):
    checkpoint = tmp_path / "run.ckpt"
    run(_regress(tmp_path, checkpoint_every=60, outputs=OutputPaths(checkpoint=checkpoint)))
    assert checkpoint.exists()


def test_resume_refuses_other_dictionary(tmp_path):
    checkpoint = tmp_path / "run.ckpt"
    run(_regress(tmp_path, stop_after=20, outputs=OutputPaths(checkpoint=checkpoint)))
    with pytest.raises(CheckpointError):
        run(_regress(tmp_path, dictionary=[KernelSpec(lengthscale=2.0)], resume_from=checkpoint, outputs=OutputPaths()))


def test_resume_refuses_other_task(tmp_path):
    checkpoint = tmp_path / "run.ckpt"
    run(_regress(tmp_path, stop_after=20, fit_hyperparameters=False, outputs=OutputPaths(checkpoint=checkpoint)))
    with pytest.raises(ConfigError):
        run(_regress(
            tmp_path, task="classify", stream=StreamSpec(kind="two_gaussians", T=300, seed=1),
            fit_hyperparameters=False, resume_from=checkpoint, outputs=OutputPaths(),
        ))


def test_switching_mode_run(tmp_path):
    result = run(_regress(tmp_path, mode="switching_dynamic", drift=1e-4, q0=0.9, fit_hyperparameters=False))
    assert result.summary.mode == "switching_dynamic"
    assert all(w > 0 for w in result.summary.weights)


def test_classification_from_csv(tmp_path):
    """0/1 labels are mapped to ±1; error stays below 10% on two well-separated Gaussians."""
    path = _write_classification_csv(tmp_path / "two.csv")
    config = ExperimentConfig(
        task="classify",
        input=path,
        columns=StreamSchema(n_features=2, n_targets=1),
        t0=100,
        n_rf=15,
        outputs=_outputs(tmp_path),
    )
    result = run(config)
    assert set(result.frame["y"].unique()) == {-1.0, 1.0}
    assert "error" in result.frame.columns
    assert result.summary.metrics["error"] < 0.10


def test_standardized_inputs(tmp_path):
    result = run(_regress(tmp_path, standardize=True))
    assert result.summary.n_steps == 250
    s = Standardizer.fit(np.array([[1.0, 5.0], [3.0, 5.0]]))
    assert np.allclose(s.transform([2.0, 5.0]), [0.0, 0.0])
    assert np.array_equal(s.scale, [1.0, 1.0])


def test_short_input_fails_initialization(tmp_path):
    path = _write_classification_csv(tmp_path / "short.csv", T=10)
    config = ExperimentConfig(task="classify", input=path, columns=StreamSchema(n_features=2), t0=50)
    with pytest.raises(InitializationError):
        run(config)


def test_malformed_row_is_reported(tmp_path):
    path = tmp_path / "bad.csv"
    rows = "\n".join(f"{i * 0.1},{np.sin(i * 0.1)}" for i in range(60))
    path.write_text("x,y\n" + rows + "\n1.0,oops\n", encoding="utf-8")
    config = ExperimentConfig(
        task="regress", input=path, columns=StreamSchema(n_features=1), t0=20, n_rf=10,
        dictionary=[KernelSpec(lengthscale=1.0)],
    )
    with pytest.raises(StreamParseError) as info:
        run(config)
    assert info.value.row == 61


@pytest.mark.parametrize("row", [7, 150])
def test_invalid_label_is_reported_with_its_row(tmp_path, row):
    path = _write_classification_csv(tmp_path / "labels.csv", T=300)
    frame = pd.read_csv(path)
    frame.loc[row - 1, "label"] = 2
    frame.to_csv(path, index=False)
    config = ExperimentConfig(
        task="classify", input=path, columns=StreamSchema(n_features=2, n_targets=1), t0=50, n_rf=10,
        fit_hyperparameters=False, outputs=OutputPaths(),
    )
    with pytest.raises(StreamParseError) as info:
        run(config)
    assert info.value.row == row
    assert "got 2" in str(info.value)


def test_input_without_schema(tmp_path):
    path = _write_classification_csv(tmp_path / "two.csv", T=20)
    with pytest.raises(ConfigError):
        run(ExperimentConfig(task="classify", input=path, t0=5))


def test_reduce_run(tmp_path):
    config = ExperimentConfig(
        task="reduce",
        stream=StreamSpec(kind="latent_clusters", T=120, output_dim=6, noise=0.01, seed=2),
        t0=40,
        n_rf=20,
        latent_dim=2,
        outputs=_outputs(tmp_path, embeddings_csv=tmp_path / "embeddings.csv"),
    )
    result = run(config)
    assert len(result.frame) == 80
    assert result.summary.metrics["max_factor_error"] <= 1e-8
    assert "knn_error" in result.summary.metrics
    embeddings = pd.read_csv(tmp_path / "embeddings.csv")
    assert len(embeddings) == 120
    assert list(embeddings.columns) == ["z0", "z1", "expert", "label"]


def test_nested_switching_streams_share_draws():
    master = gen_stream(StreamSpec(kind="switching_gp_draw", T=40, noise=1.0, seed=1))
    short, longer = nested_switching_stream(master, 10), nested_switching_stream(master, 20)
    assert short.boundary == 5 and longer.boundary == 10
    assert np.array_equal(longer.X[:10], master.X[:10])
    assert np.array_equal(longer.y[10:], master.y[20:30])
    assert np.array_equal(short.y[:5], longer.y[:5])
    assert np.array_equal(short.y[5:], longer.y[10:15])
    with pytest.raises(ValueError):
        nested_switching_stream(master, 60)


def test_small_switching_sweep():
    config = ExperimentConfig(
        task="switchregret",
        stream=StreamSpec(kind="switching_gp_draw", T=200, noise=1.0, seed=3),
        horizons=[80, 40],
        sweep_seeds=2,
        n_rf=10,
        t0=10,
        dictionary=[KernelSpec(lengthscale=0.01, noise=1.0), KernelSpec(lengthscale=100.0, noise=1.0)],
    )
    frame = switching_regret_sweep(config)
    assert frame["T"].tolist() == [40, 80]
    assert list(frame.columns) == ["T", "avg_switching_regret", "switching_cum_loss", "static_cum_loss"]
    assert np.all(np.isfinite(frame.to_numpy()))


@pytest.mark.slow
def test_reduction_beats_linear_baseline(tmp_path):
    result = run(ExperimentConfig(task="reduce", outputs=OutputPaths()))
    metrics = result.summary.metrics
    assert metrics["max_factor_error"] <= 1e-8
    assert metrics["knn_error"] <= 0.15
    assert metrics["knn_error"] <= metrics["pca_knn_error"]


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_predictive_intervals_are_calibrated(seed):
    stream = StreamSpec(kind="gp_draw", T=2000, noise=0.01, kernel=KernelSpec(lengthscale=1.0), seed=seed)
    result = run(ExperimentConfig(task="regress", stream=stream, outputs=OutputPaths()))
    assert 0.90 <= result.summary.metrics["coverage_95"] <= 0.99


@pytest.mark.slow
def test_static_regret_grows_logarithmically():
    frame = static_regret_sweep(ExperimentConfig(task="regret"))
    ratio = frame["regret_over_log_T"].to_numpy()
    assert np.max(ratio) <= 2.0 * np.median(ratio)
    assert np.all(np.diff(frame["regret_over_T"].to_numpy()) < 0)


@pytest.mark.slow
def test_switching_ensemble_tracks_regime_change():
    frame = switching_regret_sweep(ExperimentConfig(task="switchregret", mode="switching"))
    assert frame["T"].tolist() == [400, 800, 1600, 3200]
    assert np.all(np.diff(frame["avg_switching_regret"].to_numpy()) < 0)
    last = frame.iloc[-1]
    assert last["switching_cum_loss"] < last["static_cum_loss"]
