"""Tests for the versioned binary checkpoint format."""

import os
import struct

import numpy as np
import pytest

import adapters.checkpoint as checkpoint_module
from adapters.checkpoint import (
    CHECKPOINT_VERSION,
    Checkpoint,
    CheckpointError,
    checkpoint_load,
    checkpoint_save,
    decode_checkpoint,
    dictionary_fingerprint,
    encode_checkpoint,
)
from adapters.streams import gen_stream
from core.ensemble import build_ensemble, step
from core.lvm import LvmModel
from core.models import KernelSpec, StreamSpec


@pytest.fixture
def trained(rbf_dictionary, sin_mix_spec):
    stream = gen_stream(sin_mix_spec)
    state = build_ensemble(rbf_dictionary, n_rf=20, seed=2, mode="switching_dynamic", drift=1e-4)
    for x, y in list(stream)[:120]:
        step(state, x, y)
    return state, stream


def test_ensemble_round_trip_is_bitwise(tmp_path, trained):
    state, _ = trained
    path = checkpoint_save(tmp_path / "run.ckpt", state, position=120, extras={"note": np.arange(3)}, meta={"task": "regress"})
    loaded = checkpoint_load(path, expected_size=state.size)
    restored = loaded.state
    assert loaded.position == 120
    assert loaded.meta == {"task": "regress"}
    assert np.array_equal(loaded.extras["note"], np.arange(3))
    assert np.array_equal(restored.log_weights, state.log_weights)
    assert restored.t == state.t and restored.cum_loss == state.cum_loss
    for a, b in zip(restored.experts, state.experts):
        assert np.array_equal(a.mean, b.mean)
        assert np.array_equal(a.cov, b.cov)
        assert np.array_equal(a.feature_map.frequencies, b.feature_map.frequencies)
        assert a.spec == b.spec and a.drift == b.drift


def test_resumed_ensemble_continues_identically(tmp_path, trained):
    state, stream = trained
    restored = checkpoint_load(checkpoint_save(tmp_path / "run.ckpt", state)).state
    tail = list(stream)[120:160]
    assert [step(state, x, y).loss for x, y in tail] == [step(restored, x, y).loss for x, y in tail]


def test_lvm_round_trip(tmp_path):
    stream = gen_stream(StreamSpec(kind="latent_clusters", T=60, output_dim=5, seed=1))
    specs = [KernelSpec(lengthscale=ls, noise=0.1, input_dim=2) for ls in (1.0, 2.0)]
    model = LvmModel.initialize(stream.X[:30], specs, n_rf=15, d=2, seed=0, exact_ann=True, max_iter=10)
    for y in stream.X[30:45]:
        model.step(y)
    restored = checkpoint_load(checkpoint_save(tmp_path / "lvm.ckpt", model)).state

    assert np.array_equal(restored.ann.points, model.ann.points)
    assert restored.selections == model.selections
    for a, b in zip(restored.states, model.states):
        assert np.array_equal(a.R, b.R) and np.array_equal(a.B, b.B)
        assert np.array_equal(np.vstack(a.embeddings), np.vstack(b.embeddings))
    for y in stream.X[45:]:
        assert np.array_equal(model.step(y).x_hat, restored.step(y).x_hat)


def test_truncated_blob(trained):
    blob = encode_checkpoint(Checkpoint(state=trained[0]))
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob[:10])


def test_wrong_magic_and_version(trained):
    blob = encode_checkpoint(Checkpoint(state=trained[0]))
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"NOTACKPT" + blob[8:])
    bumped = blob[:8] + struct.pack("<I", CHECKPOINT_VERSION + 1) + blob[12:]
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(bumped)


def test_dictionary_mismatch_is_refused(trained, rbf_dictionary):
    blob = encode_checkpoint(Checkpoint(state=trained[0]))
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob, expected_size=3)
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob, expected_fingerprint=dictionary_fingerprint(rbf_dictionary[:2]))
    assert decode_checkpoint(blob, expected_fingerprint=dictionary_fingerprint(rbf_dictionary)).state.size == 5


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoint_load(tmp_path / "absent.ckpt")


def test_replace_is_retried(tmp_path, trained, monkeypatch):
    real_replace = os.replace
    calls = []

    def flaky(source, target):
        calls.append(target)
        if len(calls) < 2:
            raise PermissionError("file is locked")
        real_replace(source, target)

    monkeypatch.setattr(checkpoint_module.os, "replace", flaky)
    path = checkpoint_save(tmp_path / "run.ckpt", trained[0])
    assert len(calls) == 2
    assert path.exists()
    assert not [p for p in tmp_path.iterdir() if p.suffix == ".tmp"]
