from __future__ import annotations

import io
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from core.ann import AnnIndex
from core.config import settings
from core.ensemble import EnsembleState
from core.expert import ExpertState
from core.kernels import FeatureMap
from core.lvm import LvmExpertState, LvmModel
from core.models import KernelSpec
from core.utils import make_stable_id


logger = logging.getLogger("EnsembleGP")

MAGIC = b"EGPCKPT\x00"
CHECKPOINT_VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")

State = Union[EnsembleState, LvmModel]


class CheckpointError(RuntimeError):
    """Checkpoint cannot be written, read or applied to the current run."""


@dataclass
class Checkpoint:
    state: State
    position: int = 0
    extras: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)


def dictionary_fingerprint(specs: Sequence[KernelSpec]) -> str:
    return make_stable_id(*(spec.model_dump_json() for spec in specs))


# ---------------- Encoding ----------------
def _pack_symmetric(matrix: np.ndarray) -> np.ndarray:
    return matrix[np.tril_indices(matrix.shape[0])]


def _unpack_symmetric(values: np.ndarray, n: int) -> np.ndarray:
    rows, cols = np.tril_indices(n)
    out = np.zeros((n, n))
    out[rows, cols] = values
    out[cols, rows] = values
    return out


def _map_blob(feature_map: FeatureMap) -> np.ndarray:
    return np.frombuffer(feature_map.to_bytes(), dtype=np.uint8)


def _encode_ensemble(state: EnsembleState):
    header = {
        "kind": "ensemble",
        "mode": state.mode,
        "q0": state.q0,
        "shutdown_threshold": state.shutdown_threshold,
        "t": state.t,
        "cum_loss": state.cum_loss,
        "workers": state.workers,
        "experts": [
            {"spec": e.spec.model_dump(mode="json"), "likelihood": e.likelihood, "drift": e.drift}
            for e in state.experts
        ],
    }
    arrays = {
        "log_weights": state.log_weights,
        "active": state.active,
        "cum_expert_loss": state.cum_expert_loss,
        "update_counts": state.update_counts,
    }
    for m, expert in enumerate(state.experts):
        arrays[f"expert{m}/mean"] = expert.mean
        arrays[f"expert{m}/cov"] = _pack_symmetric(expert.cov)
        arrays[f"expert{m}/map"] = _map_blob(expert.feature_map)
    return header, arrays, [e.spec for e in state.experts]


def _encode_lvm(model: LvmModel):
    header = {
        "kind": "lvm",
        "workers": model.workers,
        "ann": {"exact": model.ann.exact, "max_degree": model.ann.max_degree, "ef": model.ann.ef, "seed": model.ann.seed},
        "experts": [{"spec": s.spec.model_dump(mode="json"), "prior_var": s.prior_var} for s in model.states],
    }
    arrays = {
        "log_weights": model.log_weights,
        "offset": model.offset,
        "observations": model.ann.points,
        "selections": np.asarray(model.selections, dtype=np.int64),
        "selected": np.asarray(model.selected, dtype=float).reshape(len(model.selected), model.states[0].feature_map.input_dim),
    }
    for m, state in enumerate(model.states):
        arrays[f"expert{m}/R"] = state.R
        arrays[f"expert{m}/B"] = state.B
        arrays[f"expert{m}/embeddings"] = np.vstack(state.embeddings)
        arrays[f"expert{m}/map"] = _map_blob(state.feature_map)
    return header, arrays, [s.spec for s in model.states]


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    state = checkpoint.state
    if isinstance(state, EnsembleState):
        header, arrays, specs = _encode_ensemble(state)
    elif isinstance(state, LvmModel):
        header, arrays, specs = _encode_lvm(state)
    else:
        raise CheckpointError(f"cannot checkpoint {type(state).__name__}")
    header.update(
        size=len(specs),
        fingerprint=dictionary_fingerprint(specs),
        position=checkpoint.position,
        meta=checkpoint.meta,
    )
    for key, value in checkpoint.extras.items():
        arrays[f"extra/{key}"] = np.asarray(value)

    payload = io.BytesIO()
    np.savez(payload, **arrays)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return _PREAMBLE.pack(MAGIC, CHECKPOINT_VERSION, len(head)) + head + payload.getvalue()


# ---------------- Decoding ----------------
def _decode_ensemble(header: dict, arrays) -> EnsembleState:
    experts: List[ExpertState] = []
    for m, entry in enumerate(header["experts"]):
        feature_map = FeatureMap.from_bytes(arrays[f"expert{m}/map"].tobytes())
        n = feature_map.n_features
        experts.append(
            ExpertState(
                mean=arrays[f"expert{m}/mean"],
                cov=_unpack_symmetric(arrays[f"expert{m}/cov"], n),
                spec=KernelSpec(**entry["spec"]),
                feature_map=feature_map,
                likelihood=entry["likelihood"],
                drift=entry["drift"],
            )
        )
    return EnsembleState(
        experts=experts,
        log_weights=arrays["log_weights"],
        mode=header["mode"],
        q0=header["q0"],
        shutdown_threshold=header["shutdown_threshold"],
        active=arrays["active"],
        cum_loss=header["cum_loss"],
        cum_expert_loss=arrays["cum_expert_loss"],
        update_counts=arrays["update_counts"],
        t=header["t"],
        workers=header["workers"],
    )


def _decode_lvm(header: dict, arrays) -> LvmModel:
    states = []
    for m, entry in enumerate(header["experts"]):
        states.append(
            LvmExpertState(
                R=arrays[f"expert{m}/R"],
                B=arrays[f"expert{m}/B"],
                feature_map=FeatureMap.from_bytes(arrays[f"expert{m}/map"].tobytes()),
                spec=KernelSpec(**entry["spec"]),
                embeddings=list(arrays[f"expert{m}/embeddings"]),
                prior_var=entry["prior_var"],
            )
        )
    ann_opts = header["ann"]
    ann = AnnIndex(exact=ann_opts["exact"], max_degree=ann_opts["max_degree"], ef=ann_opts["ef"], seed=ann_opts["seed"])
    for point in arrays["observations"]:
        ann.insert(point)
    return LvmModel(
        states=states,
        log_weights=arrays["log_weights"],
        ann=ann,
        offset=arrays["offset"],
        selections=arrays["selections"].tolist(),
        selected=list(arrays["selected"]),
        workers=header["workers"],
    )


def decode_checkpoint(blob: bytes, *, expected_size: Optional[int] = None, expected_fingerprint: Optional[str] = None) -> Checkpoint:
    if len(blob) < _PREAMBLE.size:
        raise CheckpointError("checkpoint is truncated")
    magic, version, head_len = _PREAMBLE.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("not an EnsembleGP checkpoint")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    start = _PREAMBLE.size
    try:
        header = json.loads(blob[start:start + head_len].decode("utf-8"))
        with np.load(io.BytesIO(blob[start + head_len:]), allow_pickle=False) as npz:
            arrays = {key: npz[key] for key in npz.files}
    except Exception as exc:
        raise CheckpointError(f"checkpoint is truncated or corrupt: {exc}") from exc

    if expected_size is not None and header["size"] != expected_size:
        raise CheckpointError(f"checkpoint holds {header['size']} experts, run dictionary has {expected_size}")
    if expected_fingerprint is not None and header["fingerprint"] != expected_fingerprint:
        raise CheckpointError("checkpoint was written for a different kernel dictionary")

    try:
        state = _decode_ensemble(header, arrays) if header["kind"] == "ensemble" else _decode_lvm(header, arrays)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint is incomplete: {exc}") from exc
    extras = {key[len("extra/"):]: value for key, value in arrays.items() if key.startswith("extra/")}
    return Checkpoint(state=state, position=header["position"], extras=extras, meta=header["meta"])


# ---------------- Files ----------------
@retry(
    reraise=True,
    retry=retry_if_exception_type(PermissionError),
    stop=stop_after_attempt(settings.checkpoint_max_retries),
    wait=wait_exponential(multiplier=max(settings.checkpoint_retry_backoff_seconds, 0.1), min=0.1, max=4),
)
def _replace(source: str, target: Path) -> None:
    os.replace(source, target)


def checkpoint_save(path, state: State, *, position: int = 0, extras: Optional[Dict[str, np.ndarray]] = None, meta: Optional[Dict[str, Any]] = None) -> Path:
    """Atomically write a versioned checkpoint of `state` to `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_checkpoint(Checkpoint(state=state, position=position, extras=extras or {}, meta=meta or {}))
    fd, tmp = tempfile.mkstemp(prefix=path.name, suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(blob)
            handle.flush()
            os.fsync(handle.fileno())
        _replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise CheckpointError(f"failed to write checkpoint {path}: {exc}") from exc
    logger.info("Checkpoint written to %s at position %d", path, position)
    return path


def checkpoint_load(path, *, expected_size: Optional[int] = None, expected_fingerprint: Optional[str] = None) -> Checkpoint:
    """Read a checkpoint, refusing version or dictionary mismatches."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    checkpoint = decode_checkpoint(path.read_bytes(), expected_size=expected_size, expected_fingerprint=expected_fingerprint)
    logger.info("Checkpoint loaded from %s (position %d)", path, checkpoint.position)
    return checkpoint
