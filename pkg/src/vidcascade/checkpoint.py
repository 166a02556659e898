"""Named-array checkpoint container (`IVCK`).

Layout: 4-byte magic, u32 version, u64 metadata length, UTF-8 JSON metadata,
then the concatenated little-endian float32 array payloads. The metadata
carries array descriptors (name, shape, byte offset), a config hash that must
match on load, and whatever run state the caller includes (step counter,
generator state, distillation block). Round-trips are bit-exact.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np

from .tensor import Tensor, TensorError

MAGIC = b"IVCK"
VERSION = 1


class CheckpointError(TensorError):
    """Unreadable, corrupt, or mismatched checkpoint."""


def _canonical(obj: Any):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _canonical(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def config_hash(config: Any) -> str:
    """Stable digest of a (dataclass) configuration."""
    doc = json.dumps(_canonical(config), sort_keys=True)
    return hashlib.sha256(doc.encode("utf-8")).hexdigest()[:16]


def save_checkpoint(path: Path | str, arrays: dict[str, np.ndarray | Tensor],
                    metadata: dict) -> None:
    path = Path(path)
    descriptors = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        if data.dtype != np.float32:
            raise CheckpointError(f"array {name!r} must be float32, got {data.dtype}")
        blob = data.astype("<f4").tobytes()
        descriptors.append({"name": name, "shape": list(data.shape), "offset": offset,
                            "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    meta = dict(metadata)
    meta["arrays"] = descriptors
    meta_bytes = json.dumps(_canonical(meta), sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: Path | str, expected_config_hash: str | None = None
                    ) -> tuple[dict[str, Tensor], dict]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, meta_len = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = 4 + 12
    meta = json.loads(raw[header:header + meta_len].decode("utf-8"))
    if expected_config_hash is not None:
        found = meta.get("config_hash")
        if found != expected_config_hash:
            raise CheckpointError(
                f"{path}: config hash mismatch (checkpoint {found}, expected "
                f"{expected_config_hash}); refusing to load"
            )
    payload = header + meta_len
    arrays: dict[str, Tensor] = {}
    for desc in meta["arrays"]:
        count = desc["nbytes"] // 4
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=payload + desc["offset"])
        if data.size != count:
            raise CheckpointError(f"{path}: truncated array {desc['name']!r}")
        arrays[desc["name"]] = Tensor(
            data.reshape(desc["shape"]).astype(np.float32), _trusted=True
        )
    return arrays, meta


# ---------------------------------------------------------------------------
# Train-state persistence
# ---------------------------------------------------------------------------

def save_train_state(path: Path | str, state, config, extra_meta: dict | None = None) -> None:
    """Persist parameters, optimizer moments, step counter, and generator state."""
    arrays: dict[str, np.ndarray | Tensor] = dict(state.params)
    for name, m in state.adam_m.items():
        arrays[f"opt.m/{name}"] = m
    for name, v in state.adam_v.items():
        arrays[f"opt.v/{name}"] = v
    meta = {
        "kind": "train_state",
        "config_hash": config_hash(config),
        "step": state.step,
        "image_batches": state.image_batches,
        "rng_state": state.rng.bit_generator.state,
    }
    meta.update(extra_meta or {})
    save_checkpoint(path, arrays, meta)


def load_train_state(path: Path | str, config):
    """Restore a TrainState; fails loudly if the config hash differs."""
    from .training import TrainState

    arrays, meta = load_checkpoint(path, expected_config_hash=config_hash(config))
    if meta.get("kind") != "train_state":
        raise CheckpointError(f"{path}: not a training checkpoint")
    params, adam_m, adam_v = {}, {}, {}
    for name, t in arrays.items():
        if name.startswith("opt.m/"):
            adam_m[name[6:]] = t.data.copy()
        elif name.startswith("opt.v/"):
            adam_v[name[6:]] = t.data.copy()
        else:
            params[name] = t
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    state = TrainState(
        params=params, adam_m=adam_m, adam_v=adam_v, step=meta["step"], rng=rng,
        image_batches=meta.get("image_batches", 0),
    )
    return state, meta


def save_model(path: Path | str, params: dict[str, Tensor], config,
               step: int = 0, distilled: dict | None = None,
               extra_meta: dict | None = None) -> None:
    """Persist inference parameters plus stage metadata."""
    meta = {
        "kind": "model",
        "config_hash": config_hash(config),
        "step": step,
    }
    if distilled is not None:
        meta["distilled"] = dict(distilled)
    meta.update(extra_meta or {})
    save_checkpoint(path, dict(params), meta)


def load_model(path: Path | str, config) -> tuple[dict[str, Tensor], dict]:
    arrays, meta = load_checkpoint(path, expected_config_hash=config_hash(config))
    if meta.get("kind") != "model":
        raise CheckpointError(f"{path}: not a model checkpoint")
    return arrays, meta
