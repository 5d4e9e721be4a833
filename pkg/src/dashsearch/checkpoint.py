"""Checkpoint serialization: JSON with base64-encoded little-endian
float32 tensors. Loads refuse version mismatches and corrupt files with
distinct error types; plain I/O errors propagate as-is."""

from __future__ import annotations

import base64
import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .model import HybridArch, ModelSpec

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    spec: ModelSpec
    tensors: dict[str, np.ndarray]
    arch: HybridArch | None = None
    alpha: np.ndarray | None = None
    metadata: dict | None = None


def _encode_tensor(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f4")
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(data.tobytes()).decode("ascii"),
    }


def _decode_tensor(entry: dict) -> np.ndarray:
    shape = tuple(entry["shape"])
    raw = base64.b64decode(entry["data"].encode("ascii"), validate=True)
    flat = np.frombuffer(raw, dtype="<f4")
    if flat.size != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointCorruptError(
            f"tensor payload has {flat.size} values, shape {shape} needs "
            f"{int(np.prod(shape, dtype=np.int64))}"
        )
    return flat.reshape(shape).astype(np.float64)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "spec": dataclasses.asdict(ckpt.spec),
        "tensors": {name: _encode_tensor(arr) for name, arr in sorted(ckpt.tensors.items())},
        "arch": ckpt.arch.to_string() if ckpt.arch is not None else None,
        "alpha": _encode_tensor(ckpt.alpha) if ckpt.alpha is not None else None,
        "metadata": ckpt.metadata or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> Checkpoint:
    with open(path) as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointCorruptError(f"not valid checkpoint JSON: {exc}") from exc
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CheckpointCorruptError("missing format_version field")
    version = doc["format_version"]
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint has format version {version}, this build reads {FORMAT_VERSION}"
        )
    try:
        spec = ModelSpec(**doc["spec"])
        tensors = {name: _decode_tensor(entry) for name, entry in doc["tensors"].items()}
        arch = HybridArch.from_string(doc["arch"]) if doc.get("arch") else None
        alpha = _decode_tensor(doc["alpha"]) if doc.get("alpha") else None
    except CheckpointCorruptError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointCorruptError(f"malformed checkpoint contents: {exc}") from exc
    return Checkpoint(
        spec=spec,
        tensors=tensors,
        arch=arch,
        alpha=alpha,
        metadata=doc.get("metadata") or {},
    )


def params_digest(params: dict[str, np.ndarray]) -> str:
    """Order-independent SHA-256 over full-precision parameter bytes."""
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return digest.hexdigest()
