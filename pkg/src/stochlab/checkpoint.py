"""Manifest + blob container for named float64 arrays.

A container is a directory holding ``manifest.json`` (names, shapes, byte
offsets, free-form metadata) and ``data.bin`` (little-endian float64, arrays
concatenated in manifest order). Model checkpoints and dataset exports share
this layout.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .tensor import Tensor
from .vit import ViTConfig, ViTModel

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "data.bin"


class CorruptionError(IOError):
    """Manifest and blob disagree."""


def save_arrays(path, arrays: dict[str, np.ndarray], kind: str, meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format": "stochlab-container",
        "version": FORMAT_VERSION,
        "kind": kind,
        "dtype": "<f8",
        "total_bytes": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
        "meta": meta or {},
        "tensors": entries,
    }
    (path / BLOB).write_bytes(blob)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_arrays(path, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
        blob = (path / BLOB).read_bytes()
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"no container at {path}: {exc.filename}") from exc
    if manifest.get("version") != FORMAT_VERSION:
        raise CorruptionError(f"unsupported container version {manifest.get('version')}")
    if kind is not None and manifest.get("kind") != kind:
        raise CorruptionError(f"expected a {kind!r} container, found {manifest.get('kind')!r}")
    if len(blob) != manifest["total_bytes"]:
        raise CorruptionError(f"blob has {len(blob)} bytes, manifest says {manifest['total_bytes']}")
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise CorruptionError("blob checksum mismatch")
    arrays = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["nbytes"] != 8 * n or e["offset"] + e["nbytes"] > len(blob):
            raise CorruptionError(f"entry {e['name']!r} has inconsistent shape/offset")
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return arrays, manifest["meta"]


def save_model(model: ViTModel, path) -> Path:
    arrays = {n: t.data for n, t in model.params.items()}
    meta = {"config": model.config.to_dict(), "param_hash": model.param_hash()}
    return save_arrays(path, arrays, kind="vit", meta=meta)


def load_model(path, frozen: bool = False) -> ViTModel:
    arrays, meta = load_arrays(path, kind="vit")
    cfg = ViTConfig(**meta["config"])
    try:
        model = ViTModel(cfg, {n: Tensor(a, requires_grad=True, name=n) for n, a in arrays.items()})
    except ValueError as exc:
        raise CorruptionError(str(exc)) from exc
    if model.param_hash() != meta["param_hash"]:
        raise CorruptionError("parameter hash mismatch after load")
    return model.freeze() if frozen else model
