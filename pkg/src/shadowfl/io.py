"""Checkpoint container and atomic file writes.

Layout: ``b"SHFL"``, uint32 version, uint32 header length, UTF-8 JSON
header, then the payload as little-endian float64. All integers are
little-endian.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
import struct
import tempfile

import numpy as np

MAGIC = b"SHFL"
VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_checkpoint(header: dict, payload: np.ndarray) -> bytes:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = np.ascontiguousarray(payload, dtype="<f8").tobytes()
    return MAGIC + struct.pack("<II", VERSION, len(head)) + head + body


def decode_checkpoint(blob: bytes) -> tuple[dict, np.ndarray]:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(blob) < 12 + hlen:
        raise CheckpointError("truncated checkpoint header")
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    body = blob[12 + hlen:]
    if len(body) % 8:
        raise CheckpointError("payload length is not a multiple of 8 bytes")
    return header, np.frombuffer(body, dtype="<f8").astype(np.float64)


def save_checkpoint(path, header: dict, payload: np.ndarray) -> None:
    atomic_write_bytes(path, encode_checkpoint(header, payload))


def load_checkpoint(path) -> tuple[dict, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


def save_model(path, spec, params: np.ndarray, seed=None, extra: dict | None = None) -> None:
    header = {"kind": "model", "spec": spec.to_dict(), "seed": seed}
    header.update(extra or {})
    save_checkpoint(path, header, params)


def load_model(path):
    from .nn import ModelSpec

    header, vec = load_checkpoint(path)
    if header.get("kind") != "model":
        raise CheckpointError(f"checkpoint holds {header.get('kind')!r}, not a model")
    spec = ModelSpec.from_dict(header["spec"])
    if vec.size != spec.n_params:
        raise CheckpointError(f"payload has {vec.size} values, spec needs {spec.n_params}")
    return spec, vec, header


def save_filter(path, params) -> None:
    header, vec = params.to_vector()
    save_checkpoint(path, header, vec)


def load_filter(path):
    from .robust import FilterParams

    header, vec = load_checkpoint(path)
    if header.get("kind") != "filter_params":
        raise CheckpointError("checkpoint does not hold filter parameters")
    return FilterParams.from_vector(header, vec)


def save_dataset(path, dataset) -> None:
    """Inputs and labels in one payload: n*d pixels followed by n labels."""
    header = {
        "kind": "dataset",
        "n": len(dataset),
        "d": int(dataset.inputs.shape[1]),
        "n_classes": dataset.n_classes,
        "image_shape": list(dataset.image_shape) if dataset.image_shape else None,
        "unit_range": dataset.unit_range,
    }
    vec = np.concatenate([dataset.inputs.ravel(), dataset.labels.astype(np.float64)])
    save_checkpoint(path, header, vec)


def load_dataset(path):
    from .data import Dataset

    header, vec = load_checkpoint(path)
    if header.get("kind") != "dataset":
        raise CheckpointError("checkpoint does not hold a dataset")
    n, d = header["n"], header["d"]
    x = vec[: n * d].reshape(n, d)
    y = vec[n * d:].astype(np.int64)
    shape = tuple(header["image_shape"]) if header["image_shape"] else None
    return Dataset(x, y, header["n_classes"], shape, unit_range=header["unit_range"])
