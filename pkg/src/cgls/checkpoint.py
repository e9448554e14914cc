"""Binary checkpoint files.

Layout::

    b"CGLS" | u32 LE version | u64 LE header length | UTF-8 JSON manifest | raw tensors

The manifest lists every tensor (name, dtype, shape, byte offset into the blob
region, byte length) in blob order, plus the model config, per-layer origin
tags, optimizer hyperparameters and counters, and free-form metadata such as
the sampler RNG state. Tensors are little-endian; training always writes "f32".
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CorruptHeaderError, TruncatedBlobError, VersionMismatchError
from .model import ModelConfig, Origin, ParameterSet, tensor_names
from .optim import AdamWHyper, OptimizerState

MAGIC = b"CGLS"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def _dtype_tag(arr: np.ndarray) -> str:
    for tag, dt in _DTYPES.items():
        if arr.dtype == dt or arr.dtype == dt.newbyteorder("="):
            return tag
    raise TypeError(f"cannot checkpoint dtype {arr.dtype}")


def _entries(params: ParameterSet, state: OptimizerState | None):
    for name, arr in params.named().items():
        yield f"param/{name}", arr
    if state is not None:
        for name in params.named():
            yield f"m/{name}", state.m[name]
        for name in params.named():
            yield f"v/{name}", state.v[name]


def encode_checkpoint(params: ParameterSet, state: OptimizerState | None = None,
                      metadata: dict | None = None) -> bytes:
    tensors, blobs, offset = [], [], 0
    for name, arr in _entries(params, state):
        tag = _dtype_tag(arr)
        data = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        tensors.append({"name": name, "dtype": tag, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    optimizer = None
    if state is not None:
        optimizer = {"hyper": state.hyper.to_dict(), "step_count": state.step_count,
                     "steps": state.steps}
    header = {
        "config": params.config.to_dict(),
        "layer_origins": [str(o) for o in params.origins],
        "tensors": tensors,
        "optimizer": optimizer,
        "metadata": metadata or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(blobs)


def save_checkpoint(path, params: ParameterSet, state: OptimizerState | None = None,
                    metadata: dict | None = None) -> Path:
    """Write atomically: a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_checkpoint(params, state, metadata)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def decode_checkpoint(payload: bytes):
    if len(payload) < _PREFIX.size:
        raise CorruptHeaderError("file too short to hold a checkpoint header")
    magic, version, head_len = _PREFIX.unpack_from(payload)
    if magic != MAGIC:
        raise CorruptHeaderError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this reader supports {VERSION}")
    start = _PREFIX.size + head_len
    if start > len(payload):
        raise CorruptHeaderError("declared header length runs past end of file")
    try:
        header = json.loads(payload[_PREFIX.size:start].decode("utf-8"))
        tensors = header["tensors"]
        config = ModelConfig.from_dict(header["config"])
        origins = [Origin.parse(o) for o in header["layer_origins"]]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptHeaderError(f"unreadable checkpoint manifest: {exc}") from exc
    blob_len = sum(t["nbytes"] for t in tensors)
    if len(payload) - start < blob_len:
        raise TruncatedBlobError(
            f"tensor data is {len(payload) - start} bytes, manifest declares {blob_len}")
    if len(payload) - start > blob_len:
        raise CorruptHeaderError("trailing bytes after the declared tensor data")

    arrays = {}
    for t in tensors:
        dt = _DTYPES[t["dtype"]]
        count = int(np.prod(t["shape"], dtype=np.int64))
        if count * dt.itemsize != t["nbytes"]:
            raise CorruptHeaderError(f"tensor {t['name']}: shape and byte length disagree")
        raw = payload[start + t["offset"]:start + t["offset"] + t["nbytes"]]
        arrays[t["name"]] = np.frombuffer(raw, dtype=dt).astype(dt.newbyteorder("=")).reshape(
            t["shape"])

    expected = tensor_names(config.depth)
    if sorted(k[6:] for k in arrays if k.startswith("param/")) != sorted(expected):
        raise CorruptHeaderError("manifest tensor set does not match the model config")
    named = {name: arrays[f"param/{name}"] for name in expected}
    params = ParameterSet._from_named(named, config, origins)

    state = None
    opt = header.get("optimizer")
    if opt is not None:
        state = OptimizerState(
            m={n: arrays[f"m/{n}"] for n in expected},
            v={n: arrays[f"v/{n}"] for n in expected},
            steps={n: int(opt["steps"][n]) for n in expected},
            step_count=int(opt["step_count"]),
            hyper=AdamWHyper(**opt["hyper"]),
        )
    return params, state, header["metadata"]


def load_checkpoint(path):
    """Returns ``(params, optimizer_state_or_None, metadata)``."""
    return decode_checkpoint(Path(path).read_bytes())
