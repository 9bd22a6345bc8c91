"""The QAAM model container.

Layout::

    b"QAAM" | u16 version | u32 header length | header (UTF-8 JSON)
    | tensor payload (little-endian float32, in header order) | SHA-256 of all preceding bytes

The header carries the graph spec, every QuantParams record and the tensor
index (key, shape, byte offset). Parameters and batchnorm statistics are both
tensors.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ..core.graph import LayerGraph
from ..quant import QuantParams

MAGIC = b"QAAM"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_DIGEST = 32


class ContainerError(ValueError):
    pass


class ChecksumError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


def _tensors(model: LayerGraph):
    for i, layer in enumerate(model.layers):
        for name, arr in layer.params.items():
            yield f"{i}.params.{name}", arr
        for name, arr in layer.buffers.items():
            yield f"{i}.buffers.{name}", arr


def to_bytes(model: LayerGraph) -> bytes:
    index, chunks, offset = [], [], 0
    for key, arr in _tensors(model):
        if arr.dtype != np.float32:
            raise ContainerError(f"{key}: container stores float32 tensors, got {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"key": key, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    quant = {key: qp.to_dict() for key, qp in model.quant_sites()}
    header = json.dumps({"graph": model.spec(), "quant": quant, "tensors": index},
                        sort_keys=True, separators=(",", ":")).encode()
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def from_bytes(blob: bytes) -> LayerGraph:
    if len(blob) < _PREFIX.size + _DIGEST:
        raise ChecksumError("container truncated")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("container checksum mismatch (truncated or corrupted file)")
    magic, version, hlen = _PREFIX.unpack_from(body)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"container version {version}, this reader supports {FORMAT_VERSION}")
    header = json.loads(body[_PREFIX.size:_PREFIX.size + hlen])
    payload = memoryview(body)[_PREFIX.size + hlen:]
    model = LayerGraph.from_spec(header["graph"])
    for entry in header["tensors"]:
        i, group, name = entry["key"].split(".", 2)
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        getattr(model.layers[int(i)], group)[name] = arr.astype(np.float32).reshape(shape)
    for key, rec in header["quant"].items():
        i, attr = key.split(".", 1)
        setattr(model.layers[int(i)], attr, QuantParams.from_dict(rec))
    model.validate()
    return model


def save_model(model: LayerGraph, path) -> str:
    """Write ``model``; returns the SHA-256 of the file."""
    blob = to_bytes(model)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_model(path) -> LayerGraph:
    return from_bytes(Path(path).read_bytes())
