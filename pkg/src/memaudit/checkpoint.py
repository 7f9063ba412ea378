"""Binary container shared by model checkpoints and embedding tables.

Layout (little-endian)::

    0..3    magic (b"CKP1" for checkpoints, b"EMB1" for embedding tables)
    4..7    uint32 length L of the JSON header
    8..8+L  UTF-8 JSON header
    ...     raw array payloads, concatenated in header order

The header lists every array as ``{"name", "shape", "dtype"}``; dtypes are
``"<f4"`` (default) or ``"<f8"``. Arrays round-trip bit-exactly.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

CHECKPOINT_MAGIC = b"CKP1"
EMBEDDING_MAGIC = b"EMB1"
_LEN = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


def encode_blob(magic: bytes, header: dict, arrays: Mapping[str, np.ndarray]) -> bytes:
    specs, chunks = [], []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = "<f8" if arr.dtype == np.float64 else "<f4"
        specs.append({"name": name, "shape": list(arr.shape), "dtype": dt})
        chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    head = dict(header)
    head["arrays"] = specs
    hbytes = json.dumps(head, sort_keys=True).encode()
    return magic + _LEN.pack(len(hbytes)) + hbytes + b"".join(chunks)


def decode_blob(raw: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if raw[:4] != magic:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {magic!r}")
    (hlen,) = _LEN.unpack_from(raw, 4)
    try:
        header = json.loads(raw[8:8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from exc
    offset = 8 + hlen
    arrays = {}
    for spec in header.pop("arrays"):
        dt = np.dtype(spec["dtype"])
        shape = tuple(spec["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        end = offset + n * dt.itemsize
        if end > len(raw):
            raise CheckpointError(f"payload for {spec['name']!r} is truncated")
        arrays[spec["name"]] = np.frombuffer(raw, dtype=dt, count=n, offset=offset).reshape(shape).copy()
        offset = end
    return header, arrays


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_checkpoint(path, header: dict, arrays: Mapping[str, np.ndarray]) -> str:
    """Write a checkpoint; returns the sha256 of the file bytes."""
    blob = encode_blob(CHECKPOINT_MAGIC, header, arrays)
    _atomic_write(path, blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_blob(Path(path).read_bytes(), CHECKPOINT_MAGIC)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_embedding_table(path, ids, table: np.ndarray, checkpoint_id: str = "") -> None:
    table = np.asarray(table, dtype=np.float32)
    if table.ndim != 2 or table.shape[0] != len(ids):
        raise CheckpointError(f"table shape {table.shape} does not match {len(ids)} ids")
    header = {"checkpoint": checkpoint_id, "dim": int(table.shape[1]),
              "count": int(table.shape[0]), "ids": list(ids)}
    _atomic_write(path, encode_blob(EMBEDDING_MAGIC, header, {"embeddings": table}))


def load_embedding_table(path) -> tuple[list[str], np.ndarray, dict]:
    header, arrays = decode_blob(Path(path).read_bytes(), EMBEDDING_MAGIC)
    table = arrays["embeddings"]
    if table.shape != (header["count"], header["dim"]):
        raise CheckpointError("embedding table shape disagrees with its header")
    return list(header["ids"]), table, header
