"""FVAE1 checkpoint container.

Layout::

    b"FVAE1"
    u64 little-endian: header length in bytes
    header: canonical JSON (sorted keys, no whitespace) with
        format, config, config_hash, round, tensors=[{name, shape, offset}]
    payload: little-endian float32 tensors, concatenated in directory order

Offsets are relative to the payload start and leave no gaps, so loading and
re-saving a checkpoint reproduces it byte for byte.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

import numpy as np

from .errors import DataError
from .nn import ParamSet

MAGIC = b"FVAE1"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")
_F32 = np.dtype("<f4")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


@dataclass
class Checkpoint:
    config: Dict[str, Any]
    config_hash: str
    round: int
    params: ParamSet
    extra: Dict[str, Any] = field(default_factory=dict)

    def header(self) -> Dict[str, Any]:
        tensors = []
        offset = 0
        for name, arr in self.params.items():
            tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += int(arr.size) * _F32.itemsize
        head = {
            "format": FORMAT_VERSION,
            "config": self.config,
            "config_hash": self.config_hash,
            "round": int(self.round),
            "tensors": tensors,
        }
        if self.extra:
            head["extra"] = self.extra
        return head

    def to_bytes(self) -> bytes:
        head = canonical_json(self.header()).encode("ascii")
        payload = b"".join(np.ascontiguousarray(arr, dtype=_F32).tobytes() for arr in self.params.values())
        return MAGIC + _LEN.pack(len(head)) + head + payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        head, payload_start = read_header(data)
        params = {}
        expected = 0
        for entry in head["tensors"]:
            name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
            if offset != expected:
                raise DataError(f"checkpoint tensor {name!r}: offset {offset} leaves a gap or overlap (expected {expected})")
            if name in params:
                raise DataError(f"checkpoint has duplicate tensor {name!r}")
            count = int(np.prod(shape, dtype=np.int64))
            start = payload_start + offset
            end = start + count * _F32.itemsize
            if end > len(data):
                raise DataError(f"checkpoint truncated inside tensor {name!r}")
            params[name] = np.frombuffer(data[start:end], dtype=_F32).astype(np.float32).reshape(shape)
            expected = offset + count * _F32.itemsize
        if payload_start + expected != len(data):
            raise DataError(f"checkpoint has {len(data) - payload_start - expected} trailing bytes")
        return cls(head["config"], head["config_hash"], head["round"], params, head.get("extra", {}))

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_bytes(data)


def read_header(data: bytes):
    """Parse and validate the header; returns (header dict, payload offset)."""
    if data[: len(MAGIC)] != MAGIC:
        raise DataError("not an FVAE1 checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(data) < pos + _LEN.size:
        raise DataError("checkpoint truncated in header length")
    (n,) = _LEN.unpack_from(data, pos)
    pos += _LEN.size
    if len(data) < pos + n:
        raise DataError("checkpoint truncated in header")
    try:
        head = json.loads(data[pos:pos + n].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"checkpoint header is not valid JSON: {exc}") from exc
    for key in ("format", "config", "config_hash", "round", "tensors"):
        if key not in head:
            raise DataError(f"checkpoint header lacks {key!r}")
    if head["format"] != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format {head['format']}")
    return head, pos + n
