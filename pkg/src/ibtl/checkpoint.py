"""Binary checkpoint format.

Layout::

    b"IBTL" | version (u32 LE) | header length (u32 LE) | header | payload

The header is UTF-8 JSON with sorted keys holding the architecture, layer
offsets, caller metadata and the sha256 of the payload. The payload is the
flat parameter vector as little-endian float64. Nothing time-dependent is
written, so equal parameters give equal bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ArchitectureSpec, ParameterVector

__all__ = ["MAGIC", "FORMAT_VERSION", "Checkpoint", "CheckpointError", "encode", "decode", "save", "load"]

MAGIC = b"IBTL"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Checkpoint:
    spec: ArchitectureSpec
    params: ParameterVector
    metadata: dict = field(default_factory=dict)

    def digest(self) -> str:
        return hashlib.sha256(_payload(self.params)).hexdigest()


def _payload(params: ParameterVector) -> bytes:
    return np.ascontiguousarray(params.values, dtype="<f8").tobytes()


def encode(ckpt: Checkpoint) -> bytes:
    if ckpt.params.values.size != ckpt.spec.num_params:
        raise CheckpointError(f"spec has {ckpt.spec.num_params} parameters, vector has {ckpt.params.values.size}")
    payload = _payload(ckpt.params)
    header = {
        "spec": ckpt.spec.to_dict(),
        "layer_offsets": [list(o) for o in ckpt.spec.layer_offsets],
        "metadata": ckpt.metadata,
        "num_params": ckpt.spec.num_params,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + payload


def decode(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{source}: truncated ({len(blob)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r} at byte 0")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise CheckpointError(f"{source}: header runs past end of file (byte {start + hlen})")
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: unreadable header at byte {start}: {exc}") from None
    spec = ArchitectureSpec.from_dict(header["spec"])
    if [list(o) for o in spec.layer_offsets] != header["layer_offsets"]:
        raise CheckpointError(f"{source}: layer offsets do not match the stored architecture")
    payload = blob[start + hlen :]
    if len(payload) != 8 * spec.num_params:
        raise CheckpointError(
            f"{source}: payload at byte {start + hlen} has {len(payload)} bytes, expected {8 * spec.num_params}"
        )
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{source}: payload digest mismatch")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return Checkpoint(spec, ParameterVector.for_spec(spec, values), header.get("metadata", {}))


def save(ckpt: Checkpoint, path) -> str:
    """Write the checkpoint; returns the payload digest."""
    Path(path).write_bytes(encode(ckpt))
    return ckpt.digest()


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes(), str(path))
