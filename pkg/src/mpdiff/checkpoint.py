"""Binary checkpoint format.

Layout (little-endian)::

    b"MPDF"  u32 version  u64 step  32-byte config hash
    u8 has_gamma  f64 gamma
    u32 json_len  json (run metadata, UTF-8)
    repeated records: u16 name_len, name, u8 rank, u32 dims[rank], f32 payload
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MPDF"
VERSION = 1
_HEAD = struct.Struct("<4sIQ32sBdI")


class CheckpointError(ValueError):
    pass


def config_hash(model: dict, data_spec: dict) -> bytes:
    """SHA-256 over the canonical JSON of the model and data configuration."""
    blob = json.dumps({"model": model, "data": data_spec}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).digest()


@dataclass
class Checkpoint:
    step: int
    config_hash: bytes
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    gamma: float | None = None

    def prefixed(self, prefix: str) -> dict[str, np.ndarray]:
        """Records under ``prefix`` with the prefix stripped, in file order."""
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    if len(ckpt.config_hash) != 32:
        raise CheckpointError("config hash must be 32 bytes")
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    has_gamma = ckpt.gamma is not None
    parts = [
        _HEAD.pack(MAGIC, VERSION, ckpt.step, ckpt.config_hash, int(has_gamma),
                   float(ckpt.gamma) if has_gamma else 0.0, len(meta)),
        meta,
    ]
    for name, arr in ckpt.tensors.items():
        raw = name.encode()
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"record name too long: {name[:40]}...")
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise CheckpointError(f"record {name}: rank {arr.ndim} too large")
        parts.append(struct.pack(f"<H{len(raw)}sB{arr.ndim}I", len(raw), raw, arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < _HEAD.size or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    _, version, step, digest, has_gamma, gamma, meta_len = _HEAD.unpack_from(buf, 0)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = _HEAD.size
    meta = json.loads(buf[off : off + meta_len]) if meta_len else {}
    off += meta_len
    tensors: dict[str, np.ndarray] = {}
    try:
        while off < len(buf):
            (name_len,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + name_len].decode()
            off += name_len
            rank = buf[off]
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
            off += 4 * count
            tensors[name] = arr.astype(np.float32).reshape(dims)
    except (struct.error, ValueError, IndexError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from None
    return Checkpoint(step, digest, tensors, meta, gamma if has_gamma else None)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        return decode_checkpoint(path.read_bytes())
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from None


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
