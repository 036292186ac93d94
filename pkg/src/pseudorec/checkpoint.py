"""Versioned binary checkpoints: magic, metadata, named f32 tensors, CRC32.

Layout (all integers little-endian):
  "PRCL" | u16 version | u32 metadata length | metadata "key=value\\n" text |
  u32 tensor count | per tensor: u16 name length, name, u8 dtype (0 = f32),
  u8 rank, u32 extents, raw payload | u32 CRC32 over everything above.

Writes go to a temporary file in the same directory and are renamed into
place, so a crash never leaves a half-written checkpoint behind.
"""

from __future__ import annotations

import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

from .errors import BadHeader, ChecksumMismatch, VersionUnsupported

MAGIC = b"PRCL"
VERSION = 1
_DTYPE_F32 = 0


@dataclass
class ModelCheckpoint:
    """Named tensor arrays plus free-form string metadata."""

    metadata: Dict[str, str] = field(default_factory=dict)
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    def __eq__(self, other):
        if not isinstance(other, ModelCheckpoint):
            return NotImplemented
        return (self.version == other.version
                and self.metadata == other.metadata
                and self.tensors.keys() == other.tensors.keys()
                and all(np.array_equal(self.tensors[k], other.tensors[k])
                        and self.tensors[k].shape == other.tensors[k].shape
                        for k in self.tensors))


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += int(ckpt.version).to_bytes(2, "little")
    meta = "".join(f"{k}={v}\n" for k, v in sorted(ckpt.metadata.items())).encode("utf-8")
    buf += len(meta).to_bytes(4, "little")
    buf += meta
    buf += len(ckpt.tensors).to_bytes(4, "little")
    for name in sorted(ckpt.tensors):
        # asarray keeps rank-0 entries rank-0; tobytes() copies to C order itself
        arr = np.asarray(ckpt.tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        buf += len(nb).to_bytes(2, "little")
        buf += nb
        buf += bytes((_DTYPE_F32, arr.ndim))
        for extent in arr.shape:
            buf += int(extent).to_bytes(4, "little")
        buf += arr.tobytes()
    buf += zlib.crc32(bytes(buf)).to_bytes(4, "little")

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(buf))
    os.replace(tmp, path)


class _Cursor:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise BadHeader(f"{self.path}: truncated at byte {self.off}")
        out = self.raw[self.off : self.off + n]
        self.off += n
        return out

    def u(self, n: int) -> int:
        return int.from_bytes(self.take(n), "little")


def load_checkpoint(path) -> ModelCheckpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 2 or raw[: len(MAGIC)] != MAGIC:
        raise BadHeader(f"{path}: not a checkpoint file")
    version = int.from_bytes(raw[4:6], "little")
    if version != VERSION:
        raise VersionUnsupported(f"{path}: version {version}, supported: {VERSION}")
    if len(raw) < 10:
        raise BadHeader(f"{path}: truncated before checksum")
    stored_crc = int.from_bytes(raw[-4:], "little")
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise ChecksumMismatch(f"{path}: CRC32 does not match contents")

    cur = _Cursor(raw[:-4], path)
    cur.take(6)  # magic + version already validated
    meta_len = cur.u(4)
    metadata = {}
    for line in cur.take(meta_len).decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        metadata[key] = value
    tensors = {}
    for _ in range(cur.u(4)):
        name = cur.take(cur.u(2)).decode("utf-8")
        dtype_code = cur.u(1)
        if dtype_code != _DTYPE_F32:
            raise BadHeader(f"{path}: unknown dtype code {dtype_code} for {name}")
        rank = cur.u(1)
        shape = tuple(cur.u(4) for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        payload = cur.take(4 * count)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if cur.off != len(cur.raw):
        raise BadHeader(f"{path}: {len(cur.raw) - cur.off} trailing bytes")
    return ModelCheckpoint(metadata=metadata, tensors=tensors, version=version)
