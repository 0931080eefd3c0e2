"""Binary model checkpoints.

Layout (little endian)::

    b"DSMODEL1" | u32 version | 32-byte sha256 of the structure text
    | u32 len + utf-8 spec text | u32 tensor count
    | per tensor: u32 len + utf-8 name, u32 ndim, u32 dims..., f64 data
    | u32 CRC32 of every preceding byte

Tensors are written in sorted name order so equal models give equal bytes.
"""
from __future__ import annotations

import hashlib
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .compute_graph import ParameterStore

MAGIC = b"DSMODEL1"
VERSION = 1


class ModelFormatError(ValueError):
    pass


@dataclass
class ModelFile:
    config_hash: bytes
    config_text: str
    params: ParameterStore


def model_bytes(params: ParameterStore, config_text: str, config_hash: bytes) -> bytes:
    if len(config_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    text = config_text.encode("utf-8")
    out = [MAGIC, struct.pack("<I", VERSION), config_hash, struct.pack("<I", len(text)), text,
           struct.pack("<I", len(params.names()))]
    for name in sorted(params.names()):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = name.encode("utf-8")
        out += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim),
                struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def parse_model(buf: bytes) -> ModelFile:
    if len(buf) < len(MAGIC) + 4 + 32 + 4 + 4 + 4:
        raise ModelFormatError("model file truncated")
    if buf[:8] != MAGIC:
        raise ModelFormatError("bad magic (not a model file)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ModelFormatError("checksum mismatch")
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise ModelFormatError("model file truncated")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    chash = take(32)
    (tlen,) = struct.unpack("<I", take(4))
    text = take(tlen).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    params = ParameterStore()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(body):
        raise ModelFormatError("trailing bytes after tensors")
    return ModelFile(chash, text, params)


def write_model(path, params: ParameterStore, config_text: str, config_hash: bytes) -> None:
    """Write atomically (temp file + rename) so a crash never leaves a half-written model."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(model_bytes(params, config_text, config_hash))
    os.replace(tmp, path)


def read_model(path) -> ModelFile:
    return parse_model(Path(path).read_bytes())


def checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
