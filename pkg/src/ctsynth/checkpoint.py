"""Versioned binary checkpoints.

Layout (little-endian)::

    magic "MCKP" | version u16 | header_len u32 | header JSON (utf-8)
    n_arrays u32 | per array: name_len u16, name, ndim u8, dims u32 * ndim, float32 payload

The header JSON (sorted keys) carries the model kind, its config and any
stage links such as the content hash of the checkpoint a model was trained
against.  The content hash is the SHA-256 of the full file bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: dict = field(default_factory=dict)
    arrays: dict = field(default_factory=dict)
    links: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def header(self):
        return {"kind": self.kind, "config": self.config, "links": self.links, "extra": self.extra}


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = json.dumps(ckpt.header(), sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(header)), header,
             struct.pack("<I", len(ckpt.arrays))]
    for name, arr in ckpt.arrays.items():
        arr = np.asarray(arr, dtype="<f4")
        key = name.encode()
        parts.append(struct.pack("<HB", len(key), arr.ndim) + key)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if raw[:4] != MAGIC:
        raise CheckpointError("bad magic")
    try:
        version, hlen = struct.unpack_from("<HI", raw, 4)
        if version != VERSION:
            raise CheckpointError(f"version mismatch: file {version}, reader {VERSION}")
        pos = 10
        header = json.loads(raw[pos:pos + hlen].decode())
        pos += hlen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            klen, ndim = struct.unpack_from("<HB", raw, pos)
            pos += 3
            name = raw[pos:pos + klen].decode()
            pos += klen
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            nbytes = 4 * int(np.prod(shape))
            if pos + nbytes > len(raw):
                raise CheckpointError("truncated payload")
            arrays[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).copy()
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(raw):
        raise CheckpointError("trailing bytes after payload")
    return Checkpoint(header["kind"], header["config"], arrays, header["links"], header["extra"])


def content_hash(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    """Write ``ckpt`` and return its content hash."""
    raw = encode_checkpoint(ckpt)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(raw)
    return content_hash(raw)


def load_checkpoint(path, expect_kind=None):
    """Returns ``(checkpoint, content_hash)``."""
    raw = Path(path).read_bytes()
    ckpt = decode_checkpoint(raw)
    if expect_kind is not None and ckpt.kind != expect_kind:
        raise CheckpointError(f"expected a {expect_kind!r} checkpoint, found {ckpt.kind!r}")
    return ckpt, content_hash(raw)


def state_dict(named_params: dict) -> dict:
    return {name: p.data for name, p in named_params.items()}


def load_state(named_params: dict, arrays: dict, strict=True):
    """Copy arrays into parameters in place (shapes must match)."""
    missing = set(named_params) - set(arrays)
    if strict and missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, p in named_params.items():
        if name not in arrays:
            continue
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.data.shape}")
        p.data[...] = arrays[name]
