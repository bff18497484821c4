"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"GLIED1"
    u32 header_len, header_len bytes of UTF-8 JSON {"model": ModelConfig fields, "meta": {...}}
    u32 entry_count
    entry*:  u8 kind, u16 name_len, name
             kind 0 (tensor): u8 rank, u32 dim * rank, float64 payload
             kind 1 (alias):  u16 target_len, target name
    32-byte SHA-256 of everything above

Shared tensors are written once; later names pointing at the same storage
become alias records, and loading re-establishes the sharing.
"""
from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .model import GliedDecoder, ModelConfig

MAGIC = b"GLIED1"
_TENSOR, _ALIAS = 0, 1


class CheckpointError(ValueError):
    pass


def to_bytes(model: GliedDecoder, meta: dict | None = None) -> bytes:
    header = json.dumps({"model": model.config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", len(header)), header]
    entries = model.named_parameters(with_aliases=True)
    parts.append(struct.pack("<I", len(entries)))
    first_name: dict[int, str] = {}
    for name, p in entries:
        nb = name.encode()
        if id(p) in first_name:
            tb = first_name[id(p)].encode()
            parts.append(struct.pack("<BH", _ALIAS, len(nb)) + nb + struct.pack("<H", len(tb)) + tb)
            continue
        first_name[id(p)] = name
        parts.append(struct.pack("<BH", _TENSOR, len(nb)) + nb)
        parts.append(struct.pack(f"<B{p.data.ndim}I", p.data.ndim, *p.data.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model: GliedDecoder, path, meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(model, meta))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(buf: bytes) -> tuple[GliedDecoder, dict]:
    if not buf.startswith(MAGIC):
        head = buf[:len(MAGIC)]
        if head[:5] == MAGIC[:5]:
            raise CheckpointError(f"unsupported checkpoint version {head!r}, expected {MAGIC!r}")
        raise CheckpointError(f"not a checkpoint: bad magic {head!r} (version mismatch or wrong file)")
    if len(buf) < len(MAGIC) + 32:
        raise CheckpointError("truncated checkpoint")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt")
    r = _Reader(body)
    r.take(len(MAGIC))
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode())
        config = ModelConfig.from_dict(header["model"])
    except (ValueError, KeyError, TypeError) as err:
        raise CheckpointError(f"bad config record: {err}") from err
    model = GliedDecoder(config)
    expected = model.named_parameters(with_aliases=True)
    (count,) = r.unpack("<I")
    if count != len(expected):
        raise CheckpointError(f"checkpoint has {count} entries, model {config.variant!r} needs {len(expected)}")
    loaded: dict[str, str] = {}
    for name, p in expected:
        kind, nlen = r.unpack("<BH")
        got = r.take(nlen).decode()
        if got != name:
            raise CheckpointError(f"entry {got!r} found where {name!r} was expected")
        if kind == _ALIAS:
            (tlen,) = r.unpack("<H")
            target = r.take(tlen).decode()
            if loaded.get(target) is None or dict(expected)[target] is not p:
                raise CheckpointError(f"alias {name!r} -> {target!r} does not match the model's sharing")
            loaded[name] = target
            continue
        if kind != _TENSOR:
            raise CheckpointError(f"unknown entry kind {kind} for {name!r}")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        if tuple(dims) != p.data.shape:
            raise CheckpointError(f"{name}: stored shape {dims} vs expected {p.data.shape}")
        n = int(np.prod(dims)) if rank else 1
        p.data[...] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(dims)
        loaded[name] = name
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")
    return model, header.get("meta", {})


def load_checkpoint(path) -> tuple[GliedDecoder, dict]:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
