"""Versioned binary checkpoints.

Layout (little-endian)::

    "MODK" | version u16
    topology block : len u32 | JSON utf-8 | crc32 u32
    counters       : step u64 | examples_seen u64
    rng block      : len u32 | JSON utf-8 | crc32 u32
    tensor count u32, then tensor blocks
    optimizer flag u8; if 1: adam step u64 | tensor count u32 | blocks ("m:<name>", "v:<name>")

Tensor block: name_len u16 | name | dtype u8 (0 f32, 1 f64) | ndim u8 |
dims u32*ndim | raw data | crc32 u32 over everything before it in the block.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import AdamState

MAGIC = b"MODK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


class FormatError(CheckpointError):
    def __init__(self, msg: str, offset: int | None = None):
        self.offset = offset
        super().__init__(msg if offset is None else f"{msg} (at byte offset {offset})")


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


@dataclass
class Checkpoint:
    topology: dict
    params: dict
    adam: AdamState | None = None
    examples_seen: int = 0
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    format_version: int = VERSION
    # per-step training loss; in-memory only
    history: list = field(default_factory=list, compare=False, repr=False)


def _json_block(obj) -> bytes:
    body = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<I", len(body)) + body + struct.pack("<I", zlib.crc32(body))


def _tensor_block(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", _CODES[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    body = head + arr.astype(_DTYPES[_CODES[arr.dtype]], copy=False).tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def encode_checkpoint(ckpt: Checkpoint, include_optimizer: bool = True) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION), _json_block(ckpt.topology),
             struct.pack("<QQ", ckpt.step, ckpt.examples_seen), _json_block(ckpt.rng_state),
             struct.pack("<I", len(ckpt.params))]
    parts += [_tensor_block(k, v) for k, v in ckpt.params.items()]
    if include_optimizer and ckpt.adam is not None:
        names = list(ckpt.params)
        parts.append(struct.pack("<BQI", 1, ckpt.adam.step, 2 * len(names)))
        parts += [_tensor_block("m:" + k, ckpt.adam.m[k]) for k in names]
        parts += [_tensor_block("v:" + k, ckpt.adam.v[k]) for k in names]
    else:
        parts.append(struct.pack("<B", 0))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise FormatError(f"truncated checkpoint: need {n} bytes", self.off)
        chunk = self.buf[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def json_block(self, what: str):
        start = self.off
        (n,) = self.unpack("<I")
        body = self.take(n)
        (crc,) = self.unpack("<I")
        if zlib.crc32(body) != crc:
            raise ChecksumError(f"{what} block checksum mismatch", start)
        try:
            return json.loads(body.decode("utf-8"))
        except ValueError as exc:
            raise FormatError(f"{what} block is not valid JSON", start) from exc

    def tensor(self):
        start = self.off
        (n,) = self.unpack("<H")
        name = self.take(n).decode("utf-8", errors="replace")
        code, ndim = self.unpack("<BB")
        if code not in _DTYPES:
            raise FormatError(f"tensor {name}: unknown dtype code {code}", start)
        shape = self.unpack(f"<{ndim}I")
        dt = _DTYPES[code]
        data = self.take(int(np.prod(shape, dtype=np.int64)) * dt.itemsize)
        (crc,) = self.unpack("<I")
        if zlib.crc32(self.buf[start:self.off - 4]) != crc:
            raise ChecksumError(f"tensor {name}: checksum mismatch", start)
        arr = np.frombuffer(data, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        return name, arr


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (reader supports {VERSION})", 4)
    topology = r.json_block("topology")
    step, seen = r.unpack("<QQ")
    rng_state = r.json_block("rng")
    (count,) = r.unpack("<I")
    params = dict(r.tensor() for _ in range(count))
    (flag,) = r.unpack("<B")
    adam = None
    if flag == 1:
        adam_step, n = r.unpack("<QI")
        adam = AdamState(step=adam_step)
        for _ in range(n):
            name, arr = r.tensor()
            kind, _, key = name.partition(":")
            if kind not in ("m", "v") or key not in params:
                raise FormatError(f"optimizer tensor {name} does not match a parameter", r.off)
            getattr(adam, kind)[key] = arr
    elif flag != 0:
        raise FormatError(f"bad optimizer flag {flag}", r.off - 1)
    if r.off != len(buf):
        raise FormatError(f"{len(buf) - r.off} trailing bytes", r.off)
    return Checkpoint(topology, params, adam, seen, step, rng_state, version)


def save_checkpoint(path, ckpt: Checkpoint, include_optimizer: bool = True) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt, include_optimizer))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def check_topology(ckpt: Checkpoint, expected: dict) -> None:
    """Raise :class:`CheckpointError` naming every differing topology field."""
    keys = sorted(set(ckpt.topology) | set(expected))
    diffs = [f"{k}: checkpoint={ckpt.topology.get(k)!r} expected={expected.get(k)!r}"
             for k in keys if ckpt.topology.get(k) != expected.get(k)]
    if diffs:
        raise CheckpointError("topology mismatch: " + "; ".join(diffs))
