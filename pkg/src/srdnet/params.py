"""Named parameter store with paired gradient and Adam-moment buffers,
plus the SRDC binary checkpoint format.

SRDC layout (little-endian throughout):

    magic   4 bytes  "SRDC"
    version u32      currently 1
    count   u32      number of entries
    per entry:
        name_len u16, name bytes (utf-8)
        shape    4 x u32  (N, C, H, W)
        flags    u8   bit0: grad present, bit1: m present, bit2: v present
        value    N*C*H*W float32
        [grad / m / v, each N*C*H*W float32, in that order when flagged]
    step_count u64   optimizer step counter (format v1 trailer)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SRDC"
VERSION = 1

FLAG_GRAD = 1
FLAG_M = 2
FLAG_V = 4


class CheckpointError(ValueError):
    """Raised for malformed SRDC data; carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray


@dataclass
class ParamStore:
    """Ordered map of name -> (value, grad, m, v); single-writer."""

    entries: dict[str, Param] = field(default_factory=dict)
    step_count: int = 0

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self.entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        if value.ndim != 4:
            raise ValueError(f"parameter {name!r} must be rank 4, got shape {value.shape}")
        p = Param(value=value,
                  grad=np.zeros_like(value),
                  m=np.zeros_like(value),
                  v=np.zeros_like(value))
        self.entries[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self) -> list[str]:
        return list(self.entries)

    def zero_grads(self) -> None:
        for p in self.entries.values():
            p.grad[...] = 0

    def total_params(self) -> int:
        return sum(p.value.size for p in self.entries.values())

    def all_finite(self) -> bool:
        return all(np.isfinite(p.value).all() for p in self.entries.values())


def serialize_store(store: ParamStore, destination,
                    include_grad: bool = False, include_moments: bool = False) -> None:
    """Write a store to a path or binary file object."""
    if isinstance(destination, (str, Path)):
        with open(destination, "wb") as f:
            serialize_store(store, f, include_grad, include_moments)
        return
    f = destination
    f.write(MAGIC)
    f.write(struct.pack("<II", VERSION, len(store.entries)))
    flags = (FLAG_GRAD if include_grad else 0) | ((FLAG_M | FLAG_V) if include_moments else 0)
    for name, p in store.entries.items():
        nb = name.encode("utf-8")
        f.write(struct.pack("<H", len(nb)))
        f.write(nb)
        f.write(struct.pack("<4I", *p.value.shape))
        f.write(struct.pack("<B", flags))
        f.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
        if flags & FLAG_GRAD:
            f.write(np.ascontiguousarray(p.grad, dtype="<f4").tobytes())
        if flags & FLAG_M:
            f.write(np.ascontiguousarray(p.m, dtype="<f4").tobytes())
        if flags & FLAG_V:
            f.write(np.ascontiguousarray(p.v, dtype="<f4").tobytes())
    f.write(struct.pack("<Q", store.step_count))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def deserialize_store(source) -> ParamStore:
    """Read a store from a path, binary file object, or bytes."""
    if isinstance(source, (str, Path)):
        data = Path(source).read_bytes()
    elif isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    else:
        data = source.read()

    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}", 4)

    store = ParamStore()
    for i in range(count):
        (name_len,) = r.unpack("<H", f"entry {i} name length")
        name_off = r.pos
        try:
            name = r.take(name_len, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"entry {i} name is not valid utf-8", name_off) from e
        shape_off = r.pos
        shape = r.unpack("<4I", f"entry {i} shape")
        numel = 1
        for s in shape:
            numel *= s
        if numel > (1 << 34):
            raise CheckpointError(f"entry {name!r} shape {shape} is implausibly large", shape_off)
        (flags,) = r.unpack("<B", f"entry {i} flags")
        if flags & ~(FLAG_GRAD | FLAG_M | FLAG_V):
            raise CheckpointError(f"entry {name!r} has unknown flag bits {flags:#x}", r.pos - 1)

        def read_buf(what: str) -> np.ndarray:
            raw = r.take(4 * numel, what)
            return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()

        value = read_buf(f"entry {name!r} values")
        if name in store:
            raise CheckpointError(f"duplicate entry name {name!r}", name_off)
        p = store.add(name, value)
        if flags & FLAG_GRAD:
            p.grad = read_buf(f"entry {name!r} gradients")
        if flags & FLAG_M:
            p.m = read_buf(f"entry {name!r} first moments")
        if flags & FLAG_V:
            p.v = read_buf(f"entry {name!r} second moments")
    (store.step_count,) = r.unpack("<Q", "step count")
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after checkpoint", r.pos)
    return store
