"""Binary checkpoint format (all integers little-endian)::

    b"INSG"  u16 version
    u32 len  spec (canonical JSON, utf-8)
    u32 number of records, then per record:
        u16 len  name (utf-8)
        u8 rank  u32 dims[rank]
        f64 data[prod(dims)]

Batch-norm running statistics are ordinary records named ``*.running_mean``
and ``*.running_var``.
"""

from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import MagicError, SpecMismatchError, TruncatedCheckpointError, VersionError
from .network import Model, NetworkSpec, build_model

MAGIC = b"INSG"
VERSION = 1


def to_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    spec = model.spec.canonical().encode("utf-8")
    buf.write(struct.pack("<I", len(spec)))
    buf.write(spec)
    params = model.parameters()
    buf.write(struct.pack("<I", len(params)))
    for p in params:
        name = p.name.encode("utf-8")
        buf.write(struct.pack("<H", len(name)))
        buf.write(name)
        buf.write(struct.pack("<B", p.value.ndim))
        buf.write(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        buf.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(model: Model, path: str | Path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(model))
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_spec(data: bytes) -> tuple[NetworkSpec, _Reader]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise MagicError("not an INSG checkpoint (bad magic bytes)")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (n,) = r.unpack("<I")
    spec = NetworkSpec.from_dict(json.loads(r.take(n).decode("utf-8")))
    return spec, r


def from_bytes(data: bytes, spec: NetworkSpec | None = None) -> Model:
    stored, r = read_spec(data)
    if spec is not None and spec.canonical() != stored.canonical():
        raise SpecMismatchError(f"checkpoint spec {stored.canonical()} differs from requested {spec.canonical()}")
    model = build_model(stored)
    table = model.parameter_table()
    (count,) = r.unpack("<I")
    if count != len(table):
        raise SpecMismatchError(f"checkpoint holds {count} parameters, model has {len(table)}")
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        raw = r.take(8 * int(np.prod(dims, dtype=np.int64)))
        p = table.get(name)
        if p is None or p.value.shape != tuple(dims):
            raise SpecMismatchError(f"record {name!r} {dims} does not fit the model")
        p.value[...] = np.frombuffer(raw, dtype="<f8").reshape(dims)
    if r.pos != len(data):
        raise SpecMismatchError(f"{len(data) - r.pos} trailing bytes after the last record")
    return model


def load_checkpoint(path: str | Path, spec: NetworkSpec | None = None) -> Model:
    """Rebuild a model; if ``spec`` is given it must equal the embedded one."""
    return from_bytes(Path(path).read_bytes(), spec)
