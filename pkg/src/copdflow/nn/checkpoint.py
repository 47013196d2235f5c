"""Binary checkpoint format "CFN1".

Layout (all integers little-endian)::

    b"CFN1" | version u32 | tensor count u32
    per tensor: name length u16 | UTF-8 name | rank u8 | dims u32 * rank | float32 data

Tensors are written in the order given (dict insertion order).
"""

import io
import struct
from pathlib import Path

import numpy as np

from ..errors import ParseError

MAGIC = b"CFN1"
VERSION = 1


def dumps(tensors):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, value in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(value)
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r} cannot be encoded")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(data, source="<bytes>"):
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ParseError(f"{source}: truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ParseError(f"{source}: bad magic, not a CFN1 checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ParseError(f"{source}: unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"{source}: tensor name is not UTF-8") from exc
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(view):
        raise ParseError(f"{source}: trailing bytes after last tensor")
    return out


def save(path, tensors):
    Path(path).write_bytes(dumps(tensors))


def load(path):
    path = Path(path)
    return loads(path.read_bytes(), source=str(path))
