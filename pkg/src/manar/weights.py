"""Binary weight container.

Layout (all integers unsigned 32-bit little-endian)::

    b"MANARWTS" | version | entry count
    per entry: name length | UTF-8 name | dtype code (0 = float32) | rank | dims... | payload

Payloads are row-major little-endian float32, ``4 * prod(dims)`` bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MANARWTS"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4")}


class FormatError(ValueError):
    pass


def _u32(x: int) -> bytes:
    return struct.pack("<I", x)


def encode(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, _u32(VERSION), _u32(len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4", order="C")  # keeps rank-0 shapes
        parts += [_u32(len(raw)), raw, _u32(0), _u32(arr.ndim)]
        parts += [_u32(s) for s in arr.shape]
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def save_weights(path, arrays: Mapping[str, np.ndarray]) -> None:
    """Write ``arrays`` (stored as float32) to ``path``."""
    data = encode({k: getattr(v, "data", v) for k, v in arrays.items()})
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write weights to {path}: {exc}") from exc


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated container while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode(buf: bytes) -> dict[str, np.ndarray]:
    rd = _Reader(buf)
    if rd.take(len(MAGIC), "magic") != MAGIC:
        raise FormatError("bad magic: not a MANARWTS container")
    version = rd.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    count = rd.u32("entry count")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        raw = rd.take(rd.u32(f"entry {i} name length"), f"entry {i} name")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"entry {i}: name is not valid UTF-8") from exc
        if name in out:
            raise FormatError(f"entry {name!r}: duplicate name")
        code = rd.u32(f"entry {name!r} dtype")
        if code not in DTYPE_CODES:
            raise FormatError(f"entry {name!r}: unknown dtype code {code}")
        dtype = DTYPE_CODES[code]
        rank = rd.u32(f"entry {name!r} rank")
        dims = tuple(rd.u32(f"entry {name!r} dims") for _ in range(rank))
        nbytes = dtype.itemsize * int(np.prod(dims, dtype=np.int64))
        payload = rd.take(nbytes, f"entry {name!r} payload")
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(np.float32)
    if rd.pos != len(buf):
        raise FormatError(f"{len(buf) - rd.pos} trailing bytes after last entry")
    return out


def load_weights(path) -> dict[str, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read weights from {path}: {exc}") from exc
    try:
        return decode(buf)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
