"""Binary encodings shared by checkpoints, datasets, attack batches and bundles.

NSCK tensor stream::

    b"NSCK" | version u32 | { name_len u32 | name utf-8 | rank u32 | dims u32*rank | f32 LE payload }*

The stream has no entry count; a reader stops at end of buffer (or at the end
of the enclosing frame when the stream is embedded in a larger file).
"""

from __future__ import annotations

import hashlib
import struct
from typing import Mapping

import numpy as np

NSCK_MAGIC = b"NSCK"
NSCK_VERSION = 1
HASH_PREFIX = "meta.config_hash."


class FormatError(ValueError):
    """Malformed or truncated binary file."""


class Reader:
    """Cursor over a bytes buffer that raises FormatError on truncation."""

    def __init__(self, buf: bytes, offset: int = 0, end: int | None = None):
        self.buf = buf
        self.pos = offset
        self.end = len(buf) if end is None else end

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > self.end:
            raise FormatError(f"truncated data: wanted {n} bytes at offset {self.pos}, have {self.end - self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def u32(self) -> int:
        return self.unpack("I")[0]

    def remaining(self) -> int:
        return self.end - self.pos


def encode_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f4")
    raw_name = name.encode("utf-8")
    parts = [struct.pack("<I", len(raw_name)), raw_name, struct.pack("<I", arr.ndim)]
    parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    parts.append(arr.tobytes())
    return b"".join(parts)


def decode_tensor(r: Reader) -> tuple[str, np.ndarray]:
    name = r.take(r.u32()).decode("utf-8")
    rank = r.u32()
    dims = r.unpack(f"{rank}I") if rank else ()
    count = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
    return name, arr


def encode_nsck(entries: Mapping[str, np.ndarray], config_hash: str | None = None) -> bytes:
    parts = [NSCK_MAGIC, struct.pack("<I", NSCK_VERSION)]
    for name, arr in entries.items():
        parts.append(encode_tensor(name, arr))
    if config_hash:
        parts.append(encode_tensor(HASH_PREFIX + config_hash, np.zeros((0,), dtype=np.float32)))
    return b"".join(parts)


def decode_nsck(buf: bytes, offset: int = 0, end: int | None = None) -> tuple[dict[str, np.ndarray], str | None]:
    r = Reader(buf, offset, end)
    if r.take(4) != NSCK_MAGIC:
        raise FormatError("bad magic: not an NSCK stream")
    version = r.u32()
    if version != NSCK_VERSION:
        raise FormatError(f"unsupported NSCK version {version}")
    entries: dict[str, np.ndarray] = {}
    config_hash = None
    while r.remaining():
        name, arr = decode_tensor(r)
        if name.startswith(HASH_PREFIX):
            config_hash = name[len(HASH_PREFIX) :]
        else:
            entries[name] = arr
    return entries, config_hash


def frame(payload: bytes) -> bytes:
    """Length-prefix a section so several streams can share one file."""
    return struct.pack("<Q", len(payload)) + payload


def unframe(r: Reader) -> tuple[int, int]:
    (n,) = r.unpack("Q")
    start = r.pos
    r.take(n)
    return start, start + n


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
