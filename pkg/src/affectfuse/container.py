"""Single-file binary container shared by datasets and checkpoints.

Byte layout (all integers little-endian)::

    magic      4 bytes  b"AFUS"
    version    u16      currently 1
    kind       u16      0 = dataset, 1 = checkpoint
    meta_len   u32
    meta       meta_len bytes of UTF-8 ``key = value`` lines
    meta_hash  32 bytes sha256(meta); its hex prefix is the fingerprint
    n_records  u32
    n_records times:
        name_len u16, name (UTF-8)
        dtype    u8     0 = float64, 1 = int64, 2 = uint8
        ndim     u8
        shape    ndim x u32
        payload  prod(shape) x itemsize bytes, row-major
    trailer    32 bytes sha256 of every preceding byte
"""
from __future__ import annotations

import hashlib
import os
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"AFUS"
VERSION = 1
KIND_DATASET = 0
KIND_CHECKPOINT = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
_CODES = {"f": 0, "i": 1, "u": 2, "b": 2}


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class IntegrityWarning(UserWarning):
    pass


@dataclass
class Container:
    kind: int
    meta: str
    records: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.meta.encode("utf-8")).hexdigest()[:12]


def encode(c: Container) -> bytes:
    meta = c.meta.encode("utf-8")
    parts = [MAGIC, struct.pack("<HHI", VERSION, c.kind, len(meta)), meta, hashlib.sha256(meta).digest(),
             struct.pack("<I", len(c.records))]
    for name, arr in c.records.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype.kind)
        if code is None:
            raise TypeError(f"record {name!r}: unsupported dtype {arr.dtype}")
        arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes, expected_kind: int | None = None) -> Container:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic bytes", 0)
    version, kind, meta_len = r.unpack("<HHI", "header")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if expected_kind is not None and kind != expected_kind:
        raise FormatError(f"container kind {kind} where {expected_kind} was expected", 6)
    meta_start = r.pos
    meta_raw = r.take(meta_len, "metadata")
    try:
        meta = meta_raw.decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("metadata is not UTF-8", meta_start) from None
    stored = r.take(32, "metadata hash")
    (n_records,) = r.unpack("<I", "record count")
    records: dict[str, np.ndarray] = {}
    for _ in range(n_records):
        start = r.pos
        (name_len,) = r.unpack("<H", "record name length")
        try:
            name = r.take(name_len, "record name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("record name is not UTF-8", start) from None
        code, ndim = r.unpack("<BB", "record dtype")
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code}", r.pos - 2)
        shape = r.unpack(f"<{ndim}I", "record shape")
        dtype = _DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64))
        payload = r.take(count * dtype.itemsize, f"payload of {name!r}")
        if name in records:
            raise FormatError(f"duplicate record {name!r}", start)
        records[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    body_end = r.pos
    trailer = r.take(32, "checksum")
    if r.pos != len(buf):
        raise FormatError("trailing bytes after checksum", r.pos)
    if hashlib.sha256(buf[:body_end]).digest() != trailer:
        raise FormatError("checksum mismatch; file is corrupted", body_end)
    if hashlib.sha256(meta_raw).digest() != stored:
        warnings.warn("stored fingerprint does not match metadata", IntegrityWarning, stacklevel=2)
    return Container(kind, meta, records)


def write(path, c: Container) -> None:
    """Encode fully, then move into place so readers never see a half-written file."""
    data = encode(c)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read(path, expected_kind: int | None = None, expected_fingerprint: str | None = None) -> Container:
    with open(path, "rb") as fh:
        buf = fh.read()
    c = decode(buf, expected_kind)
    if expected_fingerprint is not None and c.fingerprint != expected_fingerprint:
        warnings.warn(f"fingerprint {c.fingerprint} differs from expected {expected_fingerprint}",
                      IntegrityWarning, stacklevel=2)
    return c


def parse_meta(meta: str) -> dict[str, str]:
    out = {}
    for line in meta.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out
