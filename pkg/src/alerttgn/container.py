"""Flat binary container of named float64/int64 arrays plus a JSON header.

Layout (all integers little-endian)::

    magic      8 bytes   b"ATGNBIN\\0"
    version    u32
    kind       u16 length + utf-8       e.g. "params", "checkpoint", "stream"
    meta       u32 length + utf-8 JSON  (sorted keys, no whitespace)
    count      u32
    count x section:
        name   u16 length + utf-8
        dtype  u8                       0 = float64, 1 = int64
        ndim   u8
        shape  ndim x u64
        data   prod(shape) x 8 bytes, row-major

Sections are written in the order given, so writing the same content twice
produces identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ATGNBIN\0"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_CODES = {np.dtype("float64"): 0, np.dtype("int64"): 1}


class ContainerError(ValueError):
    pass


def dumps(kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    k = kind.encode()
    out += struct.pack("<H", len(k)) + k
    m = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    out += struct.pack("<I", len(m)) + m
    out += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            arr = arr.astype(np.float64) if arr.dtype.kind == "f" else arr.astype(np.int64)
        code = _CODES[arr.dtype]
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<BB", code, arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    return bytes(out)


def loads(buf: bytes, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ContainerError("truncated container")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise ContainerError("not an alerttgn container (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version} (expected {VERSION})")
    (klen,) = struct.unpack("<H", take(2))
    got_kind = bytes(take(klen)).decode()
    if kind is not None and got_kind != kind:
        raise ContainerError(f"expected a {kind!r} container, found {got_kind!r}")
    (mlen,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(mlen)).decode())
    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode()
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise ContainerError(f"section {name!r}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(bytes(take(8 * n)), dtype=_DTYPES[code]).reshape(shape)
        arrays[name] = data.astype(data.dtype.newbyteorder("="))
    if pos != len(view):
        raise ContainerError("trailing bytes after last section")
    meta["_kind"] = got_kind
    return meta, arrays


def save(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(kind, meta, arrays))


def load(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes(), kind)
