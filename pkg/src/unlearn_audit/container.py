"""Self-describing binary container for datasets, checkpoints and SAEs.

Layout (all integers little-endian)::

    magic      4 bytes  b"UAUD"
    version    u16
    kind       u16 length + utf-8
    metadata   u32 length + canonical JSON (sorted keys)
    n_arrays   u32
    per array: u16 name length + utf-8 name, u8 dtype code, u8 ndim,
               ndim x u64 dims, raw little-endian data

Writing the same content twice yields identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import InputError

MAGIC = b"UAUD"
VERSION = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i4"), 2: np.dtype("<i8")}
_CODES = {dt: code for code, dt in _DTYPES.items()}


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def encode(kind: str, metadata: dict, arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    kind_b = kind.encode()
    parts += [struct.pack("<H", len(kind_b)), kind_b]
    meta_b = canonical_json(metadata)
    parts += [struct.pack("<I", len(meta_b)), meta_b, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise InputError(f"unsupported dtype {arr.dtype} for array {name!r}")
        name_b = name.encode()
        parts += [struct.pack("<H", len(name_b)), name_b, struct.pack("<BB", _CODES[dt], arr.ndim)]
        parts += [struct.pack("<Q", n) for n in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def decode(blob: bytes, expect_kind: str | None = None) -> tuple[str, dict, dict[str, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise InputError("not a container file (bad magic)")
    pos = 4

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, blob, pos)
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<H")
    if version != VERSION:
        raise InputError(f"unsupported container version {version}")
    (klen,) = take("<H")
    kind = blob[pos:pos + klen].decode()
    pos += klen
    if expect_kind is not None and kind != expect_kind:
        raise InputError(f"expected a {expect_kind!r} container, found {kind!r}")
    (mlen,) = take("<I")
    metadata = json.loads(blob[pos:pos + mlen])
    pos += mlen
    (count,) = take("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        code, ndim = take("<BB")
        shape = take("<" + "Q" * ndim) if ndim else ()
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(blob):
        raise InputError("trailing bytes after container payload")
    return kind, metadata, arrays


def write(path, kind: str, metadata: dict, arrays: dict[str, np.ndarray]) -> str:
    """Write a container and return the sha256 hex digest of its bytes."""
    blob = encode(kind, metadata, arrays)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def read(path, expect_kind: str | None = None):
    return decode(Path(path).read_bytes(), expect_kind)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
