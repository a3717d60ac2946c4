"""Binary checkpoint container.

Layout (little-endian)::

    b"PSNN"  u16 version  u32 record count
    per record:  u16 name length, UTF-8 name, u8 dtype tag, u8 ndim,
                 u32 dims[ndim], raw values
    metadata:    u32 length, UTF-8 text of ``key = <json value>`` lines

Records and metadata keys are written in sorted order so identical
contents give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"PSNN"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_TAGS = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def encode_metadata(meta: dict) -> str:
    return "".join(f"{k} = {json.dumps(meta[k], sort_keys=True)}\n" for k in sorted(meta))


def decode_metadata(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise CheckpointError(f"metadata line {lineno}: expected 'key = value'")
        out[key] = json.loads(value)
    return out


def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def save_checkpoint(path, arrays: dict, metadata: dict) -> None:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dt = arr.dtype.newbyteorder("<")
        if dt not in _TAGS:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _TAGS[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    meta = encode_metadata(metadata).encode()
    parts.append(struct.pack("<I", len(meta)) + meta)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a PSNN checkpoint")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 10
    arrays = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode()
            pos += n
            tag, ndim = struct.unpack_from("<BB", data, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            dt = _DTYPES[tag]
            size = int(np.prod(shape)) * dt.itemsize
            arrays[name] = np.frombuffer(data, dtype=dt, count=int(np.prod(shape)),
                                         offset=pos).reshape(shape).copy()
            pos += size
        (m,) = struct.unpack_from("<I", data, pos)
        meta = decode_metadata(data[pos + 4:pos + 4 + m].decode())
    except (struct.error, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return arrays, meta
