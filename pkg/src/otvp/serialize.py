"""Binary tensor container used for checkpoints, feature banks and prompts.

Layout (all integers little-endian):

    8 bytes   magic "OTVP CKP"
    u32       format version (currently 1)
    u32       tensor count
    per tensor:
        u16       name length in bytes
        bytes     UTF-8 name
        u8        ndim
        ndim*u64  dims
        f64*prod  payload, row-major

Non-tensor metadata (configs, seeds) travels as JSON encoded to UTF-8 and
stored byte-per-float64 in a reserved tensor, so the container never needs
a second value type.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"OTVP CKP"
VERSION = 1

CONFIG_KEY = "__config__"
META_KEY = "__meta__"


class FormatError(Exception):
    """Raised when a file does not parse as a valid container."""


def serialize_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    """Encode a name -> array mapping. Iteration order of the dict is kept."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        # keep 0-d shapes: ascontiguousarray would promote them to 1-d
        a = np.asarray(arr, dtype=np.float64, order="C")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise FormatError(f"tensor name too long: {len(nb)} bytes")
        if a.ndim > 0xFF:
            raise FormatError(f"tensor {name!r} has too many dims: {a.ndim}")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.astype("<f8", copy=False).tobytes())
    return b"".join(parts)


def parse_tensors(buf: bytes) -> dict[str, np.ndarray]:
    """Decode a container produced by serialize_tensors.

    Raises FormatError on bad magic, unknown version, truncation, trailing
    bytes, duplicate names or non-finite payload values.
    """
    n = len(buf)
    if n < len(MAGIC) + 8:
        raise FormatError("file too short for header")
    if buf[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic")
    version, count = struct.unpack_from("<II", buf, len(MAGIC))
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    off = len(MAGIC) + 8
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        if off + 2 > n:
            raise FormatError("truncated tensor name length")
        (name_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        if off + name_len > n:
            raise FormatError("truncated tensor name")
        try:
            name = buf[off : off + name_len].decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError("tensor name is not valid UTF-8") from e
        off += name_len
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}")
        if off + 1 > n:
            raise FormatError(f"truncated ndim for tensor {name!r}")
        ndim = buf[off]
        off += 1
        if off + 8 * ndim > n:
            raise FormatError(f"truncated dims for tensor {name!r}")
        dims = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        size = 1
        for d in dims:
            size *= d
        if off + 8 * size > n:
            raise FormatError(f"truncated payload for tensor {name!r}")
        flat = np.frombuffer(buf, dtype="<f8", count=size, offset=off)
        off += 8 * size
        arr = flat.reshape(dims).astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"non-finite values in tensor {name!r}")
        out[name] = arr
    if off != n:
        raise FormatError(f"{n - off} trailing bytes after last tensor")
    return out


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(serialize_tensors(tensors))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    p = Path(path)
    if not p.exists():
        raise FormatError(f"no such file: {p}")
    return parse_tensors(p.read_bytes())


def encode_json_tensor(obj) -> np.ndarray:
    """JSON-encode obj and widen the UTF-8 bytes to a float64 vector."""
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float64)


def decode_json_tensor(arr: np.ndarray):
    a = np.asarray(arr)
    if a.ndim != 1:
        raise FormatError("metadata tensor must be one-dimensional")
    vals = np.round(a).astype(np.int64)
    if np.any(vals < 0) or np.any(vals > 255) or not np.allclose(a, vals):
        raise FormatError("metadata tensor does not hold byte values")
    try:
        return json.loads(vals.astype(np.uint8).tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError("metadata tensor does not decode to JSON") from e


def tensors_hash(tensors: dict[str, np.ndarray]) -> str:
    """sha256 over the serialized container; used to detect parameter drift."""
    return hashlib.sha256(serialize_tensors(tensors)).hexdigest()
