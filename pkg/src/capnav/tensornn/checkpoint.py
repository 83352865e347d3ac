"""Binary checkpoints.

Layout (little-endian)::

    b"CAPNN01"  | u32 version | u64 len | metadata JSON | u64 len | float64 blob

The metadata JSON holds the model description and the ordered ``[name, shape]``
parameter table describing how the blob splits back into arrays.
"""
from __future__ import annotations

import json
import os
import struct
from typing import Any

import numpy as np

MAGIC = b"CAPNN01"
VERSION = 1


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode_checkpoint(spec: dict[str, Any], state: dict[str, np.ndarray]) -> bytes:
    names = list(state)
    table = [[n, list(np.shape(state[n]))] for n in names]
    meta = dict(spec)
    meta["params"] = table
    spec_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(state[n], dtype="<f8").tobytes() for n in names)
    return b"".join([
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<Q", len(spec_bytes)),
        spec_bytes,
        struct.pack("<Q", len(blob)),
        blob,
    ])


def decode_checkpoint(buf: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    off = len(MAGIC)
    if len(buf) < off + 4:
        raise FormatError("truncated before version", off)
    (version,) = struct.unpack_from("<I", buf, off)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", off)
    off += 4
    if len(buf) < off + 8:
        raise FormatError("truncated before spec length", off)
    (n_spec,) = struct.unpack_from("<Q", buf, off)
    off += 8
    if len(buf) < off + n_spec:
        raise FormatError("truncated spec", len(buf))
    try:
        spec = json.loads(buf[off: off + n_spec].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt spec JSON: {exc}", off) from None
    off += n_spec
    if len(buf) < off + 8:
        raise FormatError("truncated before parameter blob length", off)
    (n_blob,) = struct.unpack_from("<Q", buf, off)
    off += 8
    table = spec.pop("params", None)
    if not isinstance(table, list):
        raise FormatError("spec has no parameter table", len(MAGIC) + 12)
    expected = 8 * sum(int(np.prod(shape)) for _, shape in table)
    if n_blob != expected:
        raise FormatError(f"blob length {n_blob} does not match parameter table ({expected})", off - 8)
    if len(buf) != off + n_blob:
        raise FormatError(f"file length {len(buf)} != expected {off + n_blob}", min(len(buf), off + n_blob))
    flat = np.frombuffer(buf, dtype="<f8", count=n_blob // 8, offset=off)
    state: dict[str, np.ndarray] = {}
    pos = 0
    for name, shape in table:
        n = int(np.prod(shape))
        state[name] = flat[pos: pos + n].astype(np.float64).reshape(shape)
        pos += n
    return spec, state


def save_checkpoint(path, spec: dict[str, Any], state: dict[str, np.ndarray]) -> None:
    data = encode_checkpoint(spec, state)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
