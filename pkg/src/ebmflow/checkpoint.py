"""Single-file checkpoint format: JSON header line + named float64 blocks.

Layout:
    line 1   UTF-8 JSON object terminated by '\\n' (must contain "format_version")
    then, per array, in insertion order:
        uint32 LE   name length in bytes
        bytes       array name (UTF-8)
        uint32 LE   rank
        uint32 LE * rank   dimension sizes
        float64 LE * prod(dims)   row-major payload

Round trips are byte-exact: loading and re-saving reproduces the file.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, header: dict, arrays: dict) -> None:
    header = dict(header)
    header["format_version"] = header.get("format_version", FORMAT_VERSION)
    blob = bytearray()
    blob += json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<I", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += arr.astype("<f8", copy=False).tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path):
    """Return (header, arrays) where arrays preserves on-disk order."""
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise CheckpointError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: bad header ({err})") from err
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version!r} unsupported (expected {FORMAT_VERSION})"
        )
    arrays = {}
    offset = newline + 1
    while offset < len(raw):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", raw, offset) if rank else ()
        offset += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
        arrays[name] = arr.astype(np.float64, copy=True)
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after last array")
    return header, arrays
