"""Checkpoint container: magic, version, JSON header, then raw little-endian float64 arrays.

Layout::

    b"PCASCKPT" | u32 version | u64 header length | header JSON (utf-8) | data

The header holds ``tensors`` (name -> {shape, offset} with byte offsets into the
data section), ``config`` and free-form ``meta``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PCASCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(arrays: dict[str, np.ndarray], config: dict, meta: dict | None = None) -> bytes:
    table, chunks, offset = {}, [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")
        table[name] = {"shape": list(arr.shape), "offset": offset}
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"format": VERSION, "tensors": table, "config": config, "meta": meta or {}},
                        sort_keys=True).encode()
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)


def decode(raw: bytes) -> tuple[dict[str, np.ndarray], dict, dict]:
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<IQ", raw, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = len(MAGIC) + 12
    header = json.loads(raw[start:start + hlen])
    data = memoryview(raw)[start + hlen:]
    arrays = {}
    for name, entry in header["tensors"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = entry["offset"]
        if off + 8 * count > len(data):
            raise CheckpointError(f"tensor {name} runs past the end of the file")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
    return arrays, header["config"], header["meta"]


def save(path: Path, arrays: dict[str, np.ndarray], config: dict, meta: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(arrays, config, meta))
    tmp.replace(path)


def load(path: Path) -> tuple[dict[str, np.ndarray], dict, dict]:
    return decode(Path(path).read_bytes())
