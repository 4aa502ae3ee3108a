"""Binary weight container.

Layout (all integers little-endian)::

    magic      8 bytes   b"TOPOWTS\\x00"
    version    uint32    currently 1
    count      uint32    number of entries
    entries    count x { name_len uint16, name utf-8,
                         ndim uint8, dims uint32 * ndim,
                         values float32 * prod(dims) }

Entries are written in the module's ``state_dict`` order, which covers
trainable parameters followed by batch-normalization running statistics.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Union

import numpy as np

MAGIC = b"TOPOWTS\x00"
VERSION = 1


class WeightFormatError(ValueError):
    pass


def dumps_state(state: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, value in state.items():
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads_state(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if blob[:8] != MAGIC:
        raise WeightFormatError("not a weight container (bad magic)")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise WeightFormatError(f"unsupported container version {version}")
    offset = 16
    state = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(shape).copy()
        offset += 4 * size
    if offset != len(blob):
        raise WeightFormatError(f"{len(blob) - offset} trailing bytes after last entry")
    return state


def save_weights(module, path: Union[str, Path]) -> None:
    Path(path).write_bytes(dumps_state(module.state_dict()))


def load_weights(module, path: Union[str, Path]) -> None:
    module.load_state_dict(loads_state(Path(path).read_bytes()))
