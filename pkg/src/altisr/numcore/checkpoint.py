"""Flat binary parameter checkpoints.

Layout (all integers little-endian):

    magic   8 bytes  b"ALTISR01"
    version u32      currently 1
    then, per parameter, in set order until EOF:
        name_len u32, name UTF-8, rank u32, dims rank*u64, payload f64 LE

Round-trips are bit-exact.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .params import ParamSet
from .tensor import Tensor

MAGIC = b"ALTISR01"
VERSION = 1


def save_params(params: ParamSet, path: Union[str, Path]) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, t in params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def load_params(path: Union[str, Path]) -> ParamSet:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    params = ParamSet()
    off = 12
    while off < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(dims)
        off += 8 * count
        params.add(name, Tensor(data.astype(np.float64), requires_grad=True))
    return params
