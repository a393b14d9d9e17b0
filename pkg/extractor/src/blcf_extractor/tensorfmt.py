"""Writer for the binary tensor format and JSONL manifest the search engine
consumes. The layout is the wire contract between the two components:
magic ``BLCF``, version byte 1, ndim and dims as unsigned 32-bit
little-endian, payload as little-endian float32, row-major.
"""

import json
import struct

import numpy as np

MAGIC = b"BLCF"
FORMAT_VERSION = 1


def write_tensor(path, tensor: np.ndarray):
    arr = np.ascontiguousarray(tensor, dtype=np.float32)
    if arr.ndim not in (2, 3):
        raise ValueError(f"tensor must be 2-D or 3-D, got ndim={arr.ndim}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{path}: non-finite values")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<B", FORMAT_VERSION))
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC or blob[4] != FORMAT_VERSION:
        raise ValueError(f"{path}: not a BLCF tensor")
    (ndim,) = struct.unpack_from("<I", blob, 5)
    dims = struct.unpack_from(f"<{ndim}I", blob, 9)
    return np.frombuffer(blob, dtype="<f4", offset=9 + 4 * ndim).reshape(dims).copy()


def write_manifest(path, entries: list[dict]):
    with open(path, "w", encoding="utf-8") as f:
        for entry in entries:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
