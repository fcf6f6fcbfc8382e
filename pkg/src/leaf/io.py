"""Self-describing binary array files shared by checkpoints and prediction dumps.

Layout: the 5-byte magic ``LEAF1`` followed by one record per array::

    u32 name_len | name (utf-8) | u32 rank | u64 dims[rank] | f64 data (little-endian, row-major)

All integers are little-endian.  Records run to end of file.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"LEAF1"


def write_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8")  # tobytes() is row-major; keeps 0-d arrays 0-d
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def read_arrays(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:5] != MAGIC:
        raise ValueError(f"{path}: not a LEAF1 file")
    pos, out = 5, {}

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ValueError(f"{path}: truncated record")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    while pos < len(data):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    return out
