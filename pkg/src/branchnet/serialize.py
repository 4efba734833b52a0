"""Matrix blocks and heatmaps on disk.

Binary blocks are raw little-endian float64 in row-major order; the shape
lives in the accompanying JSON header, so a block can be read back with
``np.fromfile(path, "<f8").reshape(shape)`` by any tool.
"""

from __future__ import annotations

import os

import numpy as np

BLOCK_DTYPE = "<f8"


def write_matrix(path, arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype=BLOCK_DTYPE)
    with open(path, "wb") as fh:
        fh.write(arr.tobytes(order="C"))
    return {"file": os.path.basename(path), "shape": list(arr.shape), "dtype": BLOCK_DTYPE, "order": "C"}


def read_matrix(path, meta: dict) -> np.ndarray:
    if meta.get("dtype", BLOCK_DTYPE) != BLOCK_DTYPE:
        raise ValueError(f"unsupported block dtype {meta.get('dtype')!r}")
    data = np.fromfile(path, dtype=BLOCK_DTYPE)
    shape = tuple(meta["shape"])
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: expected {np.prod(shape)} values, found {data.size}")
    return data.reshape(shape).astype(np.float64)


def write_csv_matrix(path, arr: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in np.atleast_2d(arr):
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


def write_heatmap(stem, w: np.ndarray) -> dict:
    """Write |w| as CSV and as an 8-bit plain PGM; returns the recorded extrema.

    Gray level 255 is max |w|. The PGM header comment carries the signed
    min/max and the abs max so the scale can be reconstructed exactly.
    """
    w = np.asarray(w, dtype=np.float64)
    a = np.abs(w)
    info = {
        "min": float(w.min()),
        "max": float(w.max()),
        "abs_max": float(a.max()),
        "rows": int(w.shape[0]),
        "cols": int(w.shape[1]),
    }
    write_csv_matrix(f"{stem}.csv", a)
    levels = np.zeros_like(a, dtype=np.int64) if info["abs_max"] == 0 else np.rint(a / info["abs_max"] * 255).astype(np.int64)
    with open(f"{stem}.pgm", "w", encoding="ascii") as fh:
        fh.write("P2\n")
        fh.write(f"# min={info['min']!r} max={info['max']!r} abs_max={info['abs_max']!r}\n")
        fh.write(f"{a.shape[1]} {a.shape[0]}\n255\n")
        for row in levels:
            fh.write(" ".join(str(int(v)) for v in row))
            fh.write("\n")
    return info
