"""Deterministic self-describing checkpoint format.

Layout: magic line, one JSON header line (sorted keys) describing metadata and
array dtypes/shapes in order, then the raw C-order array bytes concatenated.
Byte-identical for identical contents, unlike zip-based formats.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"KGALIGN-CKPT-1\n"


def save_arrays(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    names = sorted(arrays)
    header = {
        "meta": meta,
        "arrays": [
            {"name": n, "dtype": str(arrays[n].dtype), "shape": list(arrays[n].shape)}
            for n in names
        ],
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n]).tobytes())


def load_arrays(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        header = json.loads(fh.readline().decode("utf-8"))
        arrays = {}
        for spec in header["arrays"]:
            dtype = np.dtype(spec["dtype"])
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            buf = fh.read(count * dtype.itemsize)
            arrays[spec["name"]] = np.frombuffer(buf, dtype=dtype).reshape(spec["shape"]).copy()
    return header["meta"], arrays
