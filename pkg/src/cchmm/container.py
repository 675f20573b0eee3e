"""Portable on-disk array container: meta.json plus raw little-endian f64 files.

Layout of a container directory:
    meta.json              {name: {dtype, shape, file, byte_order}}
    arrays/<name>.bin      row-major float64, little-endian

All floats live in the binary files; JSON carries only integers and strings,
so round-trips are byte-identical.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import BundleFormatError


def dump_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path: str):
    if not os.path.exists(path):
        raise BundleFormatError(f"missing file: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise BundleFormatError(f"corrupt JSON in {path}: {e}") from e


def save_arrays(directory: str, arrays: dict[str, np.ndarray]) -> None:
    os.makedirs(os.path.join(directory, "arrays"), exist_ok=True)
    meta = {}
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        rel = f"arrays/{name}.bin"
        with open(os.path.join(directory, rel), "wb") as fh:
            fh.write(arr.astype("<f8", copy=False).tobytes())
        meta[name] = {
            "dtype": "f64",
            "shape": [int(s) for s in arr.shape],
            "file": rel,
            "byte_order": "little",
        }
    dump_json(os.path.join(directory, "meta.json"), meta)


def load_arrays(directory: str) -> dict[str, np.ndarray]:
    meta = read_json(os.path.join(directory, "meta.json"))
    arrays = {}
    for name, entry in meta.items():
        if entry.get("dtype") != "f64" or entry.get("byte_order") != "little":
            raise BundleFormatError(f"array '{name}': unsupported format {entry}")
        path = os.path.join(directory, entry["file"])
        if not os.path.exists(path):
            raise BundleFormatError(f"array '{name}': missing file {entry['file']}")
        shape = tuple(int(s) for s in entry["shape"])
        expected = int(np.prod(shape)) * 8 if shape else 8
        actual = os.path.getsize(path)
        if actual != expected:
            raise BundleFormatError(
                f"array '{name}': file {entry['file']} holds {actual} bytes, "
                f"expected {expected} for shape {list(shape)}"
            )
        with open(path, "rb") as fh:
            data = np.frombuffer(fh.read(), dtype="<f8")
        arrays[name] = data.reshape(shape).astype(np.float64)
    return arrays
