"""AMTN v1 tensor files and parameter bundles.

Layout: ``b"AMTN"``, version byte ``0x01``, four little-endian uint32 dims
``N, C, H, W``, then ``N*C*H*W`` little-endian float32 values in row-major order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Mapping, Tuple, Union

import numpy as np

MAGIC = b"AMTN"
VERSION = 1
_HEADER = struct.Struct("<4sB4I")

PathLike = Union[str, Path]


class AmtnFormatError(ValueError):
    """A file is not a well-formed AMTN v1 tensor."""


def encode_amtn(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.ndim != 4:
        raise ValueError(f"AMTN stores 4-D tensors, got shape {arr.shape}")
    if any(d < 1 for d in arr.shape):
        raise ValueError(f"AMTN dims must be >= 1, got {arr.shape}")
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return _HEADER.pack(MAGIC, VERSION, *arr.shape) + payload


def decode_amtn(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise AmtnFormatError(f"{source}: truncated header ({len(blob)} bytes)")
    magic, version, n, c, h, w = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise AmtnFormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise AmtnFormatError(f"{source}: unsupported version {version}")
    count = n * c * h * w
    if count == 0:
        raise AmtnFormatError(f"{source}: zero-sized dimension in {(n, c, h, w)}")
    expected = _HEADER.size + 4 * count
    if len(blob) != expected:
        raise AmtnFormatError(f"{source}: payload is {len(blob)} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=_HEADER.size)
    return data.astype(np.float32).reshape(n, c, h, w)


def write_amtn(path: PathLike, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_amtn(array))


def read_amtn(path: PathLike) -> np.ndarray:
    path = Path(path)
    return decode_amtn(path.read_bytes(), source=path.name)


def _as_4d(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim > 4:
        raise ValueError(f"cannot store {arr.ndim}-D array in AMTN")
    if arr.size == 0:
        # empty bundles (e.g. no cascade boundaries) are recorded in the manifest only
        return arr
    return arr.reshape((1,) * (4 - arr.ndim) + arr.shape)


def save_bundle(directory: PathLike, tensors: Mapping[str, np.ndarray], meta: Mapping) -> Path:
    """Write one AMTN file per named tensor plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        fname = name.replace("/", "__") + ".amtn" if arr.size else None
        if fname:
            write_amtn(directory / fname, _as_4d(arr))
        entries[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {"format": "AMTN", "version": VERSION, "meta": dict(meta), "tensors": entries}
    out = directory / "manifest.json"
    out.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_bundle(directory: PathLike) -> Tuple[Dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    tensors = {}
    for name, entry in manifest["tensors"].items():
        shape = tuple(entry["shape"])
        if entry["file"] is None:
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            tensors[name] = read_amtn(directory / entry["file"]).reshape(shape)
    return tensors, manifest["meta"]
