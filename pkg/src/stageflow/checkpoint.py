"""Binary tensor container.

Layout: magic "RVPK", u32 format version, u32 tensor count, then for each
tensor a length-prefixed UTF-8 name, a count-prefixed list of u32 extents,
and the row-major little-endian f64 data. Round-trips are bit-exact.

A JSON manifest rides along as a reserved tensor "__manifest__" whose f64
values are the UTF-8 bytes of the JSON text (integers < 256 are exact in
f64, so this stays bit-exact within the tensor-only container format).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RVPK"
VERSION = 1
MANIFEST_KEY = "__manifest__"


def _write_u32(fh, value: int) -> None:
    fh.write(struct.pack("<I", value))


def _read_u32(fh) -> int:
    raw = fh.read(4)
    if len(raw) != 4:
        raise ValueError("truncated container")
    return struct.unpack("<I", raw)[0]


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        _write_u32(fh, VERSION)
        _write_u32(fh, len(tensors))
        for name, arr in tensors.items():
            encoded = name.encode("utf-8")
            _write_u32(fh, len(encoded))
            fh.write(encoded)
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            _write_u32(fh, arr.ndim)
            for extent in arr.shape:
                _write_u32(fh, extent)
            fh.write(arr.astype("<f8").tobytes())


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: bad magic, not a tensor container")
        version = _read_u32(fh)
        if version != VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        count = _read_u32(fh)
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            name = fh.read(_read_u32(fh)).decode("utf-8")
            ndim = _read_u32(fh)
            shape = tuple(_read_u32(fh) for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").astype(np.float64)
            out[name] = data.reshape(shape)
        return out


def manifest_to_tensor(manifest: dict) -> np.ndarray:
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":"))
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def tensor_to_manifest(arr: np.ndarray) -> dict:
    raw = arr.astype(np.uint8).tobytes()
    return json.loads(raw.decode("utf-8"))


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], manifest: dict) -> None:
    payload = {MANIFEST_KEY: manifest_to_tensor(manifest)}
    payload.update(tensors)
    save_tensors(path, payload)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    tensors = load_tensors(path)
    if MANIFEST_KEY not in tensors:
        raise ValueError(f"{path}: container has no manifest")
    manifest = tensor_to_manifest(tensors.pop(MANIFEST_KEY))
    return tensors, manifest
