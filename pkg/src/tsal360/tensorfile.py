"""Binary named-tensor containers: "TSAL" checkpoints and "TSFT" feature files.

Both formats are little-endian.  A record is:

    name_len: u32, name: utf-8 bytes, rank: u32, dims: rank x u64,
    payload: prod(dims) x f32

A checkpoint is ``b"TSAL" | version u32 | count u32 | count records``.
A feature file is ``b"TSFT" | version u32 | records until EOF``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"TSAL"
FEATURE_MAGIC = b"TSFT"
VERSION = 1

MAX_NAME = 4096
MAX_RANK = 16


class TensorFileError(ValueError):
    """Malformed tensor container (bad magic, version, or field values)."""


class TruncatedFileError(TensorFileError):
    """The file ended in the middle of a record."""


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"truncated while reading {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def _write_record(f, name: str, arr: np.ndarray) -> None:
    blob = name.encode("utf-8")
    f.write(struct.pack("<I", len(blob)))
    f.write(blob)
    f.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<Q", d))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_record(f) -> tuple[str, np.ndarray]:
    raw = _read_exact(f, 4, "record name length")
    (name_len,) = struct.unpack("<I", raw)
    if name_len == 0 or name_len > MAX_NAME:
        raise TensorFileError(f"implausible record name length {name_len}")
    name = _read_exact(f, name_len, "record name").decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exact(f, 4, f"rank of {name!r}"))
    if rank > MAX_RANK:
        raise TensorFileError(f"implausible rank {rank} for {name!r}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, f"dims of {name!r}"))
    count = 1
    for d in dims:
        count *= d
    payload = _read_exact(f, 4 * count, f"payload of {name!r}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return name, arr


def write_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float32 tensors; records are sorted by name for stable bytes."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name in sorted(tensors):
            _write_record(f, name, tensors[name])


def read_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise TensorFileError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != VERSION:
            raise TensorFileError(f"{path}: unsupported version {version}")
        out = {}
        for _ in range(count):
            name, arr = _read_record(f)
            out[name] = arr
        return out


def write_features(path, tensors: dict[str, np.ndarray]) -> None:
    """Write a feature file; records keep the given insertion order."""
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name, arr in tensors.items():
            _write_record(f, name, arr)


def read_features(path) -> dict[str, np.ndarray]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != FEATURE_MAGIC:
            raise TensorFileError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != VERSION:
            raise TensorFileError(f"{path}: unsupported version {version}")
        out = {}
        while True:
            probe = f.read(1)
            if not probe:
                return out
            f.seek(-1, 1)
            name, arr = _read_record(f)
            out[name] = arr
