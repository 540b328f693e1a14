"""GTT1 binary tensor files and checkpoint directories.

Layout of a ``.gtt`` file: magic bytes ``GTT1``, little-endian u32 rank,
``rank`` little-endian u64 dimensions, then the row-major float64 payload,
little-endian.  Checkpoints are directories of named GTT1 tensors next to a
plain-text ``manifest.txt`` of ``key = value`` lines.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"GTT1"


def write_tensor(path: str | os.PathLike, array: np.ndarray) -> None:
    """Write a float64 array as a GTT1 file (atomically: temp file + rename)."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim and not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    payload = arr.astype("<f8").tobytes(order="C")
    atomic_write_bytes(path, header + payload)


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a GTT1 file (bad magic {blob[:4]!r})")
    (rank,) = struct.unpack_from("<I", blob, 4)
    dims = struct.unpack_from(f"<{rank}Q", blob, 8) if rank else ()
    offset = 8 + 8 * rank
    count = int(np.prod(dims)) if rank else 1
    expected = offset + 8 * count
    if len(blob) != expected:
        raise ValueError(f"{path}: payload size {len(blob) - offset} does not "
                         f"match dims {dims}")
    flat = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
    return flat.reshape(dims).astype(np.float64)


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write bytes to ``path`` via a temp file in the same directory + rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(path: str | os.PathLike, entries: dict) -> None:
    lines = "".join(f"{k} = {v}\n" for k, v in entries.items())
    atomic_write_bytes(path, lines.encode())


def read_manifest(path: str | os.PathLike) -> dict[str, str]:
    entries: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FileNotFoundError(f"manifest not readable: {path}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    return entries
