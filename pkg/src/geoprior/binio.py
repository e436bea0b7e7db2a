"""Little-endian binary containers shared by the checkpoint formats."""

from __future__ import annotations

import contextlib
import os
import struct
import tempfile
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

WEIGHTS_MAGIC = b"GDW1"


class FormatError(ValueError):
    pass


def read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def read_u32(f: BinaryIO) -> int:
    return struct.unpack("<I", read_exact(f, 4))[0]


def write_u32(f: BinaryIO, value: int) -> None:
    f.write(struct.pack("<I", int(value)))


def read_f32_array(f: BinaryIO, count: int) -> np.ndarray:
    return np.frombuffer(read_exact(f, 4 * count), dtype="<f4").astype(np.float32)


def write_weights(f: BinaryIO, tensors: Sequence[np.ndarray]) -> None:
    """GDW1 bundle: magic, tensor count, then per tensor ndim, dims, f32 data."""
    f.write(WEIGHTS_MAGIC)
    write_u32(f, len(tensors))
    for t in tensors:
        a = np.asarray(t)
        write_u32(f, a.ndim)
        for d in a.shape:
            write_u32(f, d)
        f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_weights(f: BinaryIO) -> list[np.ndarray]:
    magic = read_exact(f, 4)
    if magic != WEIGHTS_MAGIC:
        raise FormatError(f"bad weight-bundle magic {magic!r}")
    out = []
    for _ in range(read_u32(f)):
        ndim = read_u32(f)
        shape = tuple(read_u32(f) for _ in range(ndim))
        out.append(read_f32_array(f, int(np.prod(shape, dtype=np.int64))).reshape(shape))
    return out


def save_weights(path, tensors) -> None:
    with atomic_write(path) as f:
        write_weights(f, tensors)


def load_weights(path) -> list[np.ndarray]:
    with open(path, "rb") as f:
        return read_weights(f)


def _default_mode(path) -> None:
    # mkstemp creates 0600 files; give the final file the usual umask mode
    mask = os.umask(0)
    os.umask(mask)
    os.chmod(path, 0o666 & ~mask)


class atomic_write:
    """Write to a temp file in the target directory, rename on success."""

    def __init__(self, path, mode: str = "wb"):
        self.path = Path(path)
        self.mode = mode

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, self._tmp = tempfile.mkstemp(prefix=f".{self.path.name}.", dir=self.path.parent)
        _default_mode(self._tmp)
        self._f = os.fdopen(fd, self.mode)
        return self._f

    def __exit__(self, exc_type, exc, tb):
        self._f.close()
        if exc_type is None:
            os.replace(self._tmp, self.path)
        else:
            os.unlink(self._tmp)
        return False


@contextlib.contextmanager
def atomic_path(path):
    """Yield a temp path beside ``path``; rename it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=path.suffix, dir=path.parent)
    os.close(fd)
    _default_mode(tmp)
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
