"""CAVR v1 tensor files and 8-bit PGM images.

CAVR v1 layout::

    bytes 0-3   magic  b"CAVR"
    byte  4     version (1)
    byte  5     rank r in 1..4
    4*r bytes   extents, little-endian uint32
    rest        row-major float32 little-endian values

Values are widened to float64 on read.  All writers go through a temporary
file and ``os.replace`` so a reader never sees a truncated file.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"CAVR"
VERSION = 1


def atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_cavr(array) -> bytes:
    arr = np.asarray(array, dtype=np.float64)
    if not 1 <= arr.ndim <= 4:
        raise FormatError(f"CAVR supports rank 1..4, got shape {arr.shape}")
    if any(n <= 0 or n >= 2**32 for n in arr.shape):
        raise FormatError(f"CAVR extents must fit in uint32 and be positive: {arr.shape}")
    if not np.isfinite(arr).all():
        raise FormatError("refusing to write non-finite values")
    header = MAGIC + bytes([VERSION, arr.ndim]) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_cavr(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic, not a CAVR file")
    if blob[4] != VERSION:
        raise FormatError(f"{source}: unsupported CAVR version {blob[4]}")
    rank = blob[5]
    if not 1 <= rank <= 4:
        raise FormatError(f"{source}: invalid rank {rank}")
    head = 6 + 4 * rank
    if len(blob) < head:
        raise FormatError(f"{source}: truncated header")
    shape = struct.unpack(f"<{rank}I", blob[6:head])
    if 0 in shape:
        raise FormatError(f"{source}: zero extent in {shape}")
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) - head != 4 * count:
        raise FormatError(
            f"{source}: payload holds {len(blob) - head} bytes, shape {shape} needs {4 * count}"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=head, count=count)
    out = data.astype(np.float64).reshape(shape)
    if not np.isfinite(out).all():
        raise FormatError(f"{source}: contains non-finite values")
    return out


def write_cavr(path: str | os.PathLike, array) -> None:
    atomic_write(path, encode_cavr(array))


def read_cavr(path: str | os.PathLike) -> np.ndarray:
    return decode_cavr(Path(path).read_bytes(), str(path))


def to_gray8(image, normalize: str = "minmax") -> np.ndarray:
    """Map a 2-D array to uint8.

    ``minmax`` stretches the observed range to 0..255 (a constant image maps
    to 0); ``unit`` treats the input as already lying in [0, 1].
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim != 2:
        raise FormatError(f"PGM needs a 2-D image, got shape {img.shape}")
    if normalize == "minmax":
        lo, hi = img.min(), img.max()
        img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    elif normalize != "unit":
        raise ValueError(f"unknown normalization {normalize!r}")
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def encode_pgm(image, normalize: str = "minmax") -> bytes:
    gray = to_gray8(image, normalize)
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes()


def write_pgm(path: str | os.PathLike, image, normalize: str = "minmax") -> None:
    atomic_write(path, encode_pgm(image, normalize))


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    blob = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        fields.append(blob[start:pos])
    if fields[0] != b"P5" or fields[3] != b"255":
        raise FormatError(f"{path}: not an 8-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    pixels = blob[pos + 1 :]
    if len(pixels) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixels, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)
