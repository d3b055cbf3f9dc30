"""Binary density-field files and PGM previews.

A ``.topo`` file is a 16-byte header (``b"TOPO"``, u32 nelx, u32 nely,
u32 reserved) followed by nely*nelx little-endian float32 values, row-major,
top row first.
"""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

from topogan.errors import DataError, IntegrityError

MAGIC = b"TOPO"
_HEADER = struct.Struct("<4sIII")


def encode_field(field: np.ndarray) -> bytes:
    field = np.asarray(field)
    if field.ndim != 2:
        raise DataError(f"expected a 2D field, got shape {field.shape}")
    nely, nelx = field.shape
    body = np.ascontiguousarray(field, dtype="<f4").tobytes()
    return _HEADER.pack(MAGIC, nelx, nely, 0) + body


def decode_field(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise IntegrityError("density file shorter than its header")
    magic, nelx, nely, _ = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise IntegrityError(f"bad magic {magic!r}")
    expected = _HEADER.size + 4 * nelx * nely
    if len(blob) != expected:
        raise IntegrityError(f"density file has {len(blob)} bytes, expected {expected}")
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
    return data.reshape(nely, nelx).astype(np.float32)


def write_field(path: str | Path, field: np.ndarray) -> None:
    Path(path).write_bytes(encode_field(field))


def read_field(path: str | Path) -> np.ndarray:
    return decode_field(Path(path).read_bytes())


def to_pgm(field: np.ndarray, comment: str | None = None) -> bytes:
    """8-bit binary PGM; material (1) renders black."""
    field = np.asarray(field, dtype=np.float64)
    pixels = np.round(255 * (1 - np.clip(field, 0, 1))).astype(np.uint8)
    h, w = pixels.shape
    note = "".join(f"# {line}\n" for line in comment.splitlines()) if comment else ""
    return f"P5\n{note}{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_pgm(path: str | Path, field: np.ndarray, comment: str | None = None) -> None:
    Path(path).write_bytes(to_pgm(field, comment))


_PGM_HEADER = re.compile(rb"P5(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s")


def read_pgm(path: str | Path) -> np.ndarray:
    """Inverse of :func:`write_pgm` up to 8-bit quantisation."""
    blob = Path(path).read_bytes()
    m = _PGM_HEADER.match(blob)
    if not m:
        raise IntegrityError("not a binary PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    pixels = np.frombuffer(blob[m.end(): m.end() + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise IntegrityError("truncated PGM file")
    return 1 - pixels.reshape(h, w) / maxval
