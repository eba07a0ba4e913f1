"""File helpers: volume loading by extension, atomic writes, PGM and CSV output."""
from __future__ import annotations

import csv
import gzip
import io
import os
import tempfile
from pathlib import Path

import numpy as np

from .volgrid import ValueKind, Volume, read_nifti, read_raw, write_nifti

VOLUME_SUFFIXES = (".nii.gz", ".nii", ".raw")


def volume_stem(path) -> str:
    name = Path(path).name
    for suffix in VOLUME_SUFFIXES:
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return Path(path).stem


def load_volume(path, kind: ValueKind | None = None) -> Volume:
    """Read .nii, .nii.gz (decompressed here) or raw CSG0 files."""
    path = Path(path)
    data = path.read_bytes()
    if path.name.endswith(".gz"):
        data = gzip.decompress(data)
    if data[:4] == b"CSG0":
        vol = read_raw(data)
    else:
        vol = read_nifti(data)
    if kind is not None and vol.kind is not kind:
        vol = Volume(vol.data, vol.spacing, kind)
    return vol


def load_mask(path) -> Volume:
    vol = load_volume(path)
    if vol.kind is ValueKind.BINARY:
        return vol
    return Volume(vol.data > 0, vol.spacing, ValueKind.BINARY)


def atomic_write(path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename over *path*."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_volume(path, vol: Volume) -> None:
    atomic_write(path, write_nifti(vol))


def csv_bytes(rows) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue().encode("utf-8")


def pgm16_bytes(img: np.ndarray) -> bytes:
    """Binary 16-bit PGM (P5, maxval 65535, big-endian samples) of a [0, 1] image."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM needs a 2-D image")
    q = np.round(np.clip(img, 0.0, 1.0) * 65535).astype(">u2")
    rows, cols = img.shape
    return f"P5\n{cols} {rows}\n65535\n".encode("ascii") + q.tobytes()


def read_pgm16(data: bytes) -> np.ndarray:
    """Inverse of :func:`pgm16_bytes`; returns values in [0, 1]."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5" or int(tokens[3]) != 65535:
        raise ValueError("not a 16-bit binary PGM")
    cols, rows = int(tokens[1]), int(tokens[2])
    body = data[pos + 1:pos + 1 + rows * cols * 2]
    q = np.frombuffer(body, dtype=">u2").reshape(rows, cols)
    return q.astype(np.float64) / 65535
