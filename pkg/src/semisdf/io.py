"""Point-cloud file formats.

* ``.xyz``: ASCII, one ``x y z`` triple per line (``#`` comments allowed).
* ``.pcb``: binary, u64 little-endian point count followed by f32 little-endian triples.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import DatasetError


def save_xyz(cloud, path) -> Path:
    path = Path(path)
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    np.savetxt(path, pts, fmt="%.17g")
    return path


def load_xyz(path) -> np.ndarray:
    try:
        pts = np.loadtxt(path, dtype=np.float64, comments="#", ndmin=2)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read point cloud {path}: {exc}") from None
    if pts.size == 0:
        return np.zeros((0, 3))
    if pts.shape[1] != 3:
        raise DatasetError(f"{path}: expected 3 columns, got {pts.shape[1]}")
    return pts


def save_pcb(cloud, path) -> Path:
    path = Path(path)
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(pts)))
        fh.write(pts.astype("<f4").tobytes())
    return path


def load_pcb(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read point cloud {path}: {exc}") from None
    if len(raw) < 8:
        raise DatasetError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[:8])
    if len(raw) != 8 + 12 * n:
        raise DatasetError(f"{path}: header says {n} points but payload has {len(raw) - 8} bytes")
    return np.frombuffer(raw, dtype="<f4", offset=8).reshape(n, 3).astype(np.float64)


def load_cloud(path) -> np.ndarray:
    """Read a ``.xyz`` or ``.pcb`` cloud, chosen by extension."""
    suffix = Path(path).suffix.lower()
    if suffix == ".pcb":
        return load_pcb(path)
    if suffix in (".xyz", ".txt"):
        return load_xyz(path)
    raise DatasetError(f"unsupported point cloud format {suffix!r}")


def save_cloud(cloud, path) -> Path:
    return save_pcb(cloud, path) if Path(path).suffix.lower() == ".pcb" else save_xyz(cloud, path)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
