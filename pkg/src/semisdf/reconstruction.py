"""Dense grid evaluation of a signed distance field and zero-level-set meshing."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from skimage import measure

from .errors import EvaluationError, NumericError

BOUNDS = (-1.0, 1.0)
ZERO_NUDGE = 1e-12
MIN_AREA = 1e-12


@dataclass
class GridField:
    """Scalar field sampled on the nodes of a regular grid over ``[-1, 1]^3``.

    ``values[i, j, k]`` is the field at ``(x_i, y_j, z_k)``; flattening in C order
    gives the x-major layout used on disk.
    """

    values: np.ndarray
    lo: float = BOUNDS[0]
    hi: float = BOUNDS[1]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        v = self.values
        if v.ndim != 3 or len(set(v.shape)) != 1:
            raise ValueError(f"grid values must be a cube, got shape {v.shape}")
        if v.shape[0] < 2:
            raise ValueError("grid resolution must be >= 2")
        if not np.all(np.isfinite(v)):
            raise NumericError("grid field has non-finite values")

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.resolution - 1)

    def axis(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.resolution)

    def node(self, i: int, j: int, k: int) -> np.ndarray:
        a = self.axis()
        return np.array([a[i], a[j], a[k]])


def grid_nodes(resolution: int, lo: float = BOUNDS[0], hi: float = BOUNDS[1]) -> np.ndarray:
    """All node coordinates in x-major order, ``(r^3, 3)``."""
    a = np.linspace(lo, hi, resolution)
    return np.stack(np.meshgrid(a, a, a, indexing="ij"), axis=-1).reshape(-1, 3)


def field_from_function(fn: Callable[[np.ndarray], np.ndarray], resolution: int,
                        slab: int = 16) -> GridField:
    """Sample ``fn`` (``(M, 3) -> (M,)``) on the grid, one block of x-slices at a time."""
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    a = np.linspace(BOUNDS[0], BOUNDS[1], resolution)
    out = np.empty((resolution,) * 3)
    for lo in range(0, resolution, slab):
        xs = a[lo:lo + slab]
        pts = np.stack(np.meshgrid(xs, a, a, indexing="ij"), axis=-1).reshape(-1, 3)
        vals = np.asarray(fn(pts), dtype=np.float64).reshape(len(xs), resolution, resolution)
        bad = ~np.isfinite(vals)
        if bad.any():
            i, j, k = np.argwhere(bad)[0]
            raise NumericError(f"non-finite field value at node {tuple(pts.reshape(len(xs), resolution, resolution, 3)[i, j, k])}")
        out[lo:lo + slab] = vals
    return GridField(out)


def evaluate_grid(model, cloud, resolution: int = 128) -> GridField:
    """Evaluate the model's field for ``cloud`` on a ``resolution^3`` grid.

    The cloud is encoded once; predictions run tape-free in slabs.
    """
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    features = model.encode(cloud)
    return field_from_function(lambda p: model.predict_values(p, features), resolution)


def save_grid(grid: GridField, path) -> Path:
    """``.grid`` dump: u32 x3 resolution, f64 x6 bounds, then f64 values (x-major, little endian)."""
    path = Path(path)
    r = grid.resolution
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3I", r, r, r))
        fh.write(struct.pack("<6d", grid.lo, grid.lo, grid.lo, grid.hi, grid.hi, grid.hi))
        fh.write(np.ascontiguousarray(grid.values, dtype="<f8").tobytes())
    return path


def load_grid(path) -> GridField:
    raw = Path(path).read_bytes()
    if len(raw) < 60:
        raise EvaluationError(f"{path}: truncated grid header")
    res = struct.unpack("<3I", raw[:12])
    bounds = struct.unpack("<6d", raw[12:60])
    if len(set(res)) != 1 or len(set(bounds[:3])) != 1 or len(set(bounds[3:])) != 1:
        raise EvaluationError(f"{path}: only cubic grids are supported")
    n = res[0] ** 3
    if len(raw) != 60 + 8 * n:
        raise EvaluationError(f"{path}: expected {n} values")
    values = np.frombuffer(raw, dtype="<f8", offset=60).reshape(res).copy()
    return GridField(values, bounds[0], bounds[3])


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------

def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).astype(np.float32).astype(np.float64)


@dataclass
class TriangleMesh:
    """Indexed triangle mesh.

    Vertex coordinates are held at single precision (stored as float64) so the
    9-significant-digit OBJ text round-trips exactly.
    """

    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = _f32(np.asarray(self.vertices).reshape(-1, 3))
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    def __len__(self):
        return len(self.triangles)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def face_normals(self) -> np.ndarray:
        """Unnormalized normals ``(b - a) x (c - a)``; length is twice the area."""
        v = self.vertices[self.triangles]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)

    def edges(self) -> np.ndarray:
        """Undirected edges, one row per (triangle, side), sorted endpoints."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.sort(e, axis=1)

    def edge_use_counts(self) -> np.ndarray:
        if self.is_empty:
            return np.zeros(0, dtype=np.int64)
        return np.unique(self.edges(), axis=0, return_counts=True)[1]

    def is_watertight(self) -> bool:
        counts = self.edge_use_counts()
        return counts.size > 0 and bool(np.all(counts == 2))

    def euler_characteristic(self) -> int:
        n_edges = len(np.unique(self.edges(), axis=0)) if not self.is_empty else 0
        used = len(np.unique(self.triangles)) if not self.is_empty else 0
        return used - n_edges + len(self.triangles)


def _clean(vertices: np.ndarray, triangles: np.ndarray) -> TriangleMesh:
    """Merge coincident vertices, drop degenerate triangles and unreferenced vertices."""
    vertices = _f32(vertices)
    if len(triangles) == 0:
        return TriangleMesh()
    uniq, inverse = np.unique(vertices, axis=0, return_inverse=True)
    tri = inverse.reshape(-1)[triangles]
    v = uniq[tri]
    area = 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    distinct = (tri[:, 0] != tri[:, 1]) & (tri[:, 1] != tri[:, 2]) & (tri[:, 0] != tri[:, 2])
    tri = tri[distinct & (area >= MIN_AREA)]
    if len(tri) == 0:
        return TriangleMesh()
    used, remap = np.unique(tri, return_inverse=True)
    return TriangleMesh(uniq[used], remap.reshape(-1, 3))


def _orient(mesh: TriangleMesh, grid: GridField) -> TriangleMesh:
    """Flip triangles whose normal points toward decreasing field values."""
    if mesh.is_empty:
        return mesh
    v = mesh.vertices[mesh.triangles]
    centroid = v.mean(axis=1)
    n = mesh.face_normals()
    step = 0.25 * grid.spacing * n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    axis = grid.axis()
    f = RegularGridInterpolator((axis, axis, axis), grid.values, bounds_error=False, fill_value=None)
    wrong = f(np.clip(centroid + step, grid.lo, grid.hi)) < f(np.clip(centroid - step, grid.lo, grid.hi))
    # majority vote keeps a consistent winding when single faces are ambiguous
    if wrong.sum() * 2 > len(wrong):
        return TriangleMesh(mesh.vertices, mesh.triangles[:, [0, 2, 1]])
    return mesh


def marching_cubes(grid: GridField, iso: float = 0.0) -> TriangleMesh:
    """Extract the ``iso`` level set as a triangle mesh.

    Nodes exactly at ``iso`` are nudged up by 1e-12 first. Triangles wind
    counter-clockwise seen from the side where the field is larger, so normals
    point outward for a signed distance field. A field that never crosses
    ``iso`` yields an empty mesh.
    """
    vals = np.where(grid.values == iso, iso + ZERO_NUDGE, grid.values)
    if vals.min() > iso or vals.max() < iso:
        return TriangleMesh()
    h = grid.spacing
    verts, faces, _, _ = measure.marching_cubes(vals, level=iso, spacing=(h, h, h),
                                                gradient_direction="ascent", allow_degenerate=False)
    verts = verts.astype(np.float64) + grid.lo
    mesh = _clean(verts, faces)
    return _orient(mesh, GridField(vals, grid.lo, grid.hi))


# ---------------------------------------------------------------------------
# OBJ
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    s = f"{x:.9g}"
    return "0" if s == "-0" else s


def export_mesh(mesh: TriangleMesh, path, fmt: str = "obj") -> Path:
    """Write an ASCII OBJ: ``v x y z`` lines, then ``f a b c`` with 1-based indices."""
    if fmt != "obj":
        raise ValueError(f"unsupported mesh format {fmt!r}")
    path = Path(path)
    lines = [f"v {_fmt(a)} {_fmt(b)} {_fmt(c)}" for a, b, c in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    try:
        path.write_text("\n".join(lines) + ("\n" if lines else ""))
    except OSError as exc:
        raise EvaluationError(f"cannot write mesh to {path}: {exc}") from None
    return path


def import_mesh(path) -> TriangleMesh:
    """Read the ``v``/``f`` subset of OBJ written by :func:`export_mesh`."""
    verts, tris = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            if len(idx) != 3:
                raise EvaluationError(f"{path}:{lineno}: only triangles are supported")
            tris.append([i - 1 for i in idx])
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                        np.array(tris, dtype=np.int64).reshape(-1, 3))
