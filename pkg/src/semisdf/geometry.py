"""Analytic shapes with exact signed distances, samplers, and nearest-neighbor search.

All point arrays are float64 with shape ``(M, 3)``. Shapes live in normalized
object space and are generated to fit inside ``[-1, 1]^3``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigurationError, ShapeError

FAMILIES = ("sphere", "box", "torus", "capsule", "cylinder", "composite-union")

# parameters each primitive family requires
_PARAM_KEYS = {
    "sphere": ("radius",),
    "box": ("half_extents",),
    "torus": ("major_radius", "minor_radius"),
    "capsule": ("radius", "half_height"),
    "cylinder": ("radius", "half_height"),
    "composite-union": (),
}


@dataclass(frozen=True)
class ShapeInstance:
    """A primitive (or union of primitives) with a uniform-scale + translation pose.

    Primitives are axis-aligned; torus, capsule and cylinder use ``y`` as their axis.
    The world-space SDF is ``scale * sdf0((x - translation) / scale)``.
    """

    family: str
    params: dict = field(default_factory=dict)
    translation: tuple = (0.0, 0.0, 0.0)
    scale: float = 1.0
    category_id: str = ""
    parts: tuple = ()

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown shape family {self.family!r}")
        if not self.category_id:
            object.__setattr__(self, "category_id", self.family)
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))

    @property
    def approximate(self) -> bool:
        """True when ``exact_sdf`` is only a bound (unions near part intersections)."""
        return self.family == "composite-union"

    def validate(self) -> None:
        if self.family == "composite-union":
            if not self.parts:
                raise ShapeError("composite-union needs at least one part")
            for part in self.parts:
                part.validate()
            return
        missing = [k for k in _PARAM_KEYS[self.family] if k not in self.params]
        if missing:
            raise ShapeError(f"{self.family} missing parameters {missing}")
        values = np.ravel([np.asarray(self.params[k], dtype=float) for k in _PARAM_KEYS[self.family]])
        if not np.all(np.isfinite(values)) or np.any(values <= 0.0) or self.scale <= 0.0:
            raise ShapeError(f"degenerate {self.family} parameters {self.params}, scale {self.scale}")
        if self.family == "torus" and self.params["minor_radius"] >= self.params["major_radius"]:
            raise ShapeError("torus minor radius must be below the major radius")

    def to_dict(self) -> dict:
        out = {
            "family": self.family,
            "parameters": {k: (list(v) if isinstance(v, (tuple, list, np.ndarray)) else v)
                           for k, v in self.params.items()},
            "pose": {"translation": list(self.translation), "scale": self.scale},
            "category_id": self.category_id,
        }
        if self.parts:
            out["parts"] = [p.to_dict() for p in self.parts]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeInstance":
        pose = d.get("pose", {})
        params = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.get("parameters", {}).items()}
        return cls(
            family=d["family"],
            params=params,
            translation=tuple(pose.get("translation", (0.0, 0.0, 0.0))),
            scale=float(pose.get("scale", 1.0)),
            category_id=d.get("category_id", ""),
            parts=tuple(cls.from_dict(p) for p in d.get("parts", ())),
        )


def sphere(radius, center=(0.0, 0.0, 0.0), category_id="") -> ShapeInstance:
    return ShapeInstance("sphere", {"radius": float(radius)}, center, 1.0, category_id)


def box(half_extents, center=(0.0, 0.0, 0.0), category_id="") -> ShapeInstance:
    return ShapeInstance("box", {"half_extents": tuple(float(v) for v in half_extents)}, center, 1.0, category_id)


def torus(major_radius, minor_radius, center=(0.0, 0.0, 0.0), category_id="") -> ShapeInstance:
    params = {"major_radius": float(major_radius), "minor_radius": float(minor_radius)}
    return ShapeInstance("torus", params, center, 1.0, category_id)


def capsule(radius, half_height, center=(0.0, 0.0, 0.0), category_id="") -> ShapeInstance:
    params = {"radius": float(radius), "half_height": float(half_height)}
    return ShapeInstance("capsule", params, center, 1.0, category_id)


def cylinder(radius, half_height, center=(0.0, 0.0, 0.0), category_id="") -> ShapeInstance:
    params = {"radius": float(radius), "half_height": float(half_height)}
    return ShapeInstance("cylinder", params, center, 1.0, category_id)


def union(parts: Sequence[ShapeInstance], category_id="") -> ShapeInstance:
    return ShapeInstance("composite-union", {}, (0.0, 0.0, 0.0), 1.0, category_id, tuple(parts))


# ---------------------------------------------------------------------------
# exact signed distances
# ---------------------------------------------------------------------------

def _as_points(x) -> np.ndarray:
    pts = np.asarray(x, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected points of shape (M, 3), got {pts.shape}")
    return pts


def _local_sdf(shape: ShapeInstance, p: np.ndarray) -> np.ndarray:
    prm = shape.params
    fam = shape.family
    if fam == "sphere":
        return np.linalg.norm(p, axis=1) - prm["radius"]
    if fam == "box":
        q = np.abs(p) - np.asarray(prm["half_extents"], dtype=np.float64)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside
    if fam == "torus":
        ring = np.hypot(p[:, 0], p[:, 2]) - prm["major_radius"]
        return np.hypot(ring, p[:, 1]) - prm["minor_radius"]
    if fam == "capsule":
        h = prm["half_height"]
        q = p.copy()
        q[:, 1] -= np.clip(q[:, 1], -h, h)
        return np.linalg.norm(q, axis=1) - prm["radius"]
    if fam == "cylinder":
        dx = np.hypot(p[:, 0], p[:, 2]) - prm["radius"]
        dy = np.abs(p[:, 1]) - prm["half_height"]
        inside = np.minimum(np.maximum(dx, dy), 0.0)
        outside = np.hypot(np.maximum(dx, 0.0), np.maximum(dy, 0.0))
        return inside + outside
    raise ConfigurationError(f"unknown shape family {fam!r}")


def exact_sdf(shape: ShapeInstance, x) -> np.ndarray:
    """Signed distance from each point in ``x`` to ``shape`` (negative inside).

    Returns an array of shape ``(M,)``; a single point gives a length-1 array.
    Composite unions return the min over parts, which is exact away from part
    intersections and a lower bound near them (``shape.approximate``).
    """
    pts = _as_points(x)
    if shape.family == "composite-union":
        if not shape.parts:
            raise ShapeError("composite-union needs at least one part")
        return np.min([exact_sdf(part, pts) for part in shape.parts], axis=0)
    t = np.asarray(shape.translation)
    s = shape.scale
    return s * _local_sdf(shape, (pts - t) / s)


def surface_area(shape: ShapeInstance) -> float:
    """Analytic area of a primitive, in world units."""
    prm = shape.params
    fam = shape.family
    if fam == "sphere":
        a = 4.0 * math.pi * prm["radius"] ** 2
    elif fam == "box":
        bx, by, bz = prm["half_extents"]
        a = 8.0 * (by * bz + bx * bz + bx * by)
    elif fam == "torus":
        a = 4.0 * math.pi ** 2 * prm["major_radius"] * prm["minor_radius"]
    elif fam == "capsule":
        r, h = prm["radius"], prm["half_height"]
        a = 4.0 * math.pi * r * h + 4.0 * math.pi * r ** 2
    elif fam == "cylinder":
        r, h = prm["radius"], prm["half_height"]
        a = 4.0 * math.pi * r * h + 2.0 * math.pi * r ** 2
    else:
        raise ShapeError("surface_area is defined for primitives only")
    return a * shape.scale ** 2


def volume(shape: ShapeInstance) -> float:
    """Analytic volume of a primitive, in world units."""
    prm = shape.params
    fam = shape.family
    if fam == "sphere":
        v = 4.0 / 3.0 * math.pi * prm["radius"] ** 3
    elif fam == "box":
        v = 8.0 * float(np.prod(prm["half_extents"]))
    elif fam == "torus":
        v = 2.0 * math.pi ** 2 * prm["major_radius"] * prm["minor_radius"] ** 2
    elif fam == "capsule":
        r, h = prm["radius"], prm["half_height"]
        v = math.pi * r ** 2 * 2.0 * h + 4.0 / 3.0 * math.pi * r ** 3
    elif fam == "cylinder":
        v = math.pi * prm["radius"] ** 2 * 2.0 * prm["half_height"]
    else:
        raise ShapeError("volume is defined for primitives only")
    return v * shape.scale ** 3


# ---------------------------------------------------------------------------
# surface sampling
# ---------------------------------------------------------------------------

def allocate_counts(n: int, weights) -> np.ndarray:
    """Split ``n`` into integer counts proportional to ``weights`` (largest remainder)."""
    w = np.asarray(weights, dtype=np.float64)
    exact = n * w / w.sum()
    counts = np.floor(exact).astype(np.int64)
    short = n - counts.sum()
    if short:
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    # a zero draw has probability zero but would poison the cloud
    bad = norms[:, 0] < 1e-12
    while np.any(bad):
        v[bad] = rng.normal(size=(int(bad.sum()), 3))
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        bad = norms[:, 0] < 1e-12
    return v / norms


def _ring(rng, n, radius):
    theta = rng.uniform(0.0, 2.0 * math.pi, n)
    return radius * np.cos(theta), radius * np.sin(theta)


def _sample_local(shape: ShapeInstance, n: int, rng: np.random.Generator) -> np.ndarray:
    prm = shape.params
    fam = shape.family
    if fam == "sphere":
        return prm["radius"] * _unit_vectors(rng, n)
    if fam == "box":
        b = np.asarray(prm["half_extents"], dtype=np.float64)
        face_area = np.array([b[1] * b[2], b[0] * b[2], b[0] * b[1]])
        counts = allocate_counts(n, np.repeat(face_area, 2))
        chunks = []
        for face, c in enumerate(counts):
            axis, sign = divmod(face, 2)
            pts = rng.uniform(-b, b, size=(c, 3))
            pts[:, axis] = b[axis] if sign == 0 else -b[axis]
            chunks.append(pts)
        return np.concatenate(chunks)
    if fam == "torus":
        big, small = prm["major_radius"], prm["minor_radius"]
        out = np.empty((0, 2))
        # area element is proportional to (R + r cos v); rejection-sample v
        while len(out) < n:
            m = 2 * (n - len(out)) + 16
            v = rng.uniform(0.0, 2.0 * math.pi, m)
            keep = rng.uniform(0.0, big + small, m) < big + small * np.cos(v)
            u = rng.uniform(0.0, 2.0 * math.pi, m)
            out = np.concatenate([out, np.stack([u[keep], v[keep]], axis=1)])
        u, v = out[:n, 0], out[:n, 1]
        ring = big + small * np.cos(v)
        return np.stack([ring * np.cos(u), small * np.sin(v), ring * np.sin(u)], axis=1)
    if fam == "capsule":
        r, h = prm["radius"], prm["half_height"]
        n_side, n_caps = allocate_counts(n, [4.0 * math.pi * r * h, 4.0 * math.pi * r * r])
        cx, cz = _ring(rng, n_side, r)
        side = np.stack([cx, rng.uniform(-h, h, n_side), cz], axis=1)
        caps = r * _unit_vectors(rng, n_caps)
        caps[:, 1] += np.where(caps[:, 1] >= 0.0, h, -h)
        return np.concatenate([side, caps])
    if fam == "cylinder":
        r, h = prm["radius"], prm["half_height"]
        n_side, n_caps = allocate_counts(n, [4.0 * math.pi * r * h, 2.0 * math.pi * r * r])
        cx, cz = _ring(rng, n_side, r)
        side = np.stack([cx, rng.uniform(-h, h, n_side), cz], axis=1)
        rad = r * np.sqrt(rng.uniform(0.0, 1.0, n_caps))
        dx, dz = _ring(rng, n_caps, 1.0)
        y = np.where(rng.uniform(size=n_caps) < 0.5, h, -h)
        caps = np.stack([rad * dx, y, rad * dz], axis=1)
        return np.concatenate([side, caps])
    raise ConfigurationError(f"unknown shape family {fam!r}")


def _sample_primitive(shape: ShapeInstance, n: int, rng: np.random.Generator) -> np.ndarray:
    local = _sample_local(shape, n, rng)
    return shape.scale * local + np.asarray(shape.translation)


def sample_surface(shape: ShapeInstance, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` approximately area-uniform points on the surface of ``shape``.

    Deterministic for a fixed ``seed``. Points are shuffled so that any prefix is
    itself a roughly uniform sample.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    shape.validate()
    rng = np.random.default_rng(seed)
    if shape.family != "composite-union":
        pts = _sample_primitive(shape, n, rng)
        return pts[rng.permutation(n)]

    parts = shape.parts
    areas = [surface_area(p) for p in parts]
    kept = [np.empty((0, 3)) for _ in parts]
    # rejection: keep part-surface points that no other part contains
    for _ in range(64):
        total = sum(len(k) for k in kept)
        if total >= n:
            break
        want = allocate_counts(2 * (n - total) + 64, areas)
        for i, part in enumerate(parts):
            cand = _sample_primitive(part, int(want[i]), rng)
            others = [exact_sdf(q, cand) for j, q in enumerate(parts) if j != i]
            ok = np.all(np.stack(others) >= 0.0, axis=0) if others else np.ones(len(cand), bool)
            kept[i] = np.concatenate([kept[i], cand[ok]])
    pts = np.concatenate(kept)
    if len(pts) < n:
        raise ShapeError("composite surface is (almost) fully hidden; cannot sample")
    pts = pts[rng.permutation(len(pts))[:n]]
    return pts


def recenter_and_normalize(cloud, extent: float = 0.9):
    """Move the bounding-box center to the origin and scale the largest half-extent to ``extent``.

    Returns ``(normalized, center, scale)`` such that ``normalized = (cloud - center) / scale``.
    """
    pts = _as_points(cloud)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    center = 0.5 * (lo + hi)
    half = 0.5 * float((hi - lo).max())
    scale = half / extent if half > 0.0 else 1.0
    return (pts - center) / scale, center, scale


# ---------------------------------------------------------------------------
# nearest neighbors
# ---------------------------------------------------------------------------

def point_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance between matching rows; the one formula every NN path uses."""
    d = a - b
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


def linear_scan(points: np.ndarray, x) -> tuple:
    """Exhaustive nearest neighbor; ties go to the lowest index."""
    pts = _as_points(points)
    q = _as_points(x)
    idx = np.empty(len(q), dtype=np.int64)
    dist = np.empty(len(q))
    for i, xi in enumerate(q):
        d = point_distance(pts, xi)
        j = int(np.argmin(d))  # argmin returns the first minimum
        idx[i], dist[i] = j, d[j]
    return pts[idx], dist, idx


class KdTree:
    """Immutable balanced spatial index over a point cloud.

    Candidate search is delegated to ``scipy.spatial.cKDTree``; final distances
    are recomputed with :func:`point_distance` and ties resolved to the lowest
    index, so results match :func:`linear_scan` exactly.
    """

    def __init__(self, points, leaf_size: int = 16):
        pts = _as_points(points)
        if len(pts) == 0:
            raise ValueError("cannot build a KdTree over an empty cloud")
        if not np.all(np.isfinite(pts)):
            raise ValueError("cloud contains non-finite points")
        if leaf_size < 1:
            raise ValueError("leaf_size must be positive")
        self.points = pts.copy()
        self.points.setflags(write=False)
        self.leaf_size = leaf_size
        self._tree = cKDTree(self.points, leafsize=leaf_size, balanced_tree=True)

    def __len__(self):
        return len(self.points)

    def query(self, x) -> tuple:
        """Nearest cloud point for each row of ``x``: ``(points, dists, indices)``."""
        q = _as_points(x)
        if not np.all(np.isfinite(q)):
            raise ValueError("query points must be finite")
        k = min(4, len(self.points))
        approx, cand = self._tree.query(q, k=k)
        if k == 1:
            approx, cand = approx[:, None], cand[:, None]
        exact = point_distance(self.points[cand], q[:, None, :])
        # stable order: smaller distance first, then smaller index
        order = np.lexsort((cand, exact), axis=1)[:, 0]
        rows = np.arange(len(q))
        idx = cand[rows, order]
        dist = exact[rows, order]

        # points beyond the k candidates could still tie or win under rounding
        bound = dist * (1.0 + 1e-9) + 1e-300
        unsure = (approx[:, -1] <= bound) & (k < len(self.points))
        for i in np.flatnonzero(unsure):
            ball = np.asarray(self._tree.query_ball_point(q[i], bound[i] * (1.0 + 1e-9) + 1e-15), dtype=np.int64)
            d = point_distance(self.points[ball], q[i])
            best = np.lexsort((ball, d))[0]
            idx[i], dist[i] = ball[best], d[best]
        return self.points[idx], dist, idx


def nearest_neighbor(tree: KdTree, x) -> tuple:
    """Nearest point ``t`` to a single query ``x``: ``(t, dist, index)``."""
    t, d, i = tree.query(np.asarray(x, dtype=np.float64).reshape(1, 3))
    return t[0], float(d[0]), int(i[0])


# ---------------------------------------------------------------------------
# query samples
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuerySample:
    x: np.ndarray
    gt_sdf: Optional[float] = None
    nn: Optional[np.ndarray] = None
    nn_dist: Optional[float] = None


@dataclass(frozen=True)
class QueryBatch:
    """Query coordinates annotated with their nearest conditioning-cloud point.

    Carries no ground-truth distances: code that only receives a ``QueryBatch``
    cannot leak labels.
    """

    x: np.ndarray
    nn: np.ndarray
    nn_dist: np.ndarray
    nn_index: np.ndarray

    def __len__(self):
        return len(self.x)

    def __iter__(self) -> Iterator[QuerySample]:
        for i in range(len(self.x)):
            yield QuerySample(self.x[i], None, self.nn[i], float(self.nn_dist[i]))

    def take(self, idx) -> "QueryBatch":
        return QueryBatch(self.x[idx], self.nn[idx], self.nn_dist[idx], self.nn_index[idx])


@dataclass(frozen=True)
class LabeledQueryBatch(QueryBatch):
    gt_sdf: np.ndarray = None

    def __iter__(self) -> Iterator[QuerySample]:
        for i in range(len(self.x)):
            yield QuerySample(self.x[i], float(self.gt_sdf[i]), self.nn[i], float(self.nn_dist[i]))

    def take(self, idx) -> "LabeledQueryBatch":
        return LabeledQueryBatch(self.x[idx], self.nn[idx], self.nn_dist[idx], self.nn_index[idx],
                                 self.gt_sdf[idx])

    def unlabeled(self) -> QueryBatch:
        return QueryBatch(self.x, self.nn, self.nn_dist, self.nn_index)

    def signs(self) -> np.ndarray:
        """Ground-truth signs (+1 for gt_sdf >= 0, else -1)."""
        return np.where(self.gt_sdf >= 0.0, 1.0, -1.0)


def sample_queries(shape: Optional[ShapeInstance], cloud, n_near: int, n_uniform: int,
                   sigma_near: float = 0.05, seed: int = 0, with_labels: bool = True,
                   tree: Optional[KdTree] = None) -> QueryBatch:
    """Near-surface plus uniform query points, annotated with nearest cloud points.

    Near-surface queries are cloud points jittered by isotropic Gaussian noise with
    std ``sigma_near``; uniform queries cover ``[-1, 1]^3``. Ground-truth distances
    come from ``exact_sdf(shape, .)`` and are attached only when ``with_labels``.
    """
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("conditioning cloud is empty")
    if n_near < 0 or n_uniform < 0 or n_near + n_uniform < 1:
        raise ValueError("need n_near + n_uniform >= 1")
    if sigma_near <= 0.0:
        raise ValueError("sigma_near must be positive")
    if with_labels and shape is None:
        raise ValueError("labels requested without a shape")
    rng = np.random.default_rng(seed)
    anchors = pts[rng.integers(0, len(pts), n_near)]
    near = anchors + rng.normal(scale=sigma_near, size=(n_near, 3))
    uniform = rng.uniform(-1.0, 1.0, size=(n_uniform, 3))
    x = np.concatenate([near, uniform])
    tree = tree if tree is not None else KdTree(pts)
    nn, nn_dist, nn_index = tree.query(x)
    if with_labels:
        return LabeledQueryBatch(x, nn, nn_dist, nn_index, exact_sdf(shape, x))
    return QueryBatch(x, nn, nn_dist, nn_index)
