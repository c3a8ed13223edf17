"""Shape datasets: random shape families, benchmark splits, and query pools."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import geometry as geo
from .errors import DatasetError

# family -> split of the default desk benchmark
DESK_SPLITS = {
    "labeled": {"sphere": 20, "box": 20, "capsule": 20},
    "unlabeled": {"cylinder": 20},
    "test": {"torus": 10, "composite-union": 10},
}


def _offset(rng, limit=0.1):
    return tuple(rng.uniform(-limit, limit, 3))


def random_shape(family: str, rng: np.random.Generator, category_id: str = "") -> geo.ShapeInstance:
    """Draw one instance of ``family`` that fits well inside ``[-1, 1]^3``."""
    cat = category_id or family
    if family == "sphere":
        return geo.sphere(rng.uniform(0.35, 0.7), _offset(rng), cat)
    if family == "box":
        return geo.box(rng.uniform(0.25, 0.6, 3), _offset(rng), cat)
    if family == "capsule":
        return geo.capsule(rng.uniform(0.15, 0.35), rng.uniform(0.2, 0.45), _offset(rng), cat)
    if family == "cylinder":
        return geo.cylinder(rng.uniform(0.2, 0.5), rng.uniform(0.2, 0.5), _offset(rng), cat)
    if family == "torus":
        big = rng.uniform(0.4, 0.6)
        return geo.torus(big, rng.uniform(0.12, 0.25), _offset(rng), cat)
    if family == "composite-union":
        stem = geo.capsule(rng.uniform(0.12, 0.2), rng.uniform(0.3, 0.45),
                           (rng.uniform(-0.1, 0.1), 0.0, rng.uniform(-0.1, 0.1)))
        head = geo.box(rng.uniform(0.25, 0.4, 3) * np.array([1.0, 0.4, 1.0]),
                       (0.0, rng.uniform(0.4, 0.55), 0.0))
        return geo.union([stem, head], cat)
    raise DatasetError(f"no generator for family {family!r}")


@dataclass(frozen=True)
class ManifestEntry:
    shape: geo.ShapeInstance
    split: str
    shape_id: str

    def to_dict(self) -> dict:
        d = self.shape.to_dict()
        d.update(split=self.split, shape_id=self.shape_id)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        return cls(geo.ShapeInstance.from_dict(d), d["split"], d["shape_id"])


def make_manifest(splits: Optional[dict] = None, seed: int = 0) -> list:
    """Sample shape instances for each ``split -> {family: count}``."""
    splits = DESK_SPLITS if splits is None else splits
    entries = []
    for split, families in splits.items():
        for family, count in families.items():
            rng = np.random.default_rng([seed, _stable_hash(split), _stable_hash(family)])
            for i in range(count):
                entries.append(ManifestEntry(random_shape(family, rng), split, f"{family}-{i:03d}"))
    check_disjoint(entries)
    return entries


def _stable_hash(s: str) -> int:
    return int.from_bytes(hashlib.sha256(s.encode()).digest()[:4], "little")


def check_disjoint(entries: Sequence[ManifestEntry]):
    by_split = {}
    for e in entries:
        by_split.setdefault(e.split, set()).add(e.shape.category_id)
    names = sorted(by_split)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            common = by_split[a] & by_split[b]
            if common:
                raise DatasetError(f"splits {a!r} and {b!r} share categories {sorted(common)}")


def save_manifest(entries: Sequence[ManifestEntry], path, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    doc = {"version": 1, "instances": [e.to_dict() for e in entries]}
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def load_manifest(path) -> list:
    doc = json.loads(Path(path).read_text())
    entries = [ManifestEntry.from_dict(d) for d in doc["instances"]]
    check_disjoint(entries)
    return entries


# ---------------------------------------------------------------------------
# datasets with precomputed query pools
# ---------------------------------------------------------------------------

@dataclass
class LabeledItem:
    shape_id: str
    category_id: str
    shape: geo.ShapeInstance
    cloud: np.ndarray
    pool: geo.LabeledQueryBatch


@dataclass
class UnlabeledItem:
    shape_id: str
    category_id: str
    cloud: np.ndarray
    pool: geo.QueryBatch


@dataclass
class LabeledDataset:
    items: list = field(default_factory=list)

    def __len__(self):
        return len(self.items)

    @property
    def categories(self) -> list:
        return sorted({it.category_id for it in self.items})

    def subset(self, categories) -> "LabeledDataset":
        keep = set(categories)
        return LabeledDataset([it for it in self.items if it.category_id in keep])


@dataclass
class UnlabeledDataset:
    items: list = field(default_factory=list)

    def __len__(self):
        return len(self.items)

    @property
    def categories(self) -> list:
        return sorted({it.category_id for it in self.items})


def _item_seed(seed: int, shape_id: str) -> int:
    return int(np.random.SeedSequence([seed, _stable_hash(shape_id)]).generate_state(1)[0])


def build_pool(shape, cloud, pool_size: int, near_fraction: float, sigma_near: float, seed: int,
               with_labels: bool):
    n_near = int(round(pool_size * near_fraction))
    return geo.sample_queries(shape, cloud, n_near, pool_size - n_near, sigma_near, seed, with_labels)


def build_labeled(entries: Sequence[ManifestEntry], cloud_size: int = 2048, pool_size: int = 4096,
                  near_fraction: float = 0.9, sigma_near: float = 0.05, seed: int = 0) -> LabeledDataset:
    items = []
    for e in entries:
        s = _item_seed(seed, e.shape_id)
        cloud = geo.sample_surface(e.shape, cloud_size, s)
        pool = build_pool(e.shape, cloud, pool_size, near_fraction, sigma_near, s + 1, True)
        items.append(LabeledItem(e.shape_id, e.shape.category_id, e.shape, cloud, pool))
    return LabeledDataset(items)


def build_unlabeled(entries: Sequence[ManifestEntry], cloud_size: int = 2048, pool_size: int = 4096,
                    near_fraction: float = 0.9, sigma_near: float = 0.05, seed: int = 0) -> UnlabeledDataset:
    """Unlabeled data: the shape is used only to draw the cloud, never for labels."""
    items = []
    for e in entries:
        s = _item_seed(seed, e.shape_id)
        cloud = geo.sample_surface(e.shape, cloud_size, s)
        items.append(UnlabeledItem(e.shape_id, e.shape.category_id, cloud,
                                   unlabeled_pool(cloud, pool_size, near_fraction, sigma_near, s + 1)))
    return UnlabeledDataset(items)


def unlabeled_pool(cloud, pool_size: int, near_fraction: float, sigma_near: float, seed: int) -> geo.QueryBatch:
    return build_pool(None, cloud, pool_size, near_fraction, sigma_near, seed, False)


def check_stage2_disjoint(labeled: LabeledDataset, unlabeled: UnlabeledDataset):
    common = set(labeled.categories) & set(unlabeled.categories)
    if common:
        raise DatasetError(f"labeled and unlabeled data share categories {sorted(common)}")


# ---------------------------------------------------------------------------
# on-disk datasets
# ---------------------------------------------------------------------------

@dataclass
class DiskDataset:
    """A generated dataset directory: manifest entries and their stored clouds."""

    root: Path
    entries: list
    clouds: dict
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def labeled(self, pool_size: int = 4096, near_fraction: float = 0.9, sigma_near: float = 0.05,
                seed: int = 0) -> LabeledDataset:
        items = []
        for e in self.split("labeled"):
            s = _item_seed(seed, e.shape_id)
            cloud = self.clouds[e.shape_id]
            pool = build_pool(e.shape, cloud, pool_size, near_fraction, sigma_near, s + 1, True)
            items.append(LabeledItem(e.shape_id, e.shape.category_id, e.shape, cloud, pool))
        return LabeledDataset(items)

    def unlabeled(self, pool_size: int = 4096, near_fraction: float = 0.9, sigma_near: float = 0.05,
                  seed: int = 0) -> UnlabeledDataset:
        """Unlabeled items are built from the stored clouds alone."""
        items = []
        for e in self.split("unlabeled"):
            cloud = self.clouds[e.shape_id]
            pool = unlabeled_pool(cloud, pool_size, near_fraction, sigma_near, _item_seed(seed, e.shape_id) + 1)
            items.append(UnlabeledItem(e.shape_id, e.shape.category_id, cloud, pool))
        return UnlabeledDataset(items)

    def statistics(self) -> dict:
        out = {}
        for e in self.entries:
            s = out.setdefault(e.split, {"instances": 0, "categories": {}})
            s["instances"] += 1
            s["categories"][e.shape.category_id] = s["categories"].get(e.shape.category_id, 0) + 1
        return out


MANIFEST_NAME = "manifest.json"


def write_dataset(root, entries: Sequence[ManifestEntry], cloud_size: int = 2048, seed: int = 0) -> Path:
    """Sample one cloud per entry into ``root/clouds/<shape_id>.xyz`` and write the manifest.

    The manifest records the SHA-256 of every cloud file so regeneration can be checked.
    """
    from .io import file_sha256, save_xyz

    root = Path(root)
    (root / "clouds").mkdir(parents=True, exist_ok=True)
    check_disjoint(entries)
    checksums = {}
    for e in entries:
        rel = f"clouds/{e.split}-{e.shape_id}.xyz"
        save_xyz(geo.sample_surface(e.shape, cloud_size, _item_seed(seed, e.shape_id)), root / rel)
        checksums[e.shape_id + "@" + e.split] = {"path": rel, "sha256": file_sha256(root / rel)}
    save_manifest(entries, root / MANIFEST_NAME,
                  {"seed": seed, "cloud_size": cloud_size, "clouds": checksums})
    return root / MANIFEST_NAME


def read_dataset(root, verify: bool = True) -> DiskDataset:
    """Load a directory written by :func:`write_dataset`; splits are checked for disjointness."""
    from .io import file_sha256, load_xyz

    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise DatasetError(f"no dataset manifest at {path}")
    doc = json.loads(path.read_text())
    entries = load_manifest(path)
    clouds = {}
    for e in entries:
        rec = doc["clouds"][e.shape_id + "@" + e.split]
        f = root / rec["path"]
        if verify and file_sha256(f) != rec["sha256"]:
            raise DatasetError(f"checksum mismatch for {f}")
        clouds[e.shape_id] = load_xyz(f)
    meta = {k: v for k, v in doc.items() if k not in ("instances", "clouds")}
    return DiskDataset(root, entries, clouds, meta)
