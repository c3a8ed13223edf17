"""Reconstruction metrics and experiment harnesses.

Chamfer distance defaults to the squared flavor: the mean squared
nearest-neighbor distance from A to B plus the same from B to A.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import subprocess
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import geometry as geo
from . import reconstruction as rec
from .data import LabeledDataset, UnlabeledDataset
from .errors import EvaluationError, SemiSdfError
from .model import ConditionalSdfModel, DecoderConfig, EncoderConfig
from .training import TrainConfig, refine, train_stage1, train_stage2

log = logging.getLogger(__name__)

FLAVORS = ("squared", "unsquared")
ARMS = ("proposed", "only_meta", "only_semi", "sup_only")
GRADIENT_ARM = "gradient_meta"
CSV_COLUMNS = ("arm", "split", "category", "shape_id", "seed", "cd", "sign_acc", "empty")


@dataclass(frozen=True)
class ChamferConfig:
    samples: int = 30000
    seed: int = 0
    flavor: str = "squared"

    def __post_init__(self):
        if self.samples < 1:
            raise EvaluationError("sample count must be >= 1")
        if self.flavor not in FLAVORS:
            raise EvaluationError(f"unknown chamfer flavor {self.flavor!r}")


@dataclass(frozen=True)
class NoiseConfig:
    variances: tuple = (0.0, 0.01, 0.05, 0.1, 0.15, 0.2)
    seed: int = 0

    def __post_init__(self):
        v = np.asarray(self.variances, dtype=np.float64)
        object.__setattr__(self, "variances", tuple(float(x) for x in v))
        if v.size == 0 or np.any(v < 0.0) or np.any(np.diff(v) <= 0.0):
            raise EvaluationError("noise variances must be nonnegative and strictly increasing")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def sample_mesh_surface(mesh: rec.TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """``n`` points uniformly distributed over the mesh surface."""
    if mesh.is_empty:
        raise EvaluationError("cannot sample an empty mesh")
    if n < 1:
        raise EvaluationError("sample count must be >= 1")
    rng = np.random.default_rng(seed)
    areas = mesh.areas()
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1.0
    u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
    a, b, c = (mesh.vertices[mesh.triangles[tri, i]] for i in range(3))
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def _one_way(src: np.ndarray, dst: np.ndarray, flavor: str) -> float:
    d = geo.KdTree(dst).query(src)[1]
    return float(np.mean(d * d if flavor == "squared" else d))


def chamfer(a, b, flavor: str = "squared") -> float:
    """Symmetric Chamfer distance between two nonempty point sets."""
    if flavor not in FLAVORS:
        raise EvaluationError(f"unknown chamfer flavor {flavor!r}")
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise EvaluationError("chamfer needs two nonempty point sets")
    return _one_way(a, b, flavor) + _one_way(b, a, flavor)


def chamfer_brute(a, b, flavor: str = "squared") -> float:
    """O(|A| |B|) reference for :func:`chamfer`."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    d = geo.point_distance(a[:, None, :], b[None, :, :])
    if flavor == "squared":
        d = d * d
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def _field_fn(model, cloud) -> Callable[[np.ndarray], np.ndarray]:
    """Plain ``(M, 3) -> (M,)`` callable for a model, or ``model`` itself if already callable."""
    if isinstance(model, ConditionalSdfModel):
        feats = model.encode(cloud)
        return lambda p: model.predict_values(p, feats)
    return lambda p: np.asarray(model(p), dtype=np.float64).reshape(-1)


def sign_accuracy(model, shape: geo.ShapeInstance, cloud, n_queries: int = 4096, seed: int = 0,
                  band: float = 1e-3, sigma_near: float = 0.05) -> float:
    """Fraction of queries whose predicted sign matches the exact SDF sign.

    Queries are half near-surface (cloud points plus Gaussian jitter) and half
    uniform in the cube; queries with ``|exact_sdf| < band`` are ignored.
    ``model`` is a :class:`ConditionalSdfModel` or any ``(M, 3) -> (M,)`` callable.
    """
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    rng = np.random.default_rng([seed, 3301])
    n_near = n_queries // 2
    near = pts[rng.integers(0, len(pts), n_near)] + rng.normal(scale=sigma_near, size=(n_near, 3))
    x = np.concatenate([near, rng.uniform(-1.0, 1.0, size=(n_queries - n_near, 3))])
    truth = geo.exact_sdf(shape, x)
    keep = np.abs(truth) >= band
    if not keep.any():
        raise EvaluationError("every query fell inside the surface band")
    pred = _field_fn(model, pts)(x[keep])
    return float(np.mean(np.sign(pred) == np.sign(truth[keep])))


@dataclass
class ReconstructionResult:
    cd: float
    mesh: rec.TriangleMesh
    empty: bool


def reconstruction_cd(model, cloud, shape: geo.ShapeInstance, resolution: int = 64,
                      chamfer_cfg: ChamferConfig = ChamferConfig()) -> ReconstructionResult:
    """Mesh the field for ``cloud`` and compare against the clean shape surface.

    An empty reconstruction gives ``cd = inf`` with ``empty=True``.
    """
    fn = _field_fn(model, cloud)
    mesh = rec.marching_cubes(rec.field_from_function(fn, resolution))
    if mesh.is_empty:
        return ReconstructionResult(math.inf, mesh, True)
    got = sample_mesh_surface(mesh, chamfer_cfg.samples, chamfer_cfg.seed)
    ref = geo.sample_surface(shape, chamfer_cfg.samples, chamfer_cfg.seed + 1)
    return ReconstructionResult(chamfer(got, ref, chamfer_cfg.flavor), mesh, False)


@dataclass
class NoisePoint:
    variance: float
    cd: float
    empty: bool


def noise_sweep(model, shape: geo.ShapeInstance, base_cloud, noise: NoiseConfig = NoiseConfig(),
                resolution: int = 64, chamfer_cfg: ChamferConfig = ChamferConfig()) -> list:
    """CD of the reconstruction from the cloud with iid Gaussian noise of each variance."""
    pts = np.asarray(base_cloud, dtype=np.float64).reshape(-1, 3)
    out = []
    for i, var in enumerate(noise.variances):
        noisy = pts
        if var > 0.0:
            rng = np.random.default_rng([noise.seed, i])
            noisy = pts + rng.normal(scale=math.sqrt(var), size=pts.shape)
        r = reconstruction_cd(model, noisy, shape, resolution, chamfer_cfg)
        if r.empty:
            log.warning("empty reconstruction at noise variance %g", var)
        out.append(NoisePoint(var, r.cd, r.empty))
    return out


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def revision() -> str:
    """Short git revision of the working tree, or ``"unknown"`` outside a repository."""
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _summary(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"n": int(v.size), "mean": float(np.mean(v)), "median": float(np.median(v))}


@dataclass
class ExperimentReport:
    """Per-shape records plus metadata; summaries are computed on demand."""

    records: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    failed_arms: dict = field(default_factory=dict)

    def add(self, arm: str, split: str, category: str, shape_id: str, seed: int, cd: float,
            sign_acc: Optional[float] = None, empty: bool = False):
        self.records.append({"arm": arm, "split": split, "category": category, "shape_id": shape_id,
                             "seed": int(seed), "cd": float(cd),
                             "sign_acc": None if sign_acc is None else float(sign_acc),
                             "empty": bool(empty)})

    def select(self, **match) -> list:
        return [r for r in self.records if all(r[k] == v for k, v in match.items())]

    def cds(self, **match) -> np.ndarray:
        return np.array([r["cd"] for r in self.select(**match)], dtype=np.float64)

    def summary(self) -> dict:
        """``{arm: {split: {...}, "categories": {category: {...}}}}`` of CD mean/median."""
        out = {}
        for arm in sorted({r["arm"] for r in self.records}):
            entry = {"categories": {}}
            for split in sorted({r["split"] for r in self.select(arm=arm)}):
                entry[split] = _summary(self.cds(arm=arm, split=split))
            for cat in sorted({r["category"] for r in self.select(arm=arm)}):
                entry["categories"][cat] = _summary(self.cds(arm=arm, category=cat))
            out[arm] = entry
        return out

    def seed_medians(self, arm: str, **match) -> dict:
        """Median CD per seed for one arm."""
        seeds = sorted({r["seed"] for r in self.select(arm=arm, **match)})
        return {s: float(np.median(self.cds(arm=arm, seed=s, **match))) for s in seeds}

    def to_dict(self) -> dict:
        return {"schema": "semisdf.report/1", "metadata": self.metadata, "records": self.records,
                "summary": self.summary(), "failed_arms": self.failed_arms}

    def write(self, json_path, csv_path=None) -> tuple:
        json_path = Path(json_path)
        doc = self.to_dict()
        validate_report(doc)
        json_path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=_json_default))
        csv_path = Path(csv_path) if csv_path else json_path.with_suffix(".csv")
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            w.writeheader()
            for r in self.records:
                w.writerow({k: ("" if r[k] is None else r[k]) for k in CSV_COLUMNS})
        return json_path, csv_path


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def validate_report(doc: dict):
    """Check the documented report layout; raises :class:`EvaluationError`."""
    for key in ("schema", "metadata", "records", "summary"):
        if key not in doc:
            raise EvaluationError(f"report is missing {key!r}")
    if doc["schema"] != "semisdf.report/1":
        raise EvaluationError(f"unknown report schema {doc['schema']!r}")
    for r in doc["records"]:
        missing = set(CSV_COLUMNS) - set(r)
        if missing:
            raise EvaluationError(f"report record is missing {sorted(missing)}")
        if not (isinstance(r["cd"], float) and (r["cd"] >= 0.0)):
            raise EvaluationError(f"bad CD value {r['cd']!r}")
    for arm, entry in doc["summary"].items():
        for split, s in entry.items():
            if split != "categories" and s["n"] < 1:
                raise EvaluationError(f"empty summary for {arm}/{split}")


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

@dataclass
class EvalItem:
    """A held-out or seen shape with its conditioning cloud."""

    shape_id: str
    category_id: str
    shape: geo.ShapeInstance
    cloud: np.ndarray
    split: str


@dataclass
class AblationSpec:
    """Everything needed to train and score the ablation arms.

    * ``proposed``: stage 1 for ``stage1.epochs``, then stage 2 for ``stage2.epochs``.
    * ``only_meta``: the stage-1 model that ``proposed`` starts its stage 2 from.
    * ``only_semi``: stage 2 from scratch for ``stage1.epochs + stage2.epochs``.
    * ``sup_only``: supervised training on the labeled set (no episodes, no
      unlabeled data) for the same total number of epochs.
    * ``gradient_meta``: stage 1 with the gradient-pull surface estimate.
    """

    labeled: LabeledDataset
    unlabeled: UnlabeledDataset
    eval_items: list
    stage1: TrainConfig
    stage2: TrainConfig
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    seeds: tuple = (0, 1, 2)
    arms: tuple = ARMS
    resolution: int = 64
    chamfer: ChamferConfig = field(default_factory=lambda: ChamferConfig(samples=10000))
    sign_queries: int = 4096
    refine_iters: int = 0


def _arm_models(spec: AblationSpec, seed: int, arms) -> dict:
    """Train the requested arms for one seed; failed arms map to their exception."""
    s1 = spec.stage1.replace(seed=seed, checkpoint_dir=None, metrics_path=None)
    s2 = spec.stage2.replace(seed=seed, checkpoint_dir=None, metrics_path=None)
    total = s1.epochs + s2.epochs
    fresh = lambda: ConditionalSdfModel(spec.encoder, spec.decoder, seed)  # noqa: E731
    out, cache = {}, {}

    def stage1_model():
        if "s1" not in cache:
            cache["s1"] = train_stage1(fresh(), spec.labeled, s1).model
        return cache["s1"]

    jobs = {
        "only_meta": lambda: stage1_model().copy(),
        "proposed": lambda: train_stage2(stage1_model().copy(), spec.labeled, spec.unlabeled, s2).model,
        "only_semi": lambda: train_stage2(fresh(), spec.labeled, spec.unlabeled, s2.replace(epochs=total)).model,
        "sup_only": lambda: train_stage2(fresh(), spec.labeled, UnlabeledDataset(), s2.replace(epochs=total)).model,
        GRADIENT_ARM: lambda: train_stage1(fresh(), spec.labeled, s1.replace(estimator="gradient")).model,
    }
    for arm in arms:
        if arm not in jobs:
            raise EvaluationError(f"unknown ablation arm {arm!r}")
        t0 = time.perf_counter()
        try:
            out[arm] = jobs[arm]()
        except SemiSdfError as exc:
            log.error("arm %s (seed %d) failed: %s", arm, seed, exc)
            out[arm] = exc
        log.info("arm %s seed %d trained in %.1fs", arm, seed, time.perf_counter() - t0)
    return out


def score_model(report: ExperimentReport, arm: str, seed: int, model, items: Sequence[EvalItem],
                spec: AblationSpec):
    for it in items:
        m = refine(model, it.cloud, spec.refine_iters, seed=seed) if spec.refine_iters else model
        r = reconstruction_cd(m, it.cloud, it.shape, spec.resolution, spec.chamfer)
        acc = sign_accuracy(m, it.shape, it.cloud, spec.sign_queries, seed)
        report.add(arm, it.split, it.category_id, it.shape_id, seed, r.cd, acc, r.empty)


def run_ablation(spec: AblationSpec, on_model: Optional[Callable] = None) -> ExperimentReport:
    """Train every arm for every seed and score all evaluation shapes.

    ``on_model(arm, seed, model)`` is called for each trained model (e.g. to save it).
    """
    report = ExperimentReport(metadata={
        "stage1_config_hash": spec.stage1.hash(), "stage2_config_hash": spec.stage2.hash(),
        "config_hash": hashlib.sha256((spec.stage1.hash() + spec.stage2.hash()).encode()).hexdigest()[:16],
        "encoder": asdict(spec.encoder), "decoder": asdict(spec.decoder),
        "seeds": list(spec.seeds), "arms": list(spec.arms), "resolution": spec.resolution,
        "chamfer": asdict(spec.chamfer), "refine_iters": spec.refine_iters, "revision": revision(),
    })
    for seed in spec.seeds:
        for arm, model in _arm_models(spec, seed, spec.arms).items():
            if isinstance(model, Exception):
                report.failed_arms.setdefault(arm, []).append({"seed": seed, "error": str(model)})
                continue
            if on_model is not None:
                on_model(arm, seed, model)
            score_model(report, arm, seed, model, spec.eval_items, spec)
    return report
