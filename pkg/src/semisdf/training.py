"""Two-stage training: episodic meta-learning, then semi-supervision, plus test-time refinement.

Randomness is keyed on ``(seed, stage, epoch, step, role)``, so a run resumed from
an epoch checkpoint replays exactly the trajectory of an uninterrupted run.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .data import (LabeledDataset, UnlabeledDataset, check_stage2_disjoint, unlabeled_pool)
from .errors import ConfigurationError, NumericError
from .losses import (Estimator, LossBreakdown, LossWeights, SignSource, loss_meta, loss_self,
                     loss_semi, loss_sup)
from .model import ConditionalSdfModel, load_checkpoint_full, save_checkpoint

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "step", "stage", "sup_term", "self_term", "point_term", "total", "lr", "wall_ms")

_ROLE_LABELED, _ROLE_UNLABELED, _ROLE_ORDER = 1, 2, 3


@dataclass(frozen=True)
class EpisodeSchedule:
    split_frequency: int = 2
    split_ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.split_frequency < 1:
            raise ConfigurationError("split_frequency must be >= 1")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigurationError("split_ratio must lie strictly between 0 and 1")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 30
    queries_per_cloud: int = 512
    cloud_size: int = 2048
    point_subsample: Optional[int] = 2048
    pool_size: int = 4096
    near_fraction: float = 0.9
    sigma_near: float = 0.05
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    split_frequency: int = 2
    split_ratio: float = 0.5
    estimator: str = "signed"
    lr_schedule: str = "constant"
    lr_final: float = 0.0
    checkpoint_dir: Optional[str] = None
    metrics_path: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.lr <= 0.0:
            raise ConfigurationError("learning rate must be positive")
        if self.queries_per_cloud < 1 or self.cloud_size < 1:
            raise ConfigurationError("queries_per_cloud and cloud_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        Estimator(self.estimator)
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigurationError(f"unknown lr schedule {self.lr_schedule!r}")
        if not 0.0 <= self.lr_final <= self.lr:
            raise ConfigurationError("lr_final must lie in [0, lr]")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for ``epoch``: constant, or cosine from ``lr`` to ``lr_final``."""
        if self.lr_schedule == "constant" or self.epochs <= 1:
            return self.lr
        frac = min(max(epoch, 0), self.epochs - 1) / (self.epochs - 1)
        return self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + math.cos(math.pi * frac))

    @property
    def schedule(self) -> EpisodeSchedule:
        return EpisodeSchedule(self.split_frequency, self.split_ratio, self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def hash(self) -> str:
        d = self.to_dict()
        for k in ("checkpoint_dir", "metrics_path"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(0, [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update of ``params`` in place, from their ``.grad``."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def sgd_step(params, lr: float):
    for p in params:
        if p.grad is not None:
            p.data = p.data - lr * p.grad


# ---------------------------------------------------------------------------
# episodic split
# ---------------------------------------------------------------------------

def split_categories(categories, schedule: EpisodeSchedule, epoch: int) -> tuple:
    """Category partition active at ``epoch``; it changes only when ``epoch % f == 0``."""
    cats = sorted(set(categories))
    if len(cats) < 2:
        raise ConfigurationError("episodic training needs at least two categories")
    if epoch < 0:
        raise ConfigurationError("epoch must be >= 0")
    anchor = epoch - epoch % schedule.split_frequency
    rng = np.random.default_rng([schedule.seed, 7919, anchor])
    order = [cats[i] for i in rng.permutation(len(cats))]
    n_lab = min(max(int(math.floor(schedule.split_ratio * len(cats) + 0.5)), 1), len(cats) - 1)
    return sorted(order[:n_lab]), sorted(order[n_lab:])


def episodic_split(dataset: LabeledDataset, schedule: EpisodeSchedule, epoch: int) -> tuple:
    """``(X_L, X_U)``: category-disjoint sub-datasets covering ``dataset``."""
    lab, unl = split_categories(dataset.categories, schedule, epoch)
    return dataset.subset(lab), dataset.subset(unl)


# ---------------------------------------------------------------------------
# bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: ConditionalSdfModel
    history: list
    checkpoint: Optional[Path] = None
    optimizer_state: Optional[AdamState] = None
    last_epoch: int = -1

    def epoch_means(self, column: str = "total") -> list:
        by_epoch = {}
        for row in self.history:
            by_epoch.setdefault(row["epoch"], []).append(row[column])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


class MetricsWriter:
    """Append-only CSV of per-step loss rows."""

    def __init__(self, path: Optional[str], append: bool = False):
        self.path = Path(path) if path else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not (append and self.path.exists()):
                with open(self.path, "w", newline="") as fh:
                    csv.writer(fh).writerow(METRIC_COLUMNS)

    def write(self, row: dict):
        if self.path is None:
            return
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row[c]) for c in METRIC_COLUMNS])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("epoch", "step", "stage"):
            r[k] = int(r[k])
        for k in ("sup_term", "self_term", "point_term", "total", "lr", "wall_ms"):
            r[k] = float(r[k])
    return rows


def _rng(cfg: TrainConfig, stage: int, epoch: int, step: int, role: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, stage, epoch, step, role])


def _draw(pool, k: int, rng: np.random.Generator):
    idx = rng.choice(len(pool), size=min(k, len(pool)), replace=False)
    return pool.take(np.sort(idx))


def _save_epoch(model, state, cfg: TrainConfig, stage: int, epoch: int) -> Optional[Path]:
    if cfg.checkpoint_dir is None:
        return None
    out = Path(cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    extra = {"stage": stage, "epoch": epoch, "seed": cfg.seed, "config_hash": cfg.hash(),
             "optimizer": cfg.optimizer, "adam_step": state.step if state else 0}
    arrays = (state.m + state.v) if state else []
    path = save_checkpoint(model, out / f"stage{stage}_epoch{epoch:03d}.gsdf", extra, arrays)
    save_checkpoint(model, out / f"stage{stage}_last.gsdf", extra, arrays)
    return path


def load_training_checkpoint(path):
    """``(model, optimizer state, extra)`` from an epoch checkpoint."""
    model, extra, arrays = load_checkpoint_full(path)
    n = len(model.params)
    state = None
    if arrays:
        state = AdamState(int(extra.get("adam_step", 0)), arrays[:n], arrays[n:])
    return model, state, extra


def _supervised_part(model, item, cfg, rng):
    batch = _draw(item.pool, cfg.queries_per_cloud, rng)
    feats = model.encode(item.cloud)
    return loss_sup(model.predict(batch.x, feats), batch.gt_sdf), len(batch)


def _self_part(model, cloud, pool, cfg, rng, sign_source, gt_sign_pool=None) -> LossBreakdown:
    idx = np.sort(rng.choice(len(pool), size=min(cfg.queries_per_cloud, len(pool)), replace=False))
    batch = pool.take(idx)
    gt_sign = None
    if sign_source is SignSource.GROUND_TRUTH:
        gt_sign = gt_sign_pool[idx]
        batch = batch.unlabeled()
    feats = model.encode(cloud)
    return loss_self(model, feats, batch, cloud, sign_source, cfg.weights, gt_sign,
                     Estimator(cfg.estimator), cfg.point_subsample, int(rng.integers(2 ** 31)))


def _optimize(model, state, loss: LossBreakdown, cfg: TrainConfig, lr: float):
    if not np.isfinite(loss.value):
        raise NumericError("non-finite training loss")
    model.zero_grad()
    ad.backward(loss.total)
    if cfg.optimizer == "adam":
        adam_step(model.params, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
    else:
        sgd_step(model.params, lr)


def _resume(model, cfg, resume_from, stage):
    state = AdamState.for_params(model.params)
    start = 0
    if resume_from is not None:
        loaded, loaded_state, extra = load_training_checkpoint(resume_from)
        if extra.get("stage") != stage:
            raise ConfigurationError(f"checkpoint is from stage {extra.get('stage')}, not {stage}")
        model.load_state(loaded.state())
        if loaded_state is not None:
            state = loaded_state
        start = int(extra["epoch"]) + 1
    return state, start


def _run_epochs(model, cfg, stage, start, state, step_fn, plan_fn, resume_from):
    writer = MetricsWriter(cfg.metrics_path, append=resume_from is not None)
    history, ckpt, last = [], None, start - 1
    for epoch in range(start, cfg.epochs):
        lr = cfg.lr_at(epoch)
        plan = plan_fn(epoch)
        for step, work in enumerate(plan):
            t0 = time.perf_counter()
            loss = step_fn(epoch, step, work)
            try:
                _optimize(model, state, loss, cfg, lr)
            except NumericError:
                log.error("stage %d diverged at epoch %d step %d; last checkpoint kept", stage, epoch, step)
                raise
            row = {"epoch": epoch, "step": step, "stage": stage, **loss.row(), "lr": lr,
                   "wall_ms": (time.perf_counter() - t0) * 1e3}
            history.append(row)
            writer.write(row)
        ckpt = _save_epoch(model, state, cfg, stage, epoch) or ckpt
        last = epoch
        log.info("stage %d epoch %d mean total %.5f", stage, epoch,
                 np.mean([r["total"] for r in history if r["epoch"] == epoch]))
    return TrainResult(model, history, ckpt, state, last)


def train_stage1(model: ConditionalSdfModel, dataset: LabeledDataset, cfg: TrainConfig,
                 resume_from=None) -> TrainResult:
    """Episodic meta-learning on labeled data.

    Each epoch the categories are (re)split per the schedule. Every step takes one
    cloud from the supervised half (L1 against labels) and one from the
    pseudo-unlabeled half (self-supervised, ground-truth signs select the branch),
    combined as ``sup + lambda_m * self``.
    """
    schedule = cfg.schedule
    state, start = _resume(model, cfg, resume_from, 1)

    def plan(epoch):
        lab, unl = episodic_split(dataset, schedule, epoch)
        order = _rng(cfg, 1, epoch, 0, _ROLE_ORDER).permutation(len(lab))
        partners = _rng(cfg, 1, epoch, 0, _ROLE_UNLABELED).integers(0, len(unl), len(lab))
        return [(lab.items[i], unl.items[j]) for i, j in zip(order, partners)]

    def step(epoch, k, work):
        lab_item, unl_item = work
        sup, n_sup = _supervised_part(model, lab_item, cfg, _rng(cfg, 1, epoch, k, _ROLE_LABELED))
        self_part = None
        if cfg.weights.lambda_m > 0.0:
            self_part = _self_part(model, unl_item.cloud, unl_item.pool, cfg,
                                   _rng(cfg, 1, epoch, k, _ROLE_UNLABELED), SignSource.GROUND_TRUTH,
                                   unl_item.pool.signs())
        return loss_meta(sup, self_part, cfg.weights, n_sup)

    return _run_epochs(model, cfg, 1, start, state, step, plan, resume_from)


def train_stage2(model: ConditionalSdfModel, labeled: LabeledDataset, unlabeled: UnlabeledDataset,
                 cfg: TrainConfig, resume_from=None) -> TrainResult:
    """Semi-supervised training: all labeled data supervised, unlabeled data self-supervised.

    Each step pairs one labeled cloud with one unlabeled cloud; the unlabeled
    branch uses predicted signs. With no unlabeled data this is plain supervised
    training.
    """
    check_stage2_disjoint(labeled, unlabeled)
    state, start = _resume(model, cfg, resume_from, 2)

    def plan(epoch):
        order = _rng(cfg, 2, epoch, 0, _ROLE_ORDER).permutation(len(labeled))
        if len(unlabeled) == 0:
            return [(labeled.items[i], None) for i in order]
        partners = _rng(cfg, 2, epoch, 0, _ROLE_UNLABELED).integers(0, len(unlabeled), len(labeled))
        return [(labeled.items[i], unlabeled.items[j]) for i, j in zip(order, partners)]

    def step(epoch, k, work):
        lab_item, unl_item = work
        sup, n_sup = _supervised_part(model, lab_item, cfg, _rng(cfg, 2, epoch, k, _ROLE_LABELED))
        self_part = None
        if unl_item is not None and cfg.weights.lambda_s > 0.0:
            self_part = _self_part(model, unl_item.cloud, unl_item.pool, cfg,
                                   _rng(cfg, 2, epoch, k, _ROLE_UNLABELED), SignSource.PREDICTED)
        return loss_semi(sup, self_part, cfg.weights, n_sup)

    return _run_epochs(model, cfg, 2, start, state, step, plan, resume_from)


def refine(model: ConditionalSdfModel, cloud, iters: int = 200, lr: float = 1e-4,
           max_points: int = 5000, queries: int = 512, sigma_near: float = 0.05,
           near_fraction: float = 0.9, weights: LossWeights = LossWeights(),
           point_subsample: Optional[int] = 2048, seed: int = 0) -> ConditionalSdfModel:
    """Fit a copy of ``model`` to a raw cloud with the self-supervised loss only.

    Queries come from the cloud itself (no labels exist on this path). The input
    model is left untouched; on a non-finite loss the best copy so far is returned.
    """
    out = model.copy()
    if iters <= 0:
        return out
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("refine needs a nonempty cloud")
    rng = np.random.default_rng([seed, 4049])
    if len(pts) > max_points:
        pts = pts[np.sort(rng.permutation(len(pts))[:max_points])]
    pool = unlabeled_pool(pts, max(4 * queries, 2048), near_fraction, sigma_near, seed)
    state = AdamState.for_params(out.params)
    best, best_loss = out.copy(), math.inf
    for it in range(iters):
        step_rng = np.random.default_rng([seed, 4049, it])
        idx = np.sort(step_rng.choice(len(pool), size=min(queries, len(pool)), replace=False))
        try:
            feats = out.encode(pts)
            loss = loss_self(out, feats, pool.take(idx), pts, SignSource.PREDICTED, weights,
                             point_subsample=point_subsample, seed=int(step_rng.integers(2 ** 31)))
        except NumericError:
            loss = None
        if loss is None or not np.isfinite(loss.value):
            log.warning("refinement diverged at iteration %d; returning best-so-far copy", it)
            return best
        if loss.value < best_loss:
            best_loss = loss.value
            best = out.copy()
        out.zero_grad()
        ad.backward(loss.total)
        adam_step(out.params, state, lr)
    return out
