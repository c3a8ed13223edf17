"""Command-line entry point: ``semisdf {gen-data, train, reconstruct, eval}``.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import data as data_mod
from . import evaluation as ev
from . import geometry as geo
from . import reconstruction as rec
from .config import RunConfig, preset
from .errors import CheckpointError, ConfigurationError, DatasetError, SemiSdfError
from .io import file_sha256, load_cloud
from .model import ConditionalSdfModel, load_checkpoint
from .training import refine, train_stage1, train_stage2

log = logging.getLogger("semisdf")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
DATA_ENV = "GENSDF_DATA_DIR"


class UsageError(Exception):
    """Bad invocation: maps to exit code 2."""


# ---------------------------------------------------------------------------
# run bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    """What a command produced and everything needed to rerun it."""

    command: str
    config: dict
    config_hash: str
    seeds: list
    data_manifest: Optional[str] = None
    data_checksum: Optional[str] = None
    checkpoints: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    figures: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    argv: list = field(default_factory=list)
    revision: str = ""

    def artifacts(self) -> list:
        return self.checkpoints + self.metrics + self.reports + self.figures + (
            [self.data_manifest] if self.data_manifest else [])

    def write(self, path) -> Path:
        missing = [a for a in self.artifacts() if not Path(a).exists()]
        if missing:
            raise SemiSdfError(f"run manifest references missing artifacts: {missing}")
        path = Path(path)
        path.write_text(json.dumps(self.__dict__, indent=1, sort_keys=True))
        return path


@contextlib.contextmanager
def run_lock(directory: Path):
    """Exclusive ownership of a run directory through a ``.lock`` file."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise SemiSdfError(f"{directory} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _thread_limit(n: Optional[int]):
    if n is None:
        return contextlib.nullcontext()
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else preset("desk")
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "resolution", None) is not None:
        cfg = cfg.replace(resolution=args.resolution)
    if getattr(args, "refine_iters", None) is not None:
        cfg = cfg.replace(refine_iters=args.refine_iters)
    if getattr(args, "normalize", False):
        cfg = cfg.replace(normalize=True)
    return cfg


def _data_dir(args) -> Path:
    d = getattr(args, "data", None) or os.environ.get(DATA_ENV)
    if not d:
        raise UsageError(f"no dataset directory: pass --data or set {DATA_ENV}")
    return Path(d)


def _read_data(args) -> data_mod.DiskDataset:
    root = _data_dir(args)
    if not (root / data_mod.MANIFEST_NAME).is_file():
        raise UsageError(f"no dataset at {root} (run gen-data first)")
    return data_mod.read_dataset(root)


def _load_model(path) -> ConditionalSdfModel:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None


def _manifest(command, cfg: RunConfig, argv, t0, **kw) -> RunManifest:
    return RunManifest(command=command, config=cfg.to_dict(), config_hash=cfg.hash(), seeds=list(cfg.seeds),
                       wall_clock_s=time.perf_counter() - t0, argv=list(argv), revision=ev.revision(), **kw)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, argv) -> int:
    t0 = time.perf_counter()
    cfg = _resolve_config(args)
    out = _data_dir(args)
    seed = cfg.data_seed if args.seed is None else args.seed
    splits = data_mod.DESK_SPLITS
    if args.splits:
        try:
            splits = json.loads(Path(args.splits).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read splits file: {exc}") from None
    entries = data_mod.make_manifest(splits, seed)
    with run_lock(out):
        path = data_mod.write_dataset(out, entries, cfg.cloud_size, seed)
        stats = data_mod.read_dataset(out).statistics()
        man = _manifest("gen-data", cfg, argv, t0, data_manifest=str(path), data_checksum=file_sha256(path))
        man.write(out / "run_manifest.json")
    print(json.dumps({"manifest": str(path), "splits": stats}, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_train(args, argv) -> int:
    t0 = time.perf_counter()
    cfg = _resolve_config(args)
    if args.stage == 2 and not args.init and not args.from_scratch:
        raise UsageError("stage 2 needs --init CHECKPOINT (or --from-scratch)")
    if args.stage == 1 and args.from_scratch:
        raise UsageError("--from-scratch only applies to stage 2")
    ds = _read_data(args)
    tc = cfg.stage1 if args.stage == 1 else cfg.stage2
    labeled = ds.labeled(tc.pool_size, tc.near_fraction, tc.sigma_near, cfg.data_seed)
    unlabeled = ds.unlabeled(tc.pool_size, tc.near_fraction, tc.sigma_near, cfg.data_seed) if args.stage == 2 else None
    if args.stage == 2:
        data_mod.check_stage2_disjoint(labeled, unlabeled)
    if args.dry_run:
        print(json.dumps({"config": cfg.to_dict(), "config_hash": cfg.hash(), "dataset": ds.statistics(),
                          "stage": args.stage}, indent=1, sort_keys=True))
        return EXIT_OK
    out = Path(args.out)
    with run_lock(out):
        tc = tc.replace(checkpoint_dir=str(out), metrics_path=str(out / f"stage{args.stage}_metrics.csv"))
        if args.init:
            model = _load_model(args.init)
        else:
            model = ConditionalSdfModel(cfg.encoder, cfg.decoder, tc.seed)
        if args.stage == 1:
            result = train_stage1(model, labeled, tc, resume_from=args.resume)
        else:
            result = train_stage2(model, labeled, unlabeled, tc, resume_from=args.resume)
        last = out / f"stage{args.stage}_last.gsdf"
        figs = []
        if not args.no_figures and result.history:
            from .plotting import plot_training

            figs.append(str(plot_training(result.history, out / f"stage{args.stage}_loss.png")))
        dm = ds.root / data_mod.MANIFEST_NAME
        man = _manifest(f"train-stage{args.stage}", cfg, argv, t0, data_manifest=str(dm),
                        data_checksum=file_sha256(dm), checkpoints=[str(last)],
                        metrics=[tc.metrics_path], figures=figs)
        man.write(out / f"stage{args.stage}_run_manifest.json")
    em = result.epoch_means()
    print(json.dumps({"checkpoint": str(last), "epochs": len(em),
                      "first_epoch_loss": em[0] if em else None, "last_epoch_loss": em[-1] if em else None}))
    return EXIT_OK


def _prepare_cloud(cloud: np.ndarray, normalize: bool):
    if not normalize:
        return cloud, np.zeros(3), 1.0
    return geo.recenter_and_normalize(cloud)


def cmd_reconstruct(args, argv) -> int:
    t0 = time.perf_counter()
    cfg = _resolve_config(args)
    model = _load_model(args.checkpoint)
    if not Path(args.cloud).is_file():
        raise UsageError(f"point cloud not found: {args.cloud}")
    try:
        raw = load_cloud(args.cloud)
    except DatasetError as exc:
        raise UsageError(str(exc)) from None
    if len(raw) == 0:
        raise UsageError("point cloud is empty")
    cloud, center, scale = _prepare_cloud(raw, cfg.normalize)
    seed = cfg.seeds[0]
    if cfg.refine_iters:
        model = refine(model, cloud, cfg.refine_iters, cfg.refine_lr, cfg.refine_points, seed=seed)
    field_ = rec.evaluate_grid(model, cloud, cfg.resolution)
    mesh = rec.marching_cubes(field_)
    if cfg.normalize and not mesh.is_empty:
        mesh = rec.TriangleMesh(mesh.vertices * scale + center, mesh.triangles)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rec.export_mesh(mesh, out)
    reports = []
    if args.grid_out:
        reports.append(str(rec.save_grid(field_, args.grid_out)))
    man = _manifest("reconstruct", cfg, argv, t0, checkpoints=[str(args.checkpoint)], reports=[str(out)] + reports)
    man.write(out.with_suffix(".run.json"))
    print(json.dumps({"mesh": str(out), "vertices": len(mesh.vertices), "triangles": len(mesh.triangles),
                      "empty": mesh.is_empty}))
    return EXIT_OK


def _eval_items(ds: data_mod.DiskDataset, split: str, per_category: Optional[int]) -> list:
    out, counts = [], {}
    for e in ds.split(split):
        c = e.shape.category_id
        if per_category is not None and counts.get(c, 0) >= per_category:
            continue
        counts[c] = counts.get(c, 0) + 1
        out.append(ev.EvalItem(e.shape_id, c, e.shape, ds.clouds[e.shape_id],
                               "seen" if split == "labeled" else "unseen"))
    return out


def cmd_eval(args, argv) -> int:
    t0 = time.perf_counter()
    cfg = _resolve_config(args)
    ds = _read_data(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    figs, ckpts = [], []
    from . import plotting

    if args.mode == "ablation":
        s1, s2 = cfg.stage1, cfg.stage2
        spec = ev.AblationSpec(
            labeled=ds.labeled(s1.pool_size, s1.near_fraction, s1.sigma_near, cfg.data_seed),
            unlabeled=ds.unlabeled(s2.pool_size, s2.near_fraction, s2.sigma_near, cfg.data_seed),
            eval_items=_eval_items(ds, "labeled", cfg.eval_per_category)
            + _eval_items(ds, "test", cfg.eval_per_category),
            stage1=s1, stage2=s2, encoder=cfg.encoder, decoder=cfg.decoder, seeds=cfg.seeds,
            arms=tuple(args.arms.split(",")) if args.arms else ev.ARMS, resolution=cfg.resolution,
            chamfer=cfg.chamfer, refine_iters=cfg.refine_iters)
        report = ev.run_ablation(spec)
        report.metadata["config_hash"] = cfg.hash()
        jp, cp = report.write(out.with_suffix(".json"), out.with_suffix(".csv"))
        if not args.no_figures:
            figs.append(str(plotting.plot_ablation(report, out.with_suffix(".png"))))
        reports = [str(jp), str(cp)]
    else:
        if not args.checkpoint:
            raise UsageError(f"--checkpoint is required for mode {args.mode!r}")
        model = _load_model(args.checkpoint)
        ckpts.append(str(args.checkpoint))
        split = "labeled" if args.mode == "seen" else "test"
        items = _eval_items(ds, split, cfg.eval_per_category)
        if not items:
            raise UsageError(f"dataset has no {split!r} shapes")
        if args.mode == "noise":
            reports, fig = _noise_report(model, items, cfg, out, args.no_figures)
            figs += fig
        else:
            report = ev.ExperimentReport(metadata={"config_hash": cfg.hash(), "seeds": list(cfg.seeds),
                                                   "revision": ev.revision(), "checkpoint": str(args.checkpoint),
                                                   "mode": args.mode, "chamfer": cfg.chamfer.__dict__})
            spec = _score_spec(cfg)
            ev.score_model(report, "checkpoint", cfg.seeds[0], model, items, spec)
            jp, cp = report.write(out.with_suffix(".json"), out.with_suffix(".csv"))
            reports = [str(jp), str(cp)]
            if not args.no_figures:
                figs.append(str(plotting.plot_category_cd(report, out.with_suffix(".png"))))
    man = _manifest(f"eval-{args.mode}", cfg, argv, t0, data_manifest=str(ds.root / data_mod.MANIFEST_NAME),
                    checkpoints=ckpts, reports=reports, figures=figs)
    man.write(out.with_suffix(".run.json"))
    print(json.dumps({"reports": reports, "figures": figs}))
    return EXIT_OK


def _score_spec(cfg: RunConfig) -> ev.AblationSpec:
    return ev.AblationSpec(None, None, [], cfg.stage1, cfg.stage2, cfg.encoder, cfg.decoder, cfg.seeds,
                           (), cfg.resolution, cfg.chamfer, refine_iters=cfg.refine_iters)


def _noise_report(model, items, cfg: RunConfig, out: Path, no_figures: bool):
    import csv

    per_var = {v: [] for v in cfg.noise.variances}
    for it in items:
        for p in ev.noise_sweep(model, it.shape, it.cloud, cfg.noise, cfg.resolution, cfg.chamfer):
            per_var[p.variance].append(p)
    rows = []
    for var, pts in per_var.items():
        cds = np.array([p.cd for p in pts])
        rows.append({"variance": var, "cd_mean": float(np.mean(cds)), "cd_median": float(np.median(cds)),
                     "n_shapes": len(pts), "n_empty": sum(p.empty for p in pts)})
    cp = out.with_suffix(".csv")
    with open(cp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    jp = out.with_suffix(".json")
    jp.write_text(json.dumps({"schema": "semisdf.noise/1", "config_hash": cfg.hash(), "rows": rows,
                              "shapes": [it.shape_id for it in items]}, indent=1, sort_keys=True))
    figs = []
    if not no_figures:
        from .plotting import plot_noise

        figs.append(str(plot_noise(rows, out.with_suffix(".png"))))
    return [str(jp), str(cp)], figs


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semisdf", description="Semi-supervised conditional SDF toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON run config (overlaid on the desk preset)")
        sp.add_argument("--seed", type=int, help="override every seed in the config")
        sp.add_argument("--threads", type=int, help="cap BLAS threads")
        if data:
            sp.add_argument("--data", help=f"dataset directory (default ${DATA_ENV})")

    g = sub.add_parser("gen-data", help="synthesize the benchmark dataset")
    common(g)
    g.add_argument("--splits", help="JSON file {split: {family: count}} replacing the desk benchmark")

    t = sub.add_parser("train", help="run training stage 1 or 2")
    common(t)
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--init", help="initial checkpoint (required for stage 2)")
    t.add_argument("--from-scratch", action="store_true", help="stage 2 without a stage-1 checkpoint")
    t.add_argument("--resume", help="epoch checkpoint of this stage to resume from")
    t.add_argument("--dry-run", action="store_true", help="print resolved config and dataset statistics")
    t.add_argument("--no-figures", action="store_true")

    r = sub.add_parser("reconstruct", help="mesh the zero level set for one cloud")
    common(r, data=False)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--cloud", required=True, help=".xyz or .pcb point cloud")
    r.add_argument("--out", required=True, help="output .obj")
    r.add_argument("--resolution", type=int)
    r.add_argument("--refine-iters", type=int)
    r.add_argument("--normalize", action="store_true", help="recenter and normalize the cloud first")
    r.add_argument("--grid-out", help="also dump the field as a .grid file")

    e = sub.add_parser("eval", help="score a checkpoint or run the ablation")
    common(e)
    e.add_argument("--mode", choices=("seen", "unseen", "noise", "ablation"), required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--out", required=True, help="report path stem (.json/.csv/.png written)")
    e.add_argument("--resolution", type=int)
    e.add_argument("--refine-iters", type=int)
    e.add_argument("--arms", help="comma-separated subset of ablation arms")
    e.add_argument("--no-figures", action="store_true")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "reconstruct": cmd_reconstruct, "eval": cmd_eval}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            return COMMANDS[args.command](args, argv)
    except (UsageError, ConfigurationError) as exc:
        print(f"semisdf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SemiSdfError, OSError) as exc:
        print(f"semisdf: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
