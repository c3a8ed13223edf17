"""Run configuration: model, both training stages, reconstruction and evaluation settings.

``desk`` is the default preset, sized for a single CPU core. ``full`` switches to
the larger decoder, full-size clouds and 256^3 grids.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigurationError
from .evaluation import ChamferConfig, NoiseConfig
from .losses import LossWeights
from .model import DecoderConfig, EncoderConfig
from .training import TrainConfig


def _desk_stage1() -> TrainConfig:
    return TrainConfig(lr=1e-3, epochs=50, queries_per_cloud=256, cloud_size=2048, point_subsample=256,
                       pool_size=1024, lr_schedule="cosine", lr_final=1e-5)


def _desk_stage2() -> TrainConfig:
    return _desk_stage1().replace(lr=1e-4, epochs=30, lr_schedule="constant", lr_final=0.0)


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(widths=(32, 64, 128), latent_dim=128))
    decoder: DecoderConfig = field(default_factory=lambda: DecoderConfig(hidden_layers=4, hidden_dim=256))
    stage1: TrainConfig = field(default_factory=_desk_stage1)
    stage2: TrainConfig = field(default_factory=_desk_stage2)
    resolution: int = 64
    refine_iters: int = 0
    refine_lr: float = 1e-4
    refine_points: int = 5000
    normalize: bool = False
    chamfer: ChamferConfig = field(default_factory=lambda: ChamferConfig(samples=30000))
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    seeds: tuple = (0, 1, 2)
    eval_per_category: Optional[int] = None
    data_seed: int = 0

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.resolution < 8:
            raise ConfigurationError("resolution must be >= 8")
        if self.refine_iters < 0:
            raise ConfigurationError("refine_iters must be >= 0")
        if not self.seeds:
            raise ConfigurationError("need at least one seed")

    @property
    def cloud_size(self) -> int:
        return self.stage1.cloud_size

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def hash(self) -> str:
        d = self.to_dict()
        for k in ("stage1", "stage2"):
            d[k].pop("checkpoint_dir")
            d[k].pop("metrics_path")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def with_seed(self, seed: int) -> "RunConfig":
        return self.replace(stage1=self.stage1.replace(seed=seed), stage2=self.stage2.replace(seed=seed),
                            seeds=(seed,))

    @classmethod
    def from_dict(cls, d: dict, base: Optional["RunConfig"] = None) -> "RunConfig":
        """Overlay ``d`` on ``base`` (default: the desk preset); unknown keys are errors."""
        base = base or cls()
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known - {"preset"}
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        kw = {}
        for name, value in d.items():
            if name == "preset":
                continue
            current = getattr(base, name)
            if dataclasses.is_dataclass(current):
                merged = dataclasses.asdict(current)
                bad = set(value) - set(merged)
                if bad:
                    raise ConfigurationError(f"unknown keys in {name!r}: {sorted(bad)}")
                merged.update(value)
                if isinstance(current, TrainConfig) and isinstance(merged["weights"], dict):
                    merged["weights"] = LossWeights(**merged["weights"])
                try:
                    kw[name] = type(current)(**merged)
                except TypeError as exc:
                    raise ConfigurationError(f"bad {name!r} section: {exc}") from None
            else:
                kw[name] = value
        return dataclasses.replace(base, **kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        """Read a JSON config; ``{"preset": "full"}`` selects the base preset."""
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigurationError("config file must hold a JSON object")
        return cls.from_dict(d, preset(d.get("preset", "desk")))


def preset(name: str) -> RunConfig:
    if name == "desk":
        return RunConfig()
    if name == "full":
        s1 = TrainConfig(lr=1e-4, epochs=50, queries_per_cloud=512, cloud_size=5000, point_subsample=2048,
                         pool_size=4096)
        return RunConfig(encoder=EncoderConfig(), decoder=DecoderConfig(hidden_layers=8, hidden_dim=512),
                         stage1=s1, stage2=s1.replace(epochs=30), resolution=256, refine_iters=200)
    raise ConfigurationError(f"unknown preset {name!r}")
