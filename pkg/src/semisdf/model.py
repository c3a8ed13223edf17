"""Conditional SDF network: point-cloud encoder plus MLP decoder.

The encoder runs a shared per-point MLP over the conditioning cloud. The
``global-latent`` variant max-pools the point features into one vector; the
``grid-local`` variant additionally averages them into a coarse feature grid that
is trilinearly sampled at each query, so every query sees features of the
geometry around it. The decoder maps ``[x, feature(x)]`` to a signed distance.
"""

from __future__ import annotations

import functools
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ConfigurationError

log = logging.getLogger(__name__)

MAGIC = b"GSDF"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    variant: str = "grid-local"
    widths: tuple = (64, 128, 256)
    latent_dim: int = 256
    grid_resolution: int = 16
    smoothing_passes: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.variant not in ("grid-local", "global-latent"):
            raise ConfigurationError(f"unknown encoder variant {self.variant!r}")
        if not self.widths or min(self.widths) < 1 or self.latent_dim < 1:
            raise ConfigurationError("encoder widths and latent_dim must be positive")
        if self.grid_resolution < 4:
            raise ConfigurationError("grid_resolution must be >= 4")
        if self.smoothing_passes < 0:
            raise ConfigurationError("smoothing_passes must be >= 0")


@dataclass(frozen=True)
class DecoderConfig:
    hidden_layers: int = 4
    hidden_dim: int = 128
    activation: str = "relu"

    def __post_init__(self):
        if self.hidden_layers < 1 or self.hidden_dim < 1:
            raise ConfigurationError("decoder needs at least one hidden layer")
        if self.activation not in ("relu", "tanh"):
            raise ConfigurationError(f"unsupported activation {self.activation!r}")


FULL_DECODER = DecoderConfig(hidden_layers=8, hidden_dim=512)


@dataclass
class LatentFeatures:
    """Encoding of one cloud: a pooled vector and, for grid-local, a node grid."""

    global_vec: Tensor
    grid: Optional[Tensor] = None
    resolution: int = 0


def canonical_order(cloud: np.ndarray) -> np.ndarray:
    """Sort points lexicographically so the encoding ignores input order bit for bit."""
    return cloud[np.lexsort((cloud[:, 2], cloud[:, 1], cloud[:, 0]))]


@functools.lru_cache(maxsize=8)
def _smoother(resolution: int, passes: int):
    return ad.grid_smoothing_matrix(resolution, passes)


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 2.0):
    bound = np.sqrt(3.0 * gain / fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return Tensor(w, requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True)


@dataclass
class ConditionalSdfModel:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    seed: int = 0
    names: list = field(default_factory=list, init=False)
    params: list = field(default_factory=list, init=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        dims = (3,) + self.encoder.widths
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            self._add(f"enc.{i}", *_init_linear(rng, a, b))
        self._add("enc.out", *_init_linear(rng, dims[-1], self.encoder.latent_dim, gain=1.0))
        if self.encoder.variant == "grid-local":
            # zero-initialized: training starts from a global-only model and learns the local branch
            lat = self.encoder.latent_dim
            self._add("loc.proj", Tensor(np.zeros((lat, lat)), requires_grad=True),
                      Tensor(np.zeros(lat), requires_grad=True))
        width = self.decoder.hidden_dim
        fan_in = 3 + self.encoder.latent_dim
        for i in range(self.decoder.hidden_layers):
            self._add(f"dec.{i}", *_init_linear(rng, fan_in, width))
            fan_in = width
        self._add("dec.out", *_init_linear(rng, fan_in, 1, gain=1.0))

    def _add(self, name, w, b):
        self.names += [f"{name}.weight", f"{name}.bias"]
        self.params += [w, b]

    # -- parameters --------------------------------------------------------

    def parameters(self) -> list:
        return self.params

    def named_parameters(self):
        return list(zip(self.names, self.params))

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params))

    def state(self) -> list:
        return [p.data.copy() for p in self.params]

    def load_state(self, arrays):
        if len(arrays) != len(self.params):
            raise CheckpointError(f"expected {len(self.params)} arrays, got {len(arrays)}")
        for p, a in zip(self.params, arrays):
            a = np.asarray(a, dtype=np.float64)
            if a.shape != p.data.shape:
                raise CheckpointError(f"parameter shape {a.shape} != {p.data.shape}")
            p.data = a.copy()
            p.grad = None

    def copy(self) -> "ConditionalSdfModel":
        other = ConditionalSdfModel(self.encoder, self.decoder, self.seed)
        other.load_state(self.state())
        return other

    def zero_grad(self):
        ad.zero_grad(self.params)

    def config_dict(self) -> dict:
        return {"encoder": asdict(self.encoder), "decoder": asdict(self.decoder), "seed": self.seed}

    def _layers(self, prefix: str, params=None):
        params = self.params if params is None else params
        return [(params[i], params[i + 1]) for i, n in enumerate(self.names)
                if n.startswith(prefix) and n.endswith(".weight")]

    # -- forward -----------------------------------------------------------

    def _act(self, h):
        return ad.relu(h) if self.decoder.activation == "relu" else ad.tanh(h)

    def encode(self, cloud) -> LatentFeatures:
        """Encode a conditioning cloud; invariant to the order of its points."""
        pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("cannot encode an empty cloud")
        pts = canonical_order(pts)
        layers = self._layers("enc.")
        h = Tensor(pts)
        for w, b in layers[:-1]:
            h = ad.relu(ad.add(ad.matmul(h, w), b))
        w, b = layers[-1]
        feats = ad.add(ad.matmul(h, w), b)
        pooled = ad.max_pool_over_points(feats)
        if self.encoder.variant == "global-latent":
            return LatentFeatures(pooled)
        g = self.encoder.grid_resolution
        grid = ad.grid_scatter_mean(pts, feats, g)
        if self.encoder.smoothing_passes:
            grid = ad.sparse_linear(_smoother(g, self.encoder.smoothing_passes), grid)
        return LatentFeatures(pooled, grid, g)

    def query_feature(self, features: LatentFeatures, x, params=None) -> Tensor:
        """Per-query conditioning feature, ``(K, L)``."""
        xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64).reshape(-1, 3))
        if features.grid is None:
            zeros = Tensor(np.zeros((xt.shape[0], features.global_vec.shape[0])))
            return ad.add(zeros, features.global_vec)
        if log.isEnabledFor(logging.DEBUG) and np.any(np.abs(xt.data) > 1.0):
            log.debug("%d queries outside [-1, 1]^3 clamped to the boundary cell",
                      int(np.any(np.abs(xt.data) > 1.0, axis=1).sum()))
        local = ad.grid_gather_trilinear(features.grid, xt, features.resolution)
        (w, b), = self._layers("loc.", params)
        return ad.add(ad.add(ad.matmul(local, w), b), features.global_vec)

    def decode(self, x: Tensor, feat: Tensor, params=None) -> Tensor:
        layers = self._layers("dec.", params)
        h = ad.concat([x, feat], axis=1)
        for w, b in layers[:-1]:
            h = self._act(ad.add(ad.matmul(h, w), b))
        w, b = layers[-1]
        return ad.reshape(ad.add(ad.matmul(h, w), b), (-1,))

    def predict(self, x, features: LatentFeatures) -> Tensor:
        """Signed distance at each query row of ``x``; returns a ``(K,)`` tensor."""
        xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64).reshape(-1, 3))
        return self.decode(xt, self.query_feature(features, xt))

    def predict_values(self, x, features: LatentFeatures, chunk: int = 16384) -> np.ndarray:
        """Tape-free batched prediction as a numpy array."""
        pts = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(pts))
        with ad.no_grad():
            for lo in range(0, len(pts), chunk):
                out[lo:lo + chunk] = self.predict(pts[lo:lo + chunk], features).data
        return out

    def input_gradient(self, x, features: LatentFeatures) -> np.ndarray:
        """Exact gradient of the prediction with respect to each query, ``(K, 3)``.

        Runs on constant copies of the parameters so model gradients stay untouched.
        """
        pts = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        frozen = [Tensor(p.data) for p in self.params]
        feats = LatentFeatures(Tensor(features.global_vec.data),
                               None if features.grid is None else Tensor(features.grid.data),
                               features.resolution)
        with ad.enable_grad():
            xt = Tensor(pts, requires_grad=True)
            s = self.decode(xt, self.query_feature(feats, xt, frozen), frozen)
            ad.backward(ad.reduce_sum(s))
        return np.zeros_like(pts) if xt.grad is None else xt.grad


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: ConditionalSdfModel, path, extra: Optional[dict] = None,
                    extra_arrays: Optional[list] = None) -> Path:
    """Write ``model`` (and optional extra arrays, e.g. optimizer moments) to ``path``.

    Layout: magic ``GSDF``, u32 version, u64 header length, JSON header, then
    little-endian f64 parameter arrays in declaration order, then extra arrays.
    """
    path = Path(path)
    extra_arrays = list(extra_arrays or [])
    header = {
        "config": model.config_dict(),
        "params": [{"name": n, "shape": list(p.data.shape)} for n, p in model.named_parameters()],
        "extra_arrays": [list(np.shape(a)) for a in extra_arrays],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for arr in [p.data for p in model.params] + extra_arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp.replace(path)
    return path


def load_checkpoint_full(path):
    """Read a checkpoint: ``(model, extra dict, list of extra arrays)``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt header") from None
    cfg = header["config"]
    model = ConditionalSdfModel(EncoderConfig(**cfg["encoder"]), DecoderConfig(**cfg["decoder"]),
                                cfg.get("seed", 0))
    shapes = [tuple(p["shape"]) for p in header["params"]] + [tuple(s) for s in header["extra_arrays"]]
    names = [p["name"] for p in header["params"]]
    if names != model.names:
        raise CheckpointError(f"{path}: parameter layout does not match its config")
    offset = 16 + hlen
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape)) * 8
        if offset + n > len(raw):
            raise CheckpointError(f"{path}: truncated parameter data")
        arrays.append(np.frombuffer(raw, dtype="<f8", count=n // 8, offset=offset).reshape(shape).copy())
        offset += n
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after parameter data")
    k = len(header["params"])
    model.load_state(arrays[:k])
    return model, header.get("extra", {}), arrays[k:]


def load_checkpoint(path) -> ConditionalSdfModel:
    return load_checkpoint_full(path)[0]
