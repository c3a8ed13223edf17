"""Training objectives.

* ``loss_sup``: mean L1 error against ground-truth signed distances.
* ``loss_self``: squared distance between the nearest cloud point ``t`` of each
  query and its estimate ``t_hat`` built from the predicted distance, plus a
  small L1 term pulling predictions at the cloud points to zero.
* ``loss_meta`` / ``loss_semi``: supervised part plus a weighted self part.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import LossError

SKIP_EPS = 1e-9


class SignSource(str, enum.Enum):
    PREDICTED = "predicted"
    GROUND_TRUTH = "ground_truth"


class Estimator(str, enum.Enum):
    """How ``t_hat`` is formed: signed nearest-neighbor direction or the input gradient."""

    SIGNED = "signed"
    GRADIENT = "gradient"


@dataclass(frozen=True)
class LossWeights:
    lambda_m: float = 0.1
    lambda_s: float = 0.1
    lambda_p: float = 0.01

    def __post_init__(self):
        if min(self.lambda_m, self.lambda_s, self.lambda_p) < 0.0:
            raise LossError("loss weights must be nonnegative")


@dataclass
class LossBreakdown:
    """Scalar loss with its components.

    ``total == sup_term + weight * (self_term + lambda_p * point_term)`` where
    ``weight`` is the stage coefficient (1 for a bare self loss).
    """

    total: Tensor
    sup_term: float = 0.0
    self_term: float = 0.0
    point_term: float = 0.0
    n_sup: int = 0
    n_self: int = 0
    n_skipped: int = 0
    n_point: int = 0

    @property
    def value(self) -> float:
        return float(self.total.data)

    def row(self) -> dict:
        return {"sup_term": self.sup_term, "self_term": self.self_term,
                "point_term": self.point_term, "total": self.value}


def loss_sup(preds, gts) -> Tensor:
    """Mean absolute error; ``preds`` may be a tensor (differentiable) or plain numbers."""
    p = preds if isinstance(preds, Tensor) else Tensor(np.asarray(preds, dtype=np.float64).reshape(-1))
    g = np.asarray(gts, dtype=np.float64).reshape(-1)
    if p.data.reshape(-1).shape != g.shape:
        raise LossError(f"length mismatch: {p.data.size} predictions vs {g.size} targets")
    if g.size == 0:
        raise LossError("loss_sup on an empty batch")
    return ad.reduce_mean(ad.abs_(ad.sub(ad.reshape(p, (-1,)), Tensor(g))))


def _rows(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64).reshape(-1, 3)


def branch_signs(phi, sign_source: SignSource, gt_sign=None) -> np.ndarray:
    """+1 / -1 per sample selecting the surface-estimate branch."""
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    if SignSource(sign_source) is SignSource.GROUND_TRUTH:
        if gt_sign is None:
            raise LossError("ground-truth sign source needs gt_sign")
        s = np.broadcast_to(np.asarray(gt_sign, dtype=np.float64).reshape(-1), phi.shape)
    else:
        s = phi
    return np.where(s >= 0.0, 1.0, -1.0)


def t_hat_signed(x, t, phi, sign_source=SignSource.PREDICTED, gt_sign=None) -> np.ndarray:
    """Surface-point estimate from the direction to the nearest cloud point.

    With ``d = (x - t) / |x - t|``: ``x - d * phi`` on the nonnegative branch and
    ``x + d * phi`` on the negative one, the branch chosen by ``sign_source``.
    Rows with ``|x - t| < 1e-9`` are skipped and come back as NaN.
    """
    single = np.ndim(x) == 1
    x, t = _rows(x), _rows(t)
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    diff = x - t
    norm = np.linalg.norm(diff, axis=1)
    ok = norm >= SKIP_EPS
    d = np.divide(diff, norm[:, None], out=np.full_like(diff, np.nan), where=ok[:, None])
    sigma = branch_signs(phi, sign_source, gt_sign)
    out = x - (sigma * phi)[:, None] * d
    return out[0] if single else out


def t_hat_gradient(x, phi, grad) -> np.ndarray:
    """Surface-point estimate ``x - phi * grad / |grad|``; zero gradients give NaN rows."""
    single = np.ndim(x) == 1
    x, g = _rows(x), _rows(grad)
    phi = np.asarray(phi, dtype=np.float64).reshape(-1)
    norm = np.linalg.norm(g, axis=1)
    ok = norm >= SKIP_EPS
    n = np.divide(g, norm[:, None], out=np.full_like(g, np.nan), where=ok[:, None])
    out = x - phi[:, None] * n
    return out[0] if single else out


def self_residual_term(x, t, phi: Tensor, directions: np.ndarray) -> Tensor:
    """Mean over rows of ``|x - directions * phi - t|^2``, differentiable in ``phi``.

    ``directions`` already carries the branch sign (``sigma * d`` or the unit gradient).
    """
    k = len(x)
    phi3 = ad.concat([ad.reshape(phi, (-1, 1))] * 3, axis=1)
    res = ad.sub(Tensor(_rows(x) - _rows(t)), ad.mul(Tensor(directions), phi3))
    return ad.scalar_mul(ad.reduce_sum(ad.square(res)), 1.0 / k)


def loss_self(model, features, batch, cloud, sign_source=SignSource.PREDICTED,
              weights: LossWeights = LossWeights(), gt_sign=None,
              estimator: Estimator = Estimator.SIGNED, point_subsample: Optional[int] = 2048,
              seed: int = 0) -> LossBreakdown:
    """Self-supervised loss on one cloud: surface-estimate term + lambda_p * point term.

    ``batch`` is a :class:`~semisdf.geometry.QueryBatch` with nearest-neighbor
    annotations; ground-truth distances, if the batch has them, are never read.
    ``gt_sign`` is only consulted when ``sign_source`` is ground truth.
    Denominators count only non-skipped samples.
    """
    sign_source = SignSource(sign_source)
    estimator = Estimator(estimator)
    x = _rows(batch.x)
    t = _rows(batch.nn)
    if sign_source is SignSource.GROUND_TRUTH:
        if gt_sign is None:
            raise LossError("ground-truth sign source needs gt_sign")
        gt_sign = np.asarray(gt_sign, dtype=np.float64).reshape(-1)

    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if point_subsample is not None and len(pts) > point_subsample:
        pick = np.sort(np.random.default_rng(seed).permutation(len(pts))[:point_subsample])
        pts = pts[pick]

    if estimator is Estimator.GRADIENT:
        grad = model.input_gradient(x, features)
        gnorm = np.linalg.norm(grad, axis=1)
        keep = gnorm >= SKIP_EPS
    else:
        dist = np.linalg.norm(x - t, axis=1)
        keep = dist >= SKIP_EPS
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise LossError("every self-supervised sample was skipped")
    xk, tk = x[keep], t[keep]

    preds = model.predict(np.concatenate([xk, pts]), features)
    phi = ad.slice_rows(preds, 0, n_keep)
    at_points = ad.slice_rows(preds, n_keep, n_keep + len(pts))

    if estimator is Estimator.GRADIENT:
        directions = grad[keep] / gnorm[keep][:, None]
    else:
        sigma = branch_signs(phi.data, sign_source, None if gt_sign is None else gt_sign[keep])
        directions = sigma[:, None] * (xk - tk) / dist[keep][:, None]
    self_t = self_residual_term(xk, tk, phi, directions)
    point_t = ad.reduce_mean(ad.abs_(at_points))
    total = ad.add(self_t, ad.scalar_mul(point_t, weights.lambda_p))
    return LossBreakdown(total, 0.0, float(self_t.data), float(point_t.data),
                         0, n_keep, len(x) - n_keep, len(pts))


def _combine(sup_part: Optional[Tensor], self_part: Optional[LossBreakdown], lam: float,
             n_sup: int = 0) -> LossBreakdown:
    if sup_part is None and self_part is None:
        raise LossError("nothing to combine")
    if self_part is None or lam == 0.0:
        total = sup_part if sup_part is not None else ad.scalar_mul(self_part.total, 0.0)
    elif sup_part is None:
        total = ad.scalar_mul(self_part.total, lam)
    else:
        total = ad.add(sup_part, ad.scalar_mul(self_part.total, lam))
    sp = self_part or LossBreakdown(Tensor(0.0))
    return LossBreakdown(total, 0.0 if sup_part is None else float(sup_part.data),
                         sp.self_term, sp.point_term, n_sup, sp.n_self, sp.n_skipped, sp.n_point)


def loss_meta(sup_part: Optional[Tensor], self_part: Optional[LossBreakdown],
              weights: LossWeights = LossWeights(), n_sup: int = 0) -> LossBreakdown:
    """Episodic objective: supervised part + lambda_m * self part."""
    return _combine(sup_part, self_part, weights.lambda_m, n_sup)


def loss_semi(sup_part: Optional[Tensor], self_part: Optional[LossBreakdown],
              weights: LossWeights = LossWeights(), n_sup: int = 0) -> LossBreakdown:
    """Semi-supervised objective: supervised part + lambda_s * self part."""
    return _combine(sup_part, self_part, weights.lambda_s, n_sup)
