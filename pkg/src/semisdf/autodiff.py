"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every op records its parents and a closure that pushes the output gradient back
to them. ``backward`` walks the recorded tape once, in reverse topological order.
Broadcasting is limited to adding a rank-1 bias to every row of a matrix.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import GraphError, NumericError

_grad_enabled = True
_kink_log: Optional[list] = None


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a tape."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def enable_grad():
    """Record a tape even inside an enclosing ``no_grad`` block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, True
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the activation pattern of every non-smooth op evaluated inside the block.

    Two evaluations with identical logs lie on the same smooth piece of the function.
    """
    global _kink_log
    prev, _kink_log = _kink_log, []
    log = _kink_log
    try:
        yield log
    finally:
        _kink_log = prev


def _log_kink(pattern: np.ndarray, at_kink: bool):
    if _kink_log is not None:
        _kink_log.append((np.ascontiguousarray(pattern).tobytes(), bool(at_kink)))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)


def _raise_item(t):
    raise GraphError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output in op {op!r}")
    out = Tensor(data, op=op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# elementwise and linear ops
# ---------------------------------------------------------------------------
# Backward closures map the output gradient to a tuple of parent gradients
# (None where a parent needs nothing).

def _check_binary(a: Tensor, b: Tensor, op: str) -> bool:
    """True when ``b`` is a row-bias for matrix ``a``."""
    if a.shape == b.shape:
        return False
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return True
    raise GraphError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    bias = _check_binary(a, b, "add")
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (g, g.sum(axis=0) if bias else g))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    bias = _check_binary(a, b, "sub")
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (g, -(g.sum(axis=0) if bias else g)))


def mul(a, b) -> Tensor:
    """Elementwise product of equally shaped tensors."""
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise GraphError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def scalar_mul(a, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)
    return _make(a.data * c, "scalar_mul", (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise GraphError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _make(a.data @ b.data, "matmul", (a, b), bw)


def relu(a) -> Tensor:
    a = _wrap(a)
    on = a.data > 0.0
    _log_kink(np.packbits(on), bool(np.any(a.data == 0.0)))
    # subgradient at exactly 0 is 0
    return _make(np.where(on, a.data, 0.0), "relu", (a,), lambda g: (g * on,))


def tanh(a) -> Tensor:
    a = _wrap(a)
    y = np.tanh(a.data)
    return _make(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def abs_(a) -> Tensor:
    a = _wrap(a)
    s = np.sign(a.data)  # 0 at 0: the chosen subgradient
    _log_kink(np.packbits(s > 0), bool(np.any(a.data == 0.0)))
    return _make(np.abs(a.data), "abs", (a,), lambda g: (g * s,))


def square(a) -> Tensor:
    a = _wrap(a)
    return _make(a.data * a.data, "square", (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data < 0.0):
        raise NumericError("non-finite output in op 'sqrt' (negative input)")
    y = np.sqrt(a.data)

    def bw(g):
        if np.any(y == 0.0):
            raise NumericError("non-finite gradient in op 'sqrt' (input 0)")
        return (g / (2.0 * y),)

    return _make(y, "sqrt", (a,), bw)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def slice_rows(a, lo: int, hi: int) -> Tensor:
    """Rows ``lo:hi`` of a tensor."""
    a = _wrap(a)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[lo:hi] = g
        return (full,)

    return _make(a.data[lo:hi].copy(), "slice_rows", (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise GraphError("concat of nothing")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise GraphError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) if t.requires_grad else None
                     for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]))

    return _make(data, "concat", ts, bw)


def reduce_sum(a, axis: Optional[int] = None) -> Tensor:
    a = _wrap(a)
    shape = a.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(a.data.sum(axis=axis)), "reduce_sum", (a,), bw)


def reduce_mean(a, axis: Optional[int] = None) -> Tensor:
    a = _wrap(a)
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise GraphError("reduce_mean over an empty axis")
    shape = a.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape),)

    return _make(np.asarray(a.data.mean(axis=axis)), "reduce_mean", (a,), bw)


def max_pool_over_points(a) -> Tensor:
    """Channel-wise max over the rows of an ``(N, C)`` tensor, giving ``(C,)``.

    The gradient flows to the first row attaining each maximum.
    """
    a = _wrap(a)
    if a.ndim != 2 or a.shape[0] == 0:
        raise GraphError(f"max_pool_over_points expects (N, C) with N >= 1, got {a.shape}")
    arg = np.argmax(a.data, axis=0)
    cols = np.arange(a.shape[1])
    _log_kink(arg, False)

    def bw(g):
        full = np.zeros_like(a.data)
        full[arg, cols] = g
        return (full,)

    return _make(a.data[arg, cols], "max_pool_over_points", (a,), bw)


# ---------------------------------------------------------------------------
# regular-grid scatter / gather on [-1, 1]^3
# ---------------------------------------------------------------------------

def grid_node_coords(resolution: int) -> np.ndarray:
    """Node positions of a ``resolution^3`` grid over ``[-1, 1]^3``, x-major order."""
    lin = np.linspace(-1.0, 1.0, resolution)
    gx, gy, gz = np.meshgrid(lin, lin, lin, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def _to_grid_units(pos: np.ndarray, resolution: int) -> np.ndarray:
    return (np.clip(pos, -1.0, 1.0) + 1.0) * (0.5 * (resolution - 1))


def grid_scatter_mean(positions, features, resolution: int) -> Tensor:
    """Average point features into the nearest grid node; empty nodes get zeros.

    ``positions`` is a constant ``(N, 3)`` array; ``features`` an ``(N, C)`` tensor.
    Returns a ``(resolution**3, C)`` tensor in x-major node order.
    """
    features = _wrap(features)
    pos = np.asarray(positions.data if isinstance(positions, Tensor) else positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 3 or features.ndim != 2 or features.shape[0] != pos.shape[0]:
        raise GraphError(f"grid_scatter_mean: positions {pos.shape} vs features {features.shape}")
    g = resolution
    ijk = np.clip(np.rint(_to_grid_units(pos, g)).astype(np.int64), 0, g - 1)
    cell = (ijk[:, 0] * g + ijk[:, 1]) * g + ijk[:, 2]
    counts = np.bincount(cell, minlength=g ** 3).astype(np.float64)
    weights = 1.0 / counts[cell]
    mat = sp.csr_matrix((weights, (cell, np.arange(len(cell)))), shape=(g ** 3, len(cell)))
    return _make(np.asarray(mat @ features.data), "grid_scatter_mean", (features,),
                 lambda grad: (np.asarray(mat.T @ grad),))


def sparse_linear(matrix, a) -> Tensor:
    """Apply a constant scipy sparse matrix to the rows of ``a``: ``matrix @ a``."""
    a = _wrap(a)
    if a.ndim != 2 or matrix.shape[1] != a.shape[0]:
        raise GraphError(f"sparse_linear: matrix {matrix.shape} vs tensor {a.shape}")
    mat = sp.csr_matrix(matrix)
    return _make(np.asarray(mat @ a.data), "sparse_linear", (a,), lambda g: (np.asarray(mat.T @ g),))


def grid_smoothing_matrix(resolution: int, passes: int) -> sp.csr_matrix:
    """``passes`` rounds of 3x3x3 neighbor averaging on a node grid (clamped at the border)."""
    g = resolution
    n = g ** 3
    if passes <= 0:
        return sp.identity(n, format="csr")
    ijk = np.stack(np.meshgrid(np.arange(g), np.arange(g), np.arange(g), indexing="ij"), -1).reshape(-1, 3)
    rows, cols = [], []
    for off in np.stack(np.meshgrid([-1, 0, 1], [-1, 0, 1], [-1, 0, 1], indexing="ij"), -1).reshape(-1, 3):
        nb = ijk + off
        ok = np.all((nb >= 0) & (nb < g), axis=1)
        rows.append(np.flatnonzero(ok))
        cols.append(((nb[ok, 0] * g + nb[ok, 1]) * g + nb[ok, 2]))
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    one = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    one = sp.diags(1.0 / np.asarray(one.sum(axis=1)).ravel()) @ one
    out = sp.identity(n, format="csr")
    for _ in range(passes):
        out = one @ out
    return out.tocsr()


def _trilinear_parts(pos: np.ndarray, g: int):
    u = _to_grid_units(pos, g)
    base = np.clip(np.floor(u).astype(np.int64), 0, g - 2)
    frac = u - base
    inside = np.all((pos >= -1.0) & (pos <= 1.0), axis=1)
    k = np.arange(len(pos))
    rows, cols, w, dw = [], [], [], ([], [], [])
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                off = np.array([dx, dy, dz])
                fac = np.where(off == 1, frac, 1.0 - frac)  # per-axis weights, (K, 3)
                sgn = np.where(off == 1, 1.0, -1.0)
                rows.append(k)
                cols.append(((base[:, 0] + dx) * g + base[:, 1] + dy) * g + base[:, 2] + dz)
                w.append(fac[:, 0] * fac[:, 1] * fac[:, 2])
                dw[0].append(sgn[0] * fac[:, 1] * fac[:, 2])
                dw[1].append(sgn[1] * fac[:, 0] * fac[:, 2])
                dw[2].append(sgn[2] * fac[:, 0] * fac[:, 1])
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    return rows, cols, np.concatenate(w), [np.concatenate(d) for d in dw], base, inside


def grid_gather_trilinear(grid, positions, resolution: int) -> Tensor:
    """Trilinearly interpolate a ``(resolution**3, C)`` node grid at ``(K, 3)`` positions.

    Positions outside ``[-1, 1]^3`` are clamped to the boundary (zero positional
    gradient there). Differentiable in both the grid and the positions.
    """
    grid = _wrap(grid)
    positions = _wrap(positions)
    g = resolution
    if grid.ndim != 2 or grid.shape[0] != g ** 3:
        raise GraphError(f"grid_gather_trilinear: grid {grid.shape} is not ({g}^3, C)")
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise GraphError(f"grid_gather_trilinear: positions {positions.shape} are not (K, 3)")
    pos = positions.data
    n = len(pos)
    rows, cols, w, dw, base, inside = _trilinear_parts(pos, g)
    _log_kink(np.concatenate([base.ravel(), inside.astype(np.int64)]), False)
    shape = (n, g ** 3)
    mat = sp.csr_matrix((w, (rows, cols)), shape=shape)

    def bw(gr):
        d_grid = np.asarray(mat.T @ gr) if grid.requires_grad else None
        d_pos = None
        if positions.requires_grad:
            d_pos = np.empty((n, 3))
            for a in range(3):
                da = sp.csr_matrix((dw[a], (rows, cols)), shape=shape)
                d_pos[:, a] = np.sum(np.asarray(da @ grid.data) * gr, axis=1)
            d_pos *= (0.5 * (g - 1) * inside)[:, None]
        return d_grid, d_pos

    return _make(np.asarray(mat @ grid.data), "grid_gather_trilinear", (grid, positions), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    The tape is released afterwards; calling backward on the same loss again
    raises ``GraphError``.
    """
    if loss._consumed:
        raise GraphError("backward already ran on this graph; rebuild it (dynamic tape)")
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss._consumed = True
    if not loss.requires_grad:
        return
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = np.array(g, dtype=np.float64) if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    for node in order:
        node._parents = ()
        node._backward = None


def zero_grad(params: Sequence[Tensor]):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    excluded: int
    kink_at_point: bool

    def __float__(self):
        return self.max_rel_error


def _eval_logged(f, x: np.ndarray):
    with no_grad(), record_kinks() as log:
        val = float(np.asarray(f(Tensor(x)).data).reshape(-1)[0])
    return val, log


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-4) -> GradCheckResult:
    """Compare reverse-mode gradients of scalar ``f`` with central differences.

    Returns the max over coordinates of ``|analytic - fd| / max(1, |analytic|)``.
    Coordinates whose +h/-h evaluations cross a kink (relu/abs sign change, max-pool
    winner change, trilinear cell change) are excluded. If ``point`` sits exactly on a
    kink, nothing is checked and ``kink_at_point`` is set.
    """
    x0 = np.array(point, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    with record_kinks() as log0:
        out = f(xt)
    if any(at for _, at in log0):
        return GradCheckResult(float("nan"), 0, x0.size, True)
    backward(out)
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad
    sig0 = [s for s, _ in log0]
    worst, checked, excluded = 0.0, 0, 0
    for i in range(x0.size):
        xp, xm = x0.copy(), x0.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        fp, lp = _eval_logged(f, xp)
        fm, lm = _eval_logged(f, xm)
        if [s for s, _ in lp] != sig0 or [s for s, _ in lm] != sig0:
            excluded += 1
            continue
        fd = (fp - fm) / (2.0 * h)
        a = analytic.flat[i]
        worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
        checked += 1
    return GradCheckResult(float(worst), checked, excluded, False)


def grad_check_params(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4,
                      max_coords: Optional[int] = None, seed: int = 0) -> GradCheckResult:
    """Finite-difference check of ``loss_fn`` with respect to parameter tensors, in place.

    ``max_coords`` caps how many coordinates per parameter are probed (random subset).
    """
    rng = np.random.default_rng(seed)
    zero_grad(params)
    with record_kinks() as log0:
        out = loss_fn()
    if any(at for _, at in log0):
        return GradCheckResult(float("nan"), 0, 0, True)
    backward(out)
    sig0 = [s for s, _ in log0]
    worst, checked, excluded = 0.0, 0, 0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        coords = np.arange(p.data.size)
        if max_coords is not None and coords.size > max_coords:
            coords = np.sort(rng.choice(coords, max_coords, replace=False))
        for i in coords:
            orig = p.data.flat[i]
            vals, same = [], True
            for step in (h, -h):
                p.data.flat[i] = orig + step
                with no_grad(), record_kinks() as log:
                    vals.append(float(np.asarray(loss_fn().data).reshape(-1)[0]))
                same = same and [s for s, _ in log] == sig0
            p.data.flat[i] = orig
            if not same:
                excluded += 1
                continue
            fd = (vals[0] - vals[1]) / (2.0 * h)
            a = analytic.flat[i]
            worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
            checked += 1
    zero_grad(params)
    return GradCheckResult(float(worst), checked, excluded, False)
