"""Dense tensor kernels with tape-based reverse-mode differentiation.

Every kernel is a plain function that takes :class:`Tensor` inputs and
returns a new :class:`Tensor`.  When a :class:`GradTape` is active (``with
GradTape() as tape:``) and at least one input is tracked, the kernel appends
a record holding its vector-Jacobian product to the tape.  :func:`backward`
replays the records in reverse.

Broadcasting is limited to adding a row vector to every row of a matrix.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.special import erf

__all__ = [
    "Tensor",
    "GradTape",
    "NonFiniteError",
    "TapeConsumedError",
    "set_default_dtype",
    "get_default_dtype",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "transpose",
    "sum_all",
    "mean_all",
    "gather_rows",
    "spmm",
    "gelu",
    "softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "context_attention",
    "restricted_cross_entropy",
    "dropout",
    "backward",
    "finite_difference_check",
    "LAYER_NORM_EPS",
]

LAYER_NORM_EPS = 1e-5
_QUERY_CHUNK = 2048

_local = threading.local()
_default_dtype = np.float64


class NonFiniteError(FloatingPointError):
    """A kernel produced NaN or Inf."""


class TapeConsumedError(RuntimeError):
    """``backward`` was called twice on the same tape."""


def set_default_dtype(dtype) -> None:
    """Select float64 (gradient checks, tests) or float32 (training speed)."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


def _check_finite(arr: np.ndarray, where: str) -> None:
    if arr.dtype.kind == "f" and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {where}")


class Tensor:
    """An n-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "_tracked", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(_default_dtype)
        _check_finite(arr, "Tensor()")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._tracked = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype or _default_dtype)


class GradTape:
    """Ordered record of differentiable operations for one training step."""

    def __init__(self):
        self.records: list = []
        self.consumed = False

    def __enter__(self) -> "GradTape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)


def _active_tape() -> GradTape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._tracked


def _emit(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable | None, where: str) -> Tensor:
    _check_finite(data, where)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out._tracked = False
    tape = _active_tape()
    if tape is not None and vjp is not None:
        needs = tuple(_needs_grad(p) for p in parents)
        if any(needs):
            if tape.consumed:
                raise TapeConsumedError("cannot record on a consumed tape")
            out._tracked = True
            tape.records.append((out, tuple(parents), vjp, needs))
    return out


def _recording(*parents: Tensor) -> bool:
    return _active_tape() is not None and any(_needs_grad(p) for p in parents)


# --------------------------------------------------------------------------
# Elementary kernels
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def vjp(g, needs):
        return (g @ B.T if needs[0] else None, A.T @ g if needs[1] else None)

    return _emit(A @ B, (a, b), vjp, "matmul")


def _is_row_broadcast(a: np.ndarray, b: np.ndarray) -> bool:
    return a.ndim == 2 and (b.shape == (a.shape[1],) or b.shape == (1, a.shape[1]))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a row vector added to every row of ``a``."""
    if a.shape == b.shape:

        def vjp(g, needs):
            return g, g

    elif _is_row_broadcast(a.data, b.data):
        bshape = b.shape

        def vjp(g, needs):
            return g, (g.sum(axis=0).reshape(bshape) if needs[1] else None)

    else:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _emit(a.data + b.data, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} - {b.shape}")

    def vjp(g, needs):
        return g, (-g if needs[1] else None)

    return _emit(a.data - b.data, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}")
    A, B = a.data, b.data

    def vjp(g, needs):
        return (g * B if needs[0] else None, g * A if needs[1] else None)

    return _emit(A * B, (a, b), vjp, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g, needs):
        return (g * c,)

    return _emit(a.data * a.data.dtype.type(c), (a,), vjp, "scale")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError("transpose expects a matrix")

    def vjp(g, needs):
        return (g.T,)

    return _emit(a.data.T, (a,), vjp, "transpose")


def sum_all(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def vjp(g, needs):
        return (np.full(shape, g, dtype=dtype),)

    return _emit(np.asarray(a.data.sum(), dtype=dtype), (a,), vjp, "sum_all")


def mean_all(a: Tensor) -> Tensor:
    shape, dtype, n = a.shape, a.dtype, a.data.size

    def vjp(g, needs):
        return (np.full(shape, g / n, dtype=dtype),)

    return _emit(np.asarray(a.data.mean(), dtype=dtype), (a,), vjp, "mean_all")


def gather_rows(a: Tensor, idx) -> Tensor:
    """Rows ``a[idx]``; duplicate indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.intp)
    shape, dtype = a.shape, a.dtype

    def vjp(g, needs):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(a.data[idx], (a,), vjp, "gather_rows")


def spmm(adj: sparse.spmatrix, a: Tensor) -> Tensor:
    """Constant sparse matrix times a dense tensor."""
    if adj.shape[1] != a.shape[0]:
        raise ValueError(f"spmm shape mismatch: {adj.shape} x {a.shape}")
    adj_t = adj.T.tocsr()

    def vjp(g, needs):
        return (np.asarray(adj_t @ g),)

    return _emit(np.asarray(adj @ a.data), (a,), vjp, "spmm")


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))

    def vjp(g, needs):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _emit((x * cdf).astype(x.dtype, copy=False), (a,), vjp, "gelu")


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    _check_finite(x.data, "softmax_rows input")
    p = _softmax(x.data)

    def vjp(g, needs):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit(p, (x,), vjp, "softmax_rows")


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def vjp(g, needs):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _emit(out, (x,), vjp, "log_softmax_rows")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Row-wise normalisation to zero mean / unit variance, then affine."""
    X = x.data
    if X.ndim != 2 or gamma.shape != (X.shape[1],) or beta.shape != (X.shape[1],):
        raise ValueError(f"layer_norm shape mismatch: {x.shape}, {gamma.shape}, {beta.shape}")
    mu = X.mean(axis=1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = gamma.data

    def vjp(g, needs):
        gx = gg = gb = None
        if needs[0]:
            dxhat = g * G
            gx = inv * (
                dxhat
                - dxhat.mean(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            )
        if needs[1]:
            gg = (g * xhat).sum(axis=0)
        if needs[2]:
            gb = g.sum(axis=0)
        return gx, gg, gb

    return _emit((xhat * G + beta.data).astype(X.dtype, copy=False), (x, gamma, beta), vjp, "layer_norm")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)

    def vjp(g, needs):
        return (g * keep,)

    return _emit(x.data * keep, (x,), vjp, "dropout")


# --------------------------------------------------------------------------
# Fused kernels
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AttentionSegment:
    """Query rows ``[start, stop)`` attend to the key/value rows ``keys``."""

    start: int
    stop: int
    keys: np.ndarray


def context_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    segments: Iterable[AttentionSegment],
    n_heads: int,
) -> Tensor:
    """Multi-head scaled dot-product attention restricted per segment.

    Each segment's query rows see only that segment's key rows; rows that are
    never listed as keys cannot influence any output.  Head ``h`` uses
    columns ``h*dh:(h+1)*dh`` of ``q``, ``k`` and ``v``.  The output has the
    shape of ``q`` with heads concatenated along columns.
    """
    Q, K, V = q.data, k.data, v.data
    n, d = Q.shape
    if K.shape != (n, d) or V.shape != (n, d) or d % n_heads:
        raise ValueError(f"attention shape mismatch: {Q.shape}, {K.shape}, {V.shape}, heads={n_heads}")
    dh = d // n_heads
    sc = 1.0 / math.sqrt(dh)
    segments = list(segments)
    out = np.zeros_like(Q)
    record = _recording(q, k, v)
    cache = []

    def heads(M, rows):
        return M[rows].reshape(-1, n_heads, dh).transpose(1, 0, 2)

    for seg in segments:
        if len(seg.keys) == 0:
            raise ValueError("attention segment has no keys")
        kh = heads(K, seg.keys)
        vh = heads(V, seg.keys)
        step = (seg.stop - seg.start) if record else _QUERY_CHUNK
        for lo in range(seg.start, seg.stop, max(step, 1)):
            hi = min(lo + step, seg.stop)
            qh = heads(Q, slice(lo, hi))
            p = _softmax((qh @ kh.transpose(0, 2, 1)) * sc)
            out[lo:hi] = (p @ vh).transpose(1, 0, 2).reshape(hi - lo, d)
            if record:
                cache.append((lo, hi, seg.keys, qh, kh, vh, p))

    def vjp(g, needs):
        gq = np.zeros_like(Q) if needs[0] else None
        gk = np.zeros_like(K) if needs[1] else None
        gv = np.zeros_like(V) if needs[2] else None
        for lo, hi, keys, qh, kh, vh, p in cache:
            go = g[lo:hi].reshape(-1, n_heads, dh).transpose(1, 0, 2)
            if gv is not None:
                gv[keys] += (p.transpose(0, 2, 1) @ go).transpose(1, 0, 2).reshape(-1, d)
            gp = go @ vh.transpose(0, 2, 1)
            gs = p * (gp - (gp * p).sum(axis=2, keepdims=True)) * sc
            if gq is not None:
                gq[lo:hi] += (gs @ kh).transpose(1, 0, 2).reshape(-1, d)
            if gk is not None:
                gk[keys] += (gs.transpose(0, 2, 1) @ qh).transpose(1, 0, 2).reshape(-1, d)
        return gq, gk, gv

    return _emit(out, (q, k, v), vjp if record else None, "context_attention")


LOG_CLAMP = 1e-12


def restricted_probs(logits: np.ndarray, n_classes: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the first ``n_classes[r]`` columns; zero elsewhere."""
    n_classes = np.asarray(n_classes)
    valid = np.arange(logits.shape[1])[None, :] < n_classes[:, None]
    z = np.where(valid, logits, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(valid, np.exp(z), 0.0)
    return (e / e.sum(axis=1, keepdims=True)).astype(logits.dtype, copy=False)


def restricted_cross_entropy(
    logits: Tensor,
    targets,
    n_classes,
    weights,
) -> Tensor:
    """``sum_r weights[r] * -log max(p[r, targets[r]], 1e-12)``.

    ``p`` is the softmax of row ``r`` restricted to its first
    ``n_classes[r]`` columns.
    """
    L = logits.data
    m = L.shape[0]
    targets = np.asarray(targets, dtype=np.intp)
    n_classes = np.asarray(n_classes, dtype=np.intp)
    w = np.asarray(weights, dtype=L.dtype)
    if targets.shape != (m,) or n_classes.shape != (m,) or w.shape != (m,):
        raise ValueError("targets, n_classes and weights must have one entry per row")
    if m == 0:
        raise ValueError("cross-entropy over an empty set of rows")
    if np.any(targets < 0) or np.any(targets >= n_classes):
        raise ValueError("target outside the restricted class range")
    p = restricted_probs(L, n_classes)
    rows = np.arange(m)
    pt = p[rows, targets]
    clamped = pt < LOG_CLAMP
    loss = np.asarray(-(w * np.log(np.maximum(pt, LOG_CLAMP))).sum(), dtype=L.dtype)

    def vjp(g, needs):
        grad = p.copy()
        grad[rows, targets] -= 1.0
        grad *= (w * ~clamped)[:, None]
        return (grad * g,)

    return _emit(loss, (logits,), vjp, "restricted_cross_entropy")


# --------------------------------------------------------------------------
# Reverse pass
# --------------------------------------------------------------------------


def backward(loss: Tensor, tape: GradTape, wrt: Iterable[Tensor] | None = None) -> dict:
    """Replay ``tape`` in reverse from the scalar ``loss``.

    Returns a dict mapping each tensor in ``wrt`` (default: every leaf on the
    tape with ``requires_grad``) to its gradient array.  Tensors that the loss
    does not depend on get zeros.
    """
    if tape.consumed:
        raise TapeConsumedError("tape already consumed")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for out, parents, vjp, needs in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        pgs = vjp(g, needs)
        for p, pg, need in zip(parents, pgs, needs):
            if not need or pg is None:
                continue
            key = id(p)
            if p.requires_grad and not p._tracked:
                leaves[key] = p
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    tape.consumed = True
    tape.records = []
    if loss.requires_grad and not loss._tracked:
        leaves[id(loss)] = loss
    targets = list(wrt) if wrt is not None else list(leaves.values())
    return {
        t: (grads[id(t)].reshape(t.shape) if id(t) in grads else np.zeros_like(t.data))
        for t in targets
    }


def finite_difference_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    n_coords: int = 50,
    seed: int = 0,
    grads: dict | None = None,
) -> float:
    """Largest relative disagreement between tape gradients and central differences.

    ``f`` maps ``params`` to a scalar Tensor and must be deterministic.  The
    error at a coordinate is ``|analytic - fd| / (|fd| + 1e-8)``.  Supplying
    ``grads`` skips the tape pass (used to audit a given gradient).
    """
    params = list(params)
    if grads is None:
        with GradTape() as tape:
            loss = f(params)
        grads = backward(loss, tape, wrt=params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_coords):
        t = params[int(rng.integers(len(params)))]
        i = int(rng.integers(t.data.size))
        saved = t.data
        work = saved.copy()
        flat = work.reshape(-1)
        x0 = flat[i]
        flat[i] = x0 + step
        t.data = work
        f_plus = float(f(params).data)
        flat[i] = x0 - step
        f_minus = float(f(params).data)
        t.data = saved
        fd = (f_plus - f_minus) / (2.0 * step)
        analytic = float(np.asarray(grads[t]).reshape(-1)[i])
        worst = max(worst, abs(analytic - fd) / (abs(fd) + 1e-8))
    return worst
