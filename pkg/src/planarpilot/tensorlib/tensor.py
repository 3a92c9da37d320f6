"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array. Every differentiable op records its parents
and a backward closure on a dynamic tape; ``backward`` walks the recorded
graph in reverse topological order and accumulates gradients into ``.grad``.

The op set is the minimum needed for a causal transformer decoder, small
MLPs, and differentiable task losses: elementwise arithmetic, matmul
(batched, or with a 2-D weight on the right), reductions, a few pointwise
nonlinearities, row-wise softmax with an optional additive mask, layer
normalization with affine, embedding lookup, and shape ops
(concat/split/narrow/reshape/transpose). No general broadcasting: shapes
must match exactly except where an op documents otherwise.

Compute is float32 by default; the ``dtype`` context switches the library
to float64 (used by the finite-difference gradient checks).
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True
_CHECK_FINITE = True
_DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class TensorError(ValueError):
    """Shape mismatch, non-finite values, or misuse of the tape."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (inference fast path; no activations kept)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def dtype(dt):
    """Switch the default compute dtype (float32 or float64)."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dt).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = prev


def default_dtype():
    return _DEFAULT_DTYPE


def _validate(data: np.ndarray, op: str) -> None:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise TensorError(f"non-finite output from op '{op}'")


class Tensor:
    """A dense array plus the tape bookkeeping needed for backward."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._bwd = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # Convenience arithmetic; scalars go through scale/add_const.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_const(self, float(other))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_const(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], bwd) -> Tensor:
    _validate(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    record = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = record
    if record:
        out._parents = parents
        out._bwd = bwd
    else:
        out._parents = ()
        out._bwd = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad += g


def parameter(data, name: str | None = None) -> Tensor:
    t = Tensor(np.asarray(data, dtype=_DEFAULT_DTYPE), requires_grad=True, op="param")
    return t


def constant(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=_DEFAULT_DTYPE), requires_grad=False)


def backward(root: Tensor, output_grad: np.ndarray | None = None) -> None:
    """Reverse-mode pass from ``root``; gradients accumulate into ``.grad``.

    ``output_grad`` defaults to ones (the usual case is a scalar loss).
    Raises if ``root`` has no recorded graph (backward before forward).
    """
    if not root.requires_grad:
        raise TensorError("backward called on a tensor with no recorded graph")
    if output_grad is None:
        output_grad = np.ones_like(root.data)
    else:
        output_grad = np.asarray(output_grad, dtype=root.data.dtype)
        if output_grad.shape != root.data.shape:
            raise TensorError(
                f"output_grad shape {output_grad.shape} != root shape {root.data.shape}"
            )

    # Iterative topological order over the recorded tape.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    root.grad = output_grad.copy()
    for node in reversed(order):
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise TensorError(f"op '{op}': shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bwd(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _make(a.data + b.data, "add", (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bwd(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g)

    return _make(a.data - b.data, "sub", (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _make(a.data * b.data, "mul", (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")

    def bwd(g):
        if a.requires_grad:
            _accum(a, g / b.data)
        if b.requires_grad:
            _accum(b, -g * a.data / (b.data * b.data))

    return _make(a.data / b.data, "div", (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, -g)

    return _make(-a.data, "neg", (a,), bwd)


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)

    def bwd(g):
        _accum(a, g * k)

    return _make(a.data * k, "scale", (a,), bwd)


def add_const(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        _accum(a, g)

    return _make(a.data + c, "add_const", (a,), bwd)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b with b broadcast over all leading dims (b.shape == x.shape[-1:])."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise TensorError(f"op 'add_bias': bias {b.shape} does not match x {x.shape}")

    def bwd(g):
        if x.requires_grad:
            _accum(x, g)
        if b.requires_grad:
            _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _make(x.data + b.data, "add_bias", (x, b), bwd)


# ---------------------------------------------------------------------------
# matmul and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Either both operands share identical leading dims,
    or ``b`` is 2-D (the weight-matrix case)."""
    if a.ndim < 2 or b.ndim < 2:
        raise TensorError(f"op 'matmul': operands must be >= 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise TensorError(f"op 'matmul': inner dims differ, {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise TensorError(f"op 'matmul': leading dims differ, {a.shape} @ {b.shape}")

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                _accum(b, a2.T @ g2)
            else:
                _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, "matmul", (a, b), bwd)


def tsum(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).astype(a.data.dtype))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.shape).astype(a.data.dtype))

    return _make(np.asarray(data), "sum", (a,), bwd)


def tmean(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[i] for i in axis]))
    else:
        n = a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bwd(g):
        _accum(a, g * 0.5 / out)

    return _make(out, "sqrt", (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out)

    return _make(out, "exp", (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), "log", (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - out * out))

    return _make(out, "tanh", (a,), bwd)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi

    def bwd(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        _accum(a, g * (phi + x * pdf))

    return _make(out, "gelu", (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x), computed stably for large |x|.
    x = a.data
    out = np.logaddexp(0.0, x)

    def bwd(g):
        sig = 1.0 / (1.0 + np.exp(-x))
        _accum(a, g * sig)

    return _make(out, "softplus", (a,), bwd)


def softmax(a: Tensor, additive_mask: np.ndarray | None = None) -> Tensor:
    """Row-wise (last axis) softmax. ``additive_mask`` is a constant added
    to the logits before normalization (used for causal masking)."""
    x = a.data
    if additive_mask is not None:
        x = x + additive_mask
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = np.sum(g * out, axis=-1, keepdims=True)
        _accum(a, out * (g - dot))

    return _make(out, "softmax", (a,), bwd)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, var_floor: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    The variance is floored at ``var_floor`` so constant rows map to zeros
    before the affine transform instead of dividing by zero.
    """
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise TensorError(f"op 'layernorm': affine shapes {gain.shape}/{bias.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.maximum((xc * xc).mean(axis=-1, keepdims=True), var_floor)
    inv = 1.0 / np.sqrt(var)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        if gain.requires_grad:
            _accum(gain, np.sum(g * xhat, axis=tuple(range(g.ndim - 1))))
        if bias.requires_grad:
            _accum(bias, np.sum(g, axis=tuple(range(g.ndim - 1))))
        if x.requires_grad:
            gx = g * gain.data
            floored = var <= var_floor  # zero derivative through the floor
            term = gx - gx.mean(axis=-1, keepdims=True)
            corr = np.where(floored, 0.0, (gx * xhat).mean(axis=-1, keepdims=True))
            _accum(x, inv * (term - xhat * corr))

    return _make(out, "layernorm", (x, gain, bias), bwd)


# ---------------------------------------------------------------------------
# lookup and shape ops


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.shape[0]):
        raise TensorError(
            f"op 'embedding': index out of range for table of {table.shape[0]} rows"
        )
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        _accum(table, gt)

    return _make(out, "embedding", (table,), bwd)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = list(parts)
    sizes = [p.shape[axis] for p in parts]
    offs = np.cumsum([0] + sizes)

    def bwd(g):
        for p, s, e in zip(parts, offs[:-1], offs[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(int(s), int(e))
                _accum(p, g[tuple(idx)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), "concat", tuple(parts), bwd)


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    if sum(sizes) != a.shape[axis]:
        raise TensorError(f"op 'split': sizes {sizes} do not cover axis of {a.shape[axis]}")
    outs = []
    start = 0
    for s in sizes:
        outs.append(narrow(a, axis, start, s))
        start += s
    return outs


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        _accum(a, ga)

    return _make(a.data[idx].copy(), "narrow", (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bwd(g):
        _accum(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), "reshape", (a,), bwd)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)

    def bwd(g):
        _accum(a, g.transpose(inv))

    return _make(a.data.transpose(axes), "transpose", (a,), bwd)


def causal_mask(t: int, dtype=None) -> np.ndarray:
    """Additive mask: 0 on/below the diagonal, -1e9 above."""
    dt = dtype or _DEFAULT_DTYPE
    m = np.zeros((t, t), dtype=dt)
    m[np.triu_indices(t, k=1)] = -1e9
    return m


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, causal: bool = True) -> Tensor:
    """Scaled-dot-product multi-head attention over (B, T, D) inputs.

    A composite of the primitives above; the causal variant guarantees that
    output t depends only on inputs at positions <= t.
    """
    b, t, d = q.shape
    if d % n_heads != 0:
        raise TensorError(f"op 'attention': width {d} not divisible by {n_heads} heads")
    hd = d // n_heads

    def heads(x: Tensor) -> Tensor:
        return transpose(reshape(x, (b, t, n_heads, hd)), (0, 2, 1, 3))

    qh, kh, vh = heads(q), heads(k), heads(v)
    scores = scale(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    mask = causal_mask(t, scores.data.dtype) if causal else None
    att = softmax(scores, additive_mask=mask)
    out = matmul(att, vh)
    return reshape(transpose(out, (0, 2, 1, 3)), (b, t, d))
