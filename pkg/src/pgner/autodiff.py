"""Define-by-run reverse-mode differentiation over dense numpy arrays.

Shapes must match exactly: there is no implicit broadcasting.  Use
:func:`expand` to repeat a tensor along a new axis, or :func:`linear` for the
one place a bias is shared across rows.

A graph is rebuilt for every forward pass and is confined to one thread.
Inside :func:`no_grad` ops skip graph bookkeeping entirely, which is what
decoding uses.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("value", "grad", "parents", "backward_rule", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, parents=(), backward_rule=None, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_rule = backward_rule
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.value.shape}, dtype={self.value.dtype})"


def parameter(value, name=None) -> Tensor:
    return Tensor(np.ascontiguousarray(value), requires_grad=True, name=name)


def constant(value, dtype=None) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype))


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return constant(x, dtype=dtype)


def _node(value, parents, rule) -> Tensor:
    if not _GRAD_ENABLED:
        return Tensor(value)
    if not any(p.requires_grad for p in parents):
        return Tensor(value)
    return Tensor(value, requires_grad=True, parents=parents, backward_rule=rule)


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.value.dtype, copy=True)
    else:
        t.grad += g


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)

    def rule(out):
        _accum(a, out.grad)
        _accum(b, out.grad)

    return _node(a.value + b.value, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("sub", a.shape, b.shape)

    def rule(out):
        _accum(a, out.grad)
        _accum(b, -out.grad)

    return _node(a.value - b.value, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)

    def rule(out):
        if a.requires_grad:
            _accum(a, out.grad * b.value)
        if b.requires_grad:
            _accum(b, out.grad * a.value)

    return _node(a.value * b.value, (a, b), rule)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.value.dtype.type(c)

    def rule(out):
        _accum(a, out.grad * c)

    return _node(a.value * c, (a,), rule)


def add_const(a: Tensor, c) -> Tensor:
    """``a + c`` where ``c`` is a scalar or an array of ``a``'s shape that carries no gradient."""
    c = np.asarray(c, dtype=a.value.dtype)
    if c.ndim and c.shape != a.shape:
        raise ShapeError("add_const", a.shape, c.shape)

    def rule(out):
        _accum(a, out.grad)

    return _node(a.value + c, (a,), rule)


def mul_const(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=a.value.dtype)
    if c.ndim and c.shape != a.shape:
        raise ShapeError("mul_const", a.shape, c.shape)

    def rule(out):
        _accum(a, out.grad * c)

    return _node(a.value * c, (a,), rule)


def one_minus(a: Tensor) -> Tensor:
    def rule(out):
        _accum(a, -out.grad)

    return _node(1 - a.value, (a,), rule)


def sigmoid(a: Tensor) -> Tensor:
    one = a.value.dtype.type(1)
    y = one / (one + np.exp(-a.value))

    def rule(out):
        _accum(a, out.grad * y * (one - y))

    return _node(y, (a,), rule)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)

    def rule(out):
        _accum(a, out.grad * (1 - y * y))

    return _node(y, (a,), rule)


def log(a: Tensor, floor: float = 1e-12) -> Tensor:
    """Natural log with ``floor`` applied to the argument; no gradient below the floor."""
    x = a.value
    clipped = np.maximum(x, x.dtype.type(floor))

    def rule(out):
        _accum(a, np.where(x > floor, out.grad / clipped, 0))

    return _node(np.log(clipped), (a,), rule)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.value
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(out):
        g = out.grad
        _accum(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _node(y, (a,), rule)


# -------------------------------------------------------------------- shaping


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        y = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None

    def rule(out):
        _accum(a, out.grad.reshape(old))

    return _node(y, (a,), rule)


def transpose01(a: Tensor) -> Tensor:
    """Swap the first two axes (time-major <-> batch-major)."""
    if a.value.ndim < 2:
        raise ShapeError("transpose01", a.shape)
    y = np.ascontiguousarray(np.swapaxes(a.value, 0, 1))

    def rule(out):
        _accum(a, np.swapaxes(out.grad, 0, 1))

    return _node(y, (a,), rule)


def expand(a: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``a`` ``n`` times along it."""
    y = np.repeat(np.expand_dims(a.value, axis), n, axis=axis)

    def rule(out):
        _accum(a, out.grad.sum(axis=axis))

    return _node(y, (a,), rule)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    nd = xs[0].value.ndim
    ax = axis % nd
    for x in xs[1:]:
        if x.value.ndim != nd or any(x.shape[d] != xs[0].shape[d] for d in range(nd) if d != ax):
            raise ShapeError("concat", *(t.shape for t in xs))
    sizes = [x.shape[ax] for x in xs]
    y = np.concatenate([x.value for x in xs], axis=ax)

    def rule(out):
        start = 0
        for x, n in zip(xs, sizes):
            if x.requires_grad:
                idx = [slice(None)] * nd
                idx[ax] = slice(start, start + n)
                _accum(x, out.grad[tuple(idx)])
            start += n

    return _node(y, tuple(xs), rule)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """``a[..., start:stop]``."""
    if not 0 <= start < stop <= a.shape[-1]:
        raise ShapeError("slice_last", a.shape, (start, stop))
    y = a.value[..., start:stop]

    def rule(out):
        g = np.zeros_like(a.value)
        g[..., start:stop] = out.grad
        _accum(a, g)

    return _node(np.ascontiguousarray(y), (a,), rule)


def index0(a: Tensor, i: int) -> Tensor:
    """``a[i]`` along the first axis."""
    y = a.value[i]

    def rule(out):
        g = np.zeros_like(a.value)
        g[i] = out.grad
        _accum(a, g)

    return _node(np.array(y), (a,), rule)


# -------------------------------------------------------------------- algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product, or a batched product of two 3-D tensors with equal batch size."""
    av, bv = a.value, b.value
    if av.ndim == 2 and bv.ndim == 2:
        if av.shape[1] != bv.shape[0]:
            raise ShapeError("matmul", av.shape, bv.shape)
    elif av.ndim == 3 and bv.ndim == 3:
        if av.shape[0] != bv.shape[0] or av.shape[2] != bv.shape[1]:
            raise ShapeError("matmul", av.shape, bv.shape)
    else:
        raise ShapeError("matmul", av.shape, bv.shape)

    def rule(out):
        g = out.grad
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(bv, -1, -2))
        if b.requires_grad:
            _accum(b, np.swapaxes(av, -1, -2) @ g)

    return _node(av @ bv, (a, b), rule)


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` with ``b`` shared across rows of a 2-D ``x``."""
    if x.value.ndim != 2 or W.value.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError("linear", x.shape, W.shape, b.shape)
    xv, Wv = x.value, W.value

    def rule(out):
        g = out.grad
        if x.requires_grad:
            _accum(x, g @ Wv.T)
        if W.requires_grad:
            _accum(W, xv.T @ g)
        if b.requires_grad:
            _accum(b, g.sum(axis=0))

    return _node(xv @ Wv + b.value, (x, W, b), rule)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    y = a.value.sum(axis=axis)
    shape = a.shape

    def rule(out):
        g = out.grad
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, shape))

    return _node(np.asarray(y), (a,), rule)


def gather(table: Tensor, ids) -> Tensor:
    """Row lookup: ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids)
    if table.value.ndim != 2:
        raise ShapeError("gather", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"gather: ids out of range for table of {table.shape[0]} rows")

    def rule(out):
        g = np.zeros_like(table.value)
        np.add.at(g, ids.ravel(), out.grad.reshape(-1, table.shape[1]))
        _accum(table, g)

    return _node(table.value[ids], (table,), rule)


def scatter_add(vals: Tensor, ids, size: int) -> Tensor:
    """Per row ``r``: ``out[r, ids[r, j]] += vals[r, j]``, into zeros of width ``size``.

    A 1-D ``vals`` is treated as a single row.
    """
    ids = np.asarray(ids)
    if vals.shape != ids.shape:
        raise ShapeError("scatter_add", vals.shape, ids.shape)
    one_row = vals.value.ndim == 1
    v2 = vals.value.reshape(1, -1) if one_row else vals.value
    i2 = ids.reshape(1, -1) if one_row else ids
    if i2.size and (i2.min() < 0 or i2.max() >= size):
        raise IndexError(f"scatter_add: ids out of range for width {size}")
    out_v = kernels.scatter_add_rows(np.zeros((v2.shape[0], size), dtype=v2.dtype),
                                     np.ascontiguousarray(i2, dtype=np.int64), np.ascontiguousarray(v2))
    if one_row:
        out_v = out_v[0]

    def rule(out):
        g = out.grad.reshape(1, -1) if one_row else out.grad
        picked = np.take_along_axis(g, i2, axis=1)
        _accum(vals, picked.reshape(vals.shape))

    return _node(out_v, (vals,), rule)


def pick(a: Tensor, index) -> Tensor:
    """Per row ``r``: ``a[r, index[r]]`` for a 2-D ``a``; a plain element for 1-D."""
    if a.value.ndim == 1:
        i = int(index)
        y = np.asarray(a.value[i])

        def rule1(out):
            g = np.zeros_like(a.value)
            g[i] = out.grad
            _accum(a, g)

        return _node(y, (a,), rule1)
    index = np.asarray(index)
    if a.value.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError("pick", a.shape, index.shape)
    rows = np.arange(a.shape[0])

    def rule(out):
        g = np.zeros_like(a.value)
        g[rows, index] = out.grad
        _accum(a, g)

    return _node(a.value[rows, index], (a,), rule)


# ------------------------------------------------------------- fused layers


def lstm_sequence(x: Tensor, Wx: Tensor, Wh: Tensor, b: Tensor, mask, reverse: bool = False,
                  h0: Tensor | None = None, c0: Tensor | None = None) -> Tensor:
    """Run an LSTM over a time-major ``(L, B, D)`` input; returns hidden states ``(L, B, H)``.

    ``mask`` is ``(L, B)``; masked steps carry the previous state through.
    """
    L, B, D = x.shape
    H = Wh.shape[0]
    if Wx.shape != (D, 4 * H) or Wh.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ShapeError("lstm_sequence", x.shape, Wx.shape, Wh.shape, b.shape)
    dtype = x.value.dtype
    one = dtype.type(1)
    h0 = h0 if h0 is not None else constant(np.zeros((B, H), dtype=dtype))
    c0 = c0 if c0 is not None else constant(np.zeros((B, H), dtype=dtype))
    m = np.ascontiguousarray(np.asarray(mask, dtype=dtype).reshape(L, B, 1))
    args = [np.ascontiguousarray(t.value) for t in (x, Wx, Wh, b, h0, c0)]
    hs, cs, gates = kernels.lstm_forward(*args, m, bool(reverse), one)

    def rule(out):
        dx, dWx, dWh, db, dh0, dc0 = kernels.lstm_backward(
            np.ascontiguousarray(out.grad), args[0], args[1], args[2], hs, cs, gates,
            args[4], args[5], m, bool(reverse), one)
        _accum(x, dx)
        _accum(Wx, dWx)
        _accum(Wh, dWh)
        _accum(b, db)
        _accum(h0, dh0)
        _accum(c0, dc0)

    return _node(hs, (x, Wx, Wh, b, h0, c0), rule)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, Wx: Tensor, Wh: Tensor, b: Tensor) -> Tensor:
    """One LSTM step; returns ``[h_new, c_new]`` concatenated on the last axis."""
    B, H = h.shape
    if Wx.shape != (x.shape[1], 4 * H) or Wh.shape != (H, 4 * H) or c.shape != (B, H) or x.shape[0] != B:
        raise ShapeError("lstm_cell", x.shape, h.shape, c.shape, Wx.shape, Wh.shape)
    one = x.value.dtype.type(1)
    z = x.value @ Wx.value + h.value @ Wh.value + b.value
    i = one / (one + np.exp(-z[:, :H]))
    f = one / (one + np.exp(-z[:, H:2 * H]))
    g = np.tanh(z[:, 2 * H:3 * H])
    o = one / (one + np.exp(-z[:, 3 * H:]))
    c_new = f * c.value + i * g
    tc = np.tanh(c_new)
    h_new = o * tc

    def rule(out):
        dh = out.grad[:, :H]
        dc = out.grad[:, H:] + dh * o * (one - tc * tc)
        dz = np.concatenate([dc * g * i * (one - i), dc * c.value * f * (one - f),
                             dc * i * (one - g * g), dh * tc * o * (one - o)], axis=1)
        if x.requires_grad:
            _accum(x, dz @ Wx.value.T)
        if h.requires_grad:
            _accum(h, dz @ Wh.value.T)
        _accum(c, dc * f)
        if Wx.requires_grad:
            _accum(Wx, x.value.T @ dz)
        if Wh.requires_grad:
            _accum(Wh, h.value.T @ dz)
        _accum(b, dz.sum(axis=0))

    return _node(np.concatenate([h_new, c_new], axis=1), (x, h, c, Wx, Wh, b), rule)


def additive_scores(keys: Tensor, query: Tensor, v: Tensor) -> Tensor:
    """Bahdanau scores ``e[b, l] = v . tanh(keys[b, l] + query[b])``.

    ``keys`` is ``(B, L, A)`` (already projected, bias included), ``query`` is
    ``(B, A)``, ``v`` is ``(A,)``.
    """
    B, L, A = keys.shape
    if query.shape != (B, A) or v.shape != (A,):
        raise ShapeError("additive_scores", keys.shape, query.shape, v.shape)
    T = np.tanh(keys.value + query.value[:, None, :])
    y = T @ v.value

    def rule(out):
        g = out.grad
        if v.requires_grad:
            _accum(v, np.einsum("bl,bla->a", g, T))
        dpre = (g[:, :, None] * v.value) * (1 - T * T)
        _accum(keys, dpre)
        if query.requires_grad:
            _accum(query, dpre.sum(axis=1))

    return _node(y, (keys, query, v), rule)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0 or rng is None or not _GRAD_ENABLED:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.value.dtype) / a.value.dtype.type(1 - p)
    return mul_const(a, keep)


# ------------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Fill ``.grad`` of every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are reset.
    """
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    for node in order:
        if node.backward_rule is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.backward_rule is not None and node.grad is not None:
            node.backward_rule(node)


# ----------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    epsilon: float
    max_rel_error: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tolerance: float) -> bool:
        return self.worst < tolerance


# below this magnitude central differences are dominated by cancellation error
REL_FLOOR = 1e-6


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor] | Iterable[Tensor],
               epsilon: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` with central differences, coordinate by coordinate.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-6)``.  ``f`` rebuilds the
    graph on every call.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not isinstance(params, dict):
        params = {p.name or f"p{i}": p for i, p in enumerate(params)}
    report = GradCheckReport(epsilon=epsilon)
    if not params:
        return report
    for p in params.values():
        p.grad = None
    backward(f())
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.value)
        worst = 0.0
        flat = p.value.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            up = float(f().value)
            flat[k] = orig - epsilon
            down = float(f().value)
            flat[k] = orig
            num = (up - down) / (2 * epsilon)
            a = float(analytic.reshape(-1)[k])
            err = abs(a - num) / max(abs(a), abs(num), REL_FLOOR)
            worst = max(worst, err)
        report.max_rel_error[name] = worst
    return report
