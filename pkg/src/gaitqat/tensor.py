"""A small dense-tensor engine with reverse-mode automatic differentiation.

Every value is a float64 numpy array wrapped in :class:`Tensor`. Operations that
involve at least one tensor with ``requires_grad`` record a :class:`TapeNode`
on the output; :func:`backward` walks those nodes in reverse topological order.

Broadcasting is deliberately narrow: elementwise binary ops accept operands of
identical shape, or one operand with a single element. Bias and affine
parameters are handled inside the ops that need them (``conv2d``,
``batch_norm``).

Gradient accumulation is strict: calling :func:`backward` while any reachable
tensor still holds a gradient raises :class:`UsageError`. Clear gradients with
:func:`zero_grad` (or by setting ``.grad = None``) between passes.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError, UsageError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr: np.ndarray, what: str) -> None:
    # a NaN or Inf anywhere makes the sum non-finite; only overflow needs the full scan
    if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


class TapeNode:
    """Record of one differentiable operation."""

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        # maps upstream gradient -> tuple of input gradients (None for skipped)
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            else np.ascontiguousarray(data, dtype=np.float64)
        _check_finite(arr, name or "tensor data")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: TapeNode | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data, name=op)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, tuple(inputs), backward_fn)
    return out


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` tensor reachable from ``loss``."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor requiring grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))

    for t in order:
        if t.grad is not None:
            raise UsageError(
                "backward called while gradients are still populated; "
                "zero them first (strict accumulation mode)"
            )

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            g = np.zeros_like(t.data)
        _check_finite(g, f"gradient of {t.node.op if t.node else t.name or 'leaf'}")
        t.grad = g
        if t.node is None:
            continue
        in_grads = t.node.backward_fn(g)
        for inp, ig in zip(t.node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.shape:
                ig = ig.reshape(inp.shape)
            prev = grads.get(id(inp))
            grads[id(inp)] = ig if prev is None else prev + ig


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def bw(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def bw(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def bw(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return _make("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    if np.any(b.data == 0):
        raise NumericError("division by zero")
    out = a.data / b.data

    def bw(g):
        return _reduce_to(g / b.data, a), _reduce_to(-g * out / b.data, b)

    return _make("div", out, (a, b), bw)


def power(x: Tensor, exponent: float) -> Tensor:
    out = x.data ** exponent

    def bw(g):
        return (g * exponent * x.data ** (exponent - 1),)

    return _make("pow", out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _make("relu", np.where(mask, x.data, 0.0), (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return _make("exp", out, (x,), bw)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log of non-positive value")

    def bw(g):
        return (g / x.data,)

    return _make("log", np.log(x.data), (x,), bw)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("sqrt gradient undefined at non-positive values")
    out = np.sqrt(x.data)

    def bw(g):
        return (g * 0.5 / out,)

    return _make("sqrt", out, (x,), bw)


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def _expand(g: np.ndarray, shape: tuple[int, ...], axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    return np.broadcast_to(np.expand_dims(g, axes), shape)


def tsum(x: Tensor, axis=None) -> Tensor:
    def bw(g):
        return (np.array(_expand(g, x.shape, axis)),)

    return _make("sum", np.asarray(x.data.sum(axis=axis)), (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))

    def bw(g):
        return (np.array(_expand(g, x.shape, axis)) / n,)

    return _make("mean", np.asarray(x.data.mean(axis=axis)), (x,), bw)


def max_over_axis(x: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; ties go to the lowest index, which alone receives gradient."""
    axis = axis % x.ndim
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make("max", out, (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return _make("reshape", out, (x,), bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _make("transpose", x.data.transpose(axes), (x,), bw)


def getitem(x: Tensor, key) -> Tensor:
    out = np.array(x.data[key])

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _make("getitem", out, (x,), bw)


def take(x: Tensor, flat_index) -> Tensor:
    """Gather entries of the flattened tensor at ``flat_index``."""
    flat_index = np.asarray(flat_index, dtype=np.intp)
    out = x.data.reshape(-1)[flat_index]

    def bw(g):
        gx = np.zeros(x.size)
        np.add.at(gx, flat_index, g)
        return (gx.reshape(x.shape),)

    return _make("take", out, (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product; 3-D operands are treated as stacks with equal leading extent."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise DimensionError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise DimensionError(f"matmul: shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        return g @ bt, at @ g

    return _make("matmul", a.data @ b.data, (a, b), bw)


def conv_output_size(size: int, f: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - f) // stride + 1


def _im2col_nhwc(xp: np.ndarray, f: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[0], xp.shape[3]
    if c == 1:
        win = sliding_window_view(xp[..., 0], (f, f), axis=(1, 2))[:, ::stride, ::stride]
        return win[:, :ho, :wo].reshape(n * ho * wo, f * f)
    cols = np.empty((n, ho, wo, f, f, c))
    for i in range(f):
        for j in range(f):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, f * f * c)


def conv2d_nhwc(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
                padding: int = 0) -> Tensor:
    """Channels-last cross-correlation: ``x`` (N, H, W, C_in), ``w`` (C_out, C_in, F, F)."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and weight")
    n, h, wd, c = x.shape
    co, ci, f, f2 = w.shape
    if ci != c or f != f2:
        raise DimensionError(f"conv2d: weight {w.shape} incompatible with {c} input channels")
    if stride < 1:
        raise DimensionError("conv2d: stride must be >= 1")
    if f > h + 2 * padding or f > wd + 2 * padding:
        raise DimensionError("conv2d: kernel larger than padded input")
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({co},)")
    ho = conv_output_size(h, f, stride, padding)
    wo = conv_output_size(wd, f, stride, padding)
    if padding:
        xp = np.zeros((n, h + 2 * padding, wd + 2 * padding, c))
        xp[:, padding:padding + h, padding:padding + wd, :] = x.data
    else:
        xp = x.data
    cols = _im2col_nhwc(xp, f, stride, ho, wo)
    wmat = w.data.transpose(2, 3, 1, 0).reshape(f * f * c, co)
    out = cols @ wmat
    if bias is not None:
        out += bias.data

    def bw(g):
        gmat = g.reshape(-1, co)
        gw = (cols.T @ gmat).reshape(f, f, c, co).transpose(3, 2, 0, 1) if w.requires_grad else None
        gb = gmat.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            wk = wmat.reshape(f, f, c, co)
            gxp = np.zeros_like(xp)
            for i in range(f):
                for j in range(f):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += \
                        (gmat @ wk[i, j].T).reshape(n, ho, wo, c)
            gx = gxp[:, padding:padding + h, padding:padding + wd, :] if padding else gxp
        return gx, gw, gb

    inputs = (x, w) if bias is None else (x, w, bias)
    return _make("conv2d", out.reshape(n, ho, wo, co), inputs, bw)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (N, C_in, H, W) with ``w`` (C_out, C_in, F, F)."""
    if x.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and weight")
    if w.ndim == 4 and w.shape[1] != x.shape[1]:
        raise DimensionError(f"conv2d: weight {w.shape} incompatible with input {x.shape}")
    out = conv2d_nhwc(transpose(x, (0, 2, 3, 1)), w, bias, stride, padding)
    return transpose(out, (0, 3, 1, 2))


def max_pool2d_nhwc(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling of a channels-last (N, H, W, C) tensor.

    Ties go to the first window element in row-major order.
    """
    n, h, w, c = x.shape
    if h % size or w % size:
        raise DimensionError(f"max_pool2d: {h}x{w} not divisible by {size}")
    v = x.data.reshape(n, h // size, size, w // size, size, c)
    views = [v[:, :, i, :, j, :] for i in range(size) for j in range(size)]
    out = views[0].copy()
    for cand in views[1:]:
        np.maximum(out, cand, out=out)

    def bw(g):
        gx = np.zeros((n, h // size, size, w // size, size, c))
        taken = np.zeros(out.shape, dtype=bool)
        for k, cand in enumerate(views):
            hit = cand == out
            hit &= ~taken
            taken |= hit
            gx[:, :, k // size, :, k % size, :] = np.where(hit, g, 0.0)
        return (gx.reshape(x.shape),)

    return _make("max_pool2d", out, (x,), bw)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling over the trailing two axes of an (N, C, H, W) tensor."""
    return transpose(max_pool2d_nhwc(transpose(x, (0, 2, 3, 1)), size), (0, 3, 1, 2))


# ---------------------------------------------------------------------------
# normalisation and probability


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Batch normalisation over axis 0.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place; a batch of one sample is rejected.
    """
    feat = x.shape[1:]
    if gamma.shape != feat or beta.shape != feat:
        raise DimensionError(f"batch_norm: affine shape must be {feat}")
    b = x.shape[0]
    if training:
        if b < 2:
            raise NumericError("batch_norm in training mode needs at least 2 samples")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * b / (b - 1)
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def bw(g):
        dg = (g * xhat).sum(axis=0)
        db = g.sum(axis=0)
        dxhat = g * gamma.data
        if training:
            dx = inv_std / b * (b * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv_std
        return dx, dg, db

    return _make("batch_norm", out, (x, gamma, beta), bw)


def log_softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Log-softmax along ``axis``, optionally restricted to entries where ``mask`` is true.

    Masked-out entries take the value 0 and receive no gradient. A slice with no
    unmasked entry yields zeros.
    """
    if mask is None:
        m = x.data.max(axis=axis, keepdims=True)
        lse = m + np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True))
        out = x.data - lse
        soft = np.exp(out)

        def bw(g):
            return (g - soft * g.sum(axis=axis, keepdims=True),)

        return _make("log_softmax", out, (x,), bw)

    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError("log_softmax: mask shape must match input")
    z = np.where(mask, x.data, -np.inf)
    m = z.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(z - m), 0.0)
    tot = e.sum(axis=axis, keepdims=True)
    safe = np.where(tot > 0, tot, 1.0)
    soft = e / safe
    out = np.where(mask, x.data - m - np.log(safe), 0.0)

    def bw(g):
        g = np.where(mask, g, 0.0)
        return (np.where(mask, g - soft * g.sum(axis=axis, keepdims=True), 0.0),)

    return _make("log_softmax", out, (x,), bw)


def pairwise_distance(x: Tensor) -> Tensor:
    """Euclidean distance matrix between the rows of a 2-D tensor.

    The gradient through a zero distance is taken as zero.
    """
    if x.ndim != 2:
        raise DimensionError("pairwise_distance expects a 2-D tensor")
    diff = x.data[:, None, :] - x.data[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            wgt = np.where(dist > 0, (g + g.T) / dist, 0.0)
        return (wgt.sum(axis=1)[:, None] * x.data - wgt @ x.data,)

    return _make("pairwise_distance", dist, (x,), bw)


# ---------------------------------------------------------------------------
# user-defined gradients


def custom_op(inputs: Sequence[Tensor], forward_fn: Callable, backward_fn: Callable,
              op: str = "custom") -> Tensor:
    """Apply ``forward_fn`` to the input arrays with a hand-written gradient.

    ``backward_fn(g, *arrays)`` must return one gradient (or None) per input.
    No differentiation passes through ``forward_fn``.
    """
    inputs = tuple(as_tensor(t) for t in inputs)
    arrays = tuple(t.data for t in inputs)
    out = np.asarray(forward_fn(*arrays), dtype=np.float64)

    def bw(g):
        grads = backward_fn(g, *arrays)
        if len(grads) != len(inputs):
            raise UsageError(f"{op}: backward returned {len(grads)} grads for {len(inputs)} inputs")
        return tuple(None if gr is None else np.asarray(gr, dtype=np.float64) for gr in grads)

    return _make(op, out, inputs, bw)


def custom_unary(x: Tensor, forward_fn: Callable, backward_fn: Callable, op: str = "custom_unary") -> Tensor:
    """Elementwise op whose backward is ``backward_fn(upstream_grad, saved_input)``."""
    x = as_tensor(x)
    out = np.asarray(forward_fn(x.data), dtype=np.float64)
    if out.shape != x.shape:
        raise DimensionError(f"{op}: forward_fn changed shape {x.shape} -> {out.shape}")

    def bw(g):
        return (np.asarray(backward_fn(g, x.data), dtype=np.float64),)

    return _make(op, out, (x,), bw)
