"""Dense tensors with a tape-based reverse-mode autodiff.

Every differentiable operation is a registered primitive: a forward function
returning ``(output, ctx)`` and a backward function mapping ``(ctx, grad_out)``
to one gradient per input. Operations are only recorded while a :class:`Tape`
is active and at least one input requires a gradient.

Broadcasting is deliberately narrow: binary elementwise ops accept equal
shapes, a 0-d operand, or an operand whose shape is a trailing suffix of the
other's (leading-axis broadcasting). Anything else must go through
:func:`broadcast_to`.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    pass


class DTypeError(TypeError):
    pass


class Tensor:
    """Immutable array wrapper that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in DTYPES else np.float64
        arr = np.asarray(data, dtype=dtype, order="C")
        if arr.dtype not in DTYPES:
            raise DTypeError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; all of it routes through primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


# ---------------------------------------------------------------- tape


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    ctx: object
    backward: Callable


@dataclass
class Tape:
    """Ordered record of primitive executions.

    Use as a context manager; nested tapes are allowed and each records the
    operations executed while it is innermost.
    """

    nodes: list[Node] = field(default_factory=list)
    leaves: dict[int, Tensor] = field(default_factory=dict)
    _produced: set[int] = field(default_factory=set)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def record(self, node: Node) -> None:
        for t in node.inputs:
            if t.requires_grad and id(t) not in self._produced:
                self.leaves.setdefault(id(t), t)
        self._produced.add(id(node.output))
        self.nodes.append(node)

    def gradient(self, loss: Tensor, wrt: Sequence[Tensor] | None = None):
        return backward(self, loss, wrt)


_local = threading.local()


def _tape_stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Reverse sweep over ``tape``; returns ``{leaf: grad}``.

    Every grad-enabled leaf seen by the tape gets an entry, as does every
    tensor in ``wrt``; unreachable ones get zeros.
    """
    if loss.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    leaf_ids = set(tape.leaves)
    leaf_grads: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(node.ctx, g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if gi.shape != t.shape:
                raise ShapeError(f"{node.op}: gradient shape {gi.shape} != input shape {t.shape}")
            target = leaf_grads if key in leaf_ids else grads
            if key in target:
                target[key] = target[key] + gi
            else:
                target[key] = gi
    out: dict[Tensor, Tensor] = {}
    for key, t in tape.leaves.items():
        out[t] = Tensor(leaf_grads.get(key, np.zeros_like(t.data)))
    for t in wrt or ():
        if t not in out:
            out[t] = Tensor(leaf_grads.get(id(t), np.zeros_like(t.data)))
    return out


# ---------------------------------------------------------------- registry


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    backward: Callable


PRIMITIVES: dict[str, Primitive] = {}


def register_primitive(name: str, forward: Callable, backward: Callable) -> Primitive:
    if name in PRIMITIVES:
        raise ValueError(f"primitive {name!r} already registered")
    prim = Primitive(name, forward, backward)
    PRIMITIVES[name] = prim
    return prim


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def primitive_forward(op_id: str, inputs: Sequence, **attrs) -> Tensor:
    """Run primitive ``op_id`` on ``inputs``, recording it when gradients are live."""
    try:
        prim = PRIMITIVES[op_id]
    except KeyError:
        raise ValueError(f"unknown primitive {op_id!r}") from None
    ref = next((x for x in inputs if isinstance(x, Tensor)), None)
    tensors = tuple(_as_tensor(x, ref) for x in inputs)
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise DTypeError(f"{op_id}: mixed dtypes {sorted(str(d) for d in dtypes)}")
    out_data, ctx = prim.forward(*(t.data for t in tensors), **attrs)
    tape = active_tape()
    live = tape is not None and any(t.requires_grad for t in tensors)
    out = Tensor(out_data, dtype=tensors[0].dtype if tensors else None, requires_grad=live)
    if live:
        tape.record(Node(op_id, tensors, out, ctx, prim.backward))
    return out


# ---------------------------------------------------------------- elementwise


def _check_broadcast(op: str, sa: tuple, sb: tuple) -> tuple:
    if sa == sb:
        return sa
    if sb == ():
        return sa
    if sa == ():
        return sb
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb} (only leading-axis broadcasting)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead > 0 else g


def _binary(name, fwd, grads):
    def forward(a, b):
        _check_broadcast(name, a.shape, b.shape)
        return fwd(a, b), (a, b)

    def backward(ctx, g):
        a, b = ctx
        ga, gb = grads(a, b, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    register_primitive(name, forward, backward)


_binary("add", np.add, lambda a, b, g: (g, g))
_binary("sub", np.subtract, lambda a, b, g: (g, -g))
_binary("mul", np.multiply, lambda a, b, g: (g * b, g * a))
_binary("div", np.divide, lambda a, b, g: (g / b, -g * a / (b * b)))


def add(a, b) -> Tensor:
    return primitive_forward("add", (a, b))


def sub(a, b) -> Tensor:
    return primitive_forward("sub", (a, b))


def mul(a, b) -> Tensor:
    return primitive_forward("mul", (a, b))


def div(a, b) -> Tensor:
    return primitive_forward("div", (a, b))


def _unary(name, fwd, grad):
    """``grad(x, y, g)`` receives input, output and upstream gradient."""

    def forward(x):
        y = fwd(x)
        return y, (x, y)

    def backward(ctx, g):
        x, y = ctx
        return (grad(x, y, g),)

    register_primitive(name, forward, backward)


def _sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x):
    return np.logaddexp(0, x).astype(x.dtype, copy=False)


_unary("neg", np.negative, lambda x, y, g: -g)
_unary("exp", np.exp, lambda x, y, g: g * y)
_unary("log", np.log, lambda x, y, g: g / x)
_unary("sigmoid", _sigmoid, lambda x, y, g: g * y * (1 - y))
_unary("softplus", _softplus, lambda x, y, g: g * _sigmoid(x))


def _silu_grad(x, y, g):
    s = _sigmoid(x)
    return g * s * (1 + x * (1 - s))


_unary("silu", lambda x: x * _sigmoid(x), _silu_grad)


def neg(x) -> Tensor:
    return primitive_forward("neg", (x,))


def exp(x) -> Tensor:
    return primitive_forward("exp", (x,))


def log(x) -> Tensor:
    return primitive_forward("log", (x,))


def sigmoid(x) -> Tensor:
    return primitive_forward("sigmoid", (x,))


def softplus(x) -> Tensor:
    return primitive_forward("softplus", (x,))


def silu(x) -> Tensor:
    return primitive_forward("silu", (x,))


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _sum_fwd(x, axis=None, keepdims=False):
    ax = _norm_axis(axis, x.ndim)
    return np.sum(x, axis=ax, keepdims=keepdims), (x.shape, ax, keepdims)


def _sum_bwd(ctx, g):
    shape, ax, keepdims = ctx
    if not keepdims:
        g = np.expand_dims(g, ax)
    return (np.broadcast_to(g, shape).copy(),)


def _mean_fwd(x, axis=None, keepdims=False):
    ax = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in ax])) if ax else 1
    return np.sum(x, axis=ax, keepdims=keepdims) / x.dtype.type(n), (x.shape, ax, keepdims, n)


def _mean_bwd(ctx, g):
    shape, ax, keepdims, n = ctx
    (gx,) = _sum_bwd((shape, ax, keepdims), g)
    return (gx / gx.dtype.type(n),)


register_primitive("sum", _sum_fwd, _sum_bwd)
register_primitive("mean", _mean_fwd, _mean_bwd)


def sum_(x, axis=None, keepdims=False) -> Tensor:
    return primitive_forward("sum", (x,), axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False) -> Tensor:
    return primitive_forward("mean", (x,), axis=axis, keepdims=keepdims)


def _softmax_np(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_fwd(x, axis=-1):
    y = _softmax_np(x, axis)
    return y, (y, axis)


def _softmax_bwd(ctx, g):
    y, axis = ctx
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def _log_softmax_fwd(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    return y, (y, axis)


def _log_softmax_bwd(ctx, g):
    y, axis = ctx
    return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)


register_primitive("softmax", _softmax_fwd, _softmax_bwd)
register_primitive("log_softmax", _log_softmax_fwd, _log_softmax_bwd)


def softmax(x, axis: int = -1) -> Tensor:
    return primitive_forward("softmax", (x,), axis=axis)


def log_softmax(x, axis: int = -1) -> Tensor:
    return primitive_forward("log_softmax", (x,), axis=axis)


def _layer_norm_fwd(x, w, b, eps=1e-5):
    d = x.shape[-1]
    if w.shape != (d,) or b.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {w.shape}, {b.shape} do not match feature size {d}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * w + b, (xhat, rstd, w)


def _layer_norm_bwd(ctx, g):
    xhat, rstd, w = ctx
    d = xhat.shape[-1]
    lead = tuple(range(xhat.ndim - 1))
    gw = (g * xhat).sum(axis=lead)
    gb = g.sum(axis=lead)
    gx_hat = g * w
    gx = rstd / d * (d * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
    return gx, gw, gb


register_primitive("layer_norm", _layer_norm_fwd, _layer_norm_bwd)


def layer_norm(x, weight, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``weight`` and ``bias``."""
    return primitive_forward("layer_norm", (x, weight, bias), eps=eps)


# ---------------------------------------------------------------- linear algebra


def _matmul_fwd(a, b):
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot contract {a.shape} with {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} vs {b.shape}")
    return a @ b, (a, b)


def _matmul_bwd(ctx, g):
    a, b = ctx
    if a.ndim == 1:
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.outer(a, g)
        return ga, gb
    ga = g @ np.swapaxes(b, -1, -2)
    if b.ndim == 2:
        # shared weight: fold all leading axes into the contraction
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = np.swapaxes(a, -1, -2) @ g
    return ga, gb


register_primitive("matmul", _matmul_fwd, _matmul_bwd)


def matmul(a, b) -> Tensor:
    """``a @ b``; ``b`` is either a shared 2-D matrix or carries ``a``'s batch dims."""
    return primitive_forward("matmul", (a, b))


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight (+ bias)`` with ``weight`` stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------- shape ops


def _reshape_fwd(x, shape=()):
    try:
        return x.reshape(shape), x.shape
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None


register_primitive("reshape", _reshape_fwd, lambda shape, g: (g.reshape(shape),))


def reshape(x, shape) -> Tensor:
    return primitive_forward("reshape", (x,), shape=tuple(shape))


def _transpose_fwd(x, axes=None):
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    return np.transpose(x, axes).copy(), axes


register_primitive("transpose", _transpose_fwd, lambda axes, g: (np.transpose(g, np.argsort(axes)).copy(),))


def transpose(x, axes=None) -> Tensor:
    return primitive_forward("transpose", (x,), axes=axes)


def _broadcast_fwd(x, shape=()):
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    return out, x.shape


def _broadcast_bwd(in_shape, g):
    lead = g.ndim - len(in_shape)
    g = g.sum(axis=tuple(range(lead))) if lead else g
    ax = tuple(i for i, n in enumerate(in_shape) if n == 1 and g.shape[i] != 1)
    if ax:
        g = g.sum(axis=ax, keepdims=True)
    return (g,)


register_primitive("broadcast_to", _broadcast_fwd, _broadcast_bwd)


def broadcast_to(x, shape) -> Tensor:
    return primitive_forward("broadcast_to", (x,), shape=tuple(shape))


def _slice_fwd(x, axis=0, start=0, stop=None):
    axis %= x.ndim
    n = x.shape[axis]
    stop = n if stop is None else stop
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    return x[tuple(idx)].copy(), (x.shape, tuple(idx))


def _slice_bwd(ctx, g):
    shape, idx = ctx
    gx = np.zeros(shape, dtype=g.dtype)
    gx[idx] = g
    return (gx,)


register_primitive("slice", _slice_fwd, _slice_bwd)


def slice_(x, axis: int, start: int, stop: int | None = None) -> Tensor:
    return primitive_forward("slice", (x,), axis=axis, start=start, stop=stop)


def split(x, sizes: Iterable[int], axis: int = -1) -> list[Tensor]:
    out, start = [], 0
    for n in sizes:
        out.append(slice_(x, axis, start, start + n))
        start += n
    if start != x.shape[axis]:
        raise ShapeError(f"split: sizes sum to {start}, axis has {x.shape[axis]}")
    return out


def _concat_fwd(*xs, axis=-1):
    ref = xs[0]
    ax = axis % ref.ndim
    for x in xs[1:]:
        if x.ndim != ref.ndim or any(x.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError(f"concat: shapes {[x.shape for x in xs]} disagree off axis {axis}")
    sizes = [x.shape[ax] for x in xs]
    return np.concatenate(xs, axis=ax), (ax, sizes)


def _concat_bwd(ctx, g):
    ax, sizes = ctx
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=ax))


register_primitive("concat", _concat_fwd, _concat_bwd)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    return primitive_forward("concat", tuple(xs), axis=axis)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [reshape(x, x.shape[:axis] + (1,) + x.shape[axis:]) for x in xs]
    return concat(xs, axis=axis)


def _gather_fwd(x, index=(), axis=0):
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 1:
        raise ShapeError(f"gather: index must be 1-D, got shape {index.shape}")
    n = x.shape[axis]
    if index.size and (index.min() < -n or index.max() >= n):
        raise ShapeError(f"gather: index out of range for axis {axis} of size {n}")
    return np.take(x, index, axis=axis), (x.shape, index, axis)


def _gather_bwd(ctx, g):
    shape, index, axis = ctx
    gx = np.zeros(shape, dtype=g.dtype)
    moved = np.moveaxis(gx, axis, 0)
    np.add.at(moved, index, np.moveaxis(g, axis, 0))
    return (gx,)


register_primitive("gather", _gather_fwd, _gather_bwd)


def gather(x, index, axis: int = 0) -> Tensor:
    """Select entries ``index`` along ``axis``; repeats scatter-add in backward."""
    return primitive_forward("gather", (x,), index=np.asarray(index), axis=axis)


# ---------------------------------------------------------------- convolutions


def _conv2d_fwd(x, w, b, stride=1):
    # x: (B, H, W, Cin), w: (k, k, Cin, Cout), b: (Cout,)
    if x.ndim != 4 or w.ndim != 4 or x.shape[-1] != w.shape[2] or b.shape != (w.shape[3],):
        raise ShapeError(f"conv2d: bad shapes x={x.shape} w={w.shape} b={b.shape}")
    kh, kw = w.shape[:2]
    H, W = x.shape[1:3]
    if kh > H or kw > W or stride < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} stride {stride} invalid for {H}x{W} input")
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # win: (B, Gh, Gw, Cin, kh, kw)
    out = np.einsum("bhwcij,ijco->bhwo", win, w, optimize=True) + b
    return out, (x, w, stride)


def _conv2d_bwd(ctx, g):
    x, w, stride = ctx
    kh, kw = w.shape[:2]
    Gh, Gw = g.shape[1:3]
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    gw = np.einsum("bhwcij,bhwo->ijco", win, g, optimize=True)
    gb = g.sum(axis=(0, 1, 2))
    gx = np.zeros_like(x)
    # scatter each kernel tap back onto the strided input grid
    gproj = np.einsum("bhwo,ijco->bhwijc", g, w, optimize=True)
    for i in range(kh):
        for j in range(kw):
            gx[:, i:i + stride * (Gh - 1) + 1:stride, j:j + stride * (Gw - 1) + 1:stride] += gproj[:, :, :, i, j]
    return gx, gw, gb


register_primitive("conv2d", _conv2d_fwd, _conv2d_bwd)


def conv2d(x, weight, bias, stride: int = 1) -> Tensor:
    """Valid-mode strided 2-D convolution on channels-last input."""
    return primitive_forward("conv2d", (x, weight, bias), stride=stride)


def _causal_conv1d_fwd(x, w, b):
    # x: (B, L, C), w: (C, width), b: (C,)
    if x.ndim != 3 or w.ndim != 2 or w.shape[0] != x.shape[-1] or b.shape != (x.shape[-1],):
        raise ShapeError(f"causal_conv1d: bad shapes x={x.shape} w={w.shape} b={b.shape}")
    width = w.shape[1]
    L = x.shape[1]
    xp = np.concatenate([np.zeros((x.shape[0], width - 1, x.shape[2]), x.dtype), x], axis=1)
    out = np.broadcast_to(b, x.shape).copy()
    for j in range(width):
        out += xp[:, j:j + L] * w[:, j]
    return out, (xp, w)


def _causal_conv1d_bwd(ctx, g):
    xp, w = ctx
    width = w.shape[1]
    L = g.shape[1]
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    for j in range(width):
        gxp[:, j:j + L] += g * w[:, j]
        gw[:, j] = (g * xp[:, j:j + L]).sum(axis=(0, 1))
    return gxp[:, width - 1:], gw, g.sum(axis=(0, 1))


register_primitive("causal_conv1d", _causal_conv1d_fwd, _causal_conv1d_bwd)


def causal_conv1d(x, weight, bias) -> Tensor:
    """Depthwise causal convolution with ``width - 1`` zeros of left padding."""
    return primitive_forward("causal_conv1d", (x, weight, bias))


# ---------------------------------------------------------------- gradient oracle


def finite_difference_grad(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x`` (float64 only)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if x.dtype != np.float64:
        raise DTypeError("finite differences require float64 input")
    base = x.data.copy()
    out = np.empty_like(base)
    flat = out.reshape(-1)
    for i in range(base.size):
        vals = []
        for sign in (1.0, -1.0):
            pert = base.copy().reshape(-1)
            pert[i] += sign * eps
            v = f(Tensor(pert.reshape(base.shape))).item()
            if not np.isfinite(v):
                raise FloatingPointError(f"f returned non-finite value {v} at element {i}")
            vals.append(v)
        flat[i] = (vals[0] - vals[1]) / (2 * eps)
    return Tensor(out)


def grad_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(1, |a|) elementwise."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(a)), initial=0.0))


def check_gradients(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-6) -> list[float]:
    """Compare tape gradients of ``f(*inputs)`` with central differences.

    Returns the relative error per input.
    """
    leaves = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in inputs]
    with Tape() as tape:
        loss = f(*leaves)
    grads = backward(tape, loss, leaves)
    errors = []
    for i, leaf in enumerate(leaves):
        def fi(xi, i=i):
            args = [Tensor(l.data) for l in leaves]
            args[i] = xi
            return f(*args)

        numeric = finite_difference_grad(fi, Tensor(leaf.data), eps)
        errors.append(grad_rel_error(grads[leaf].data, numeric.data))
    return errors
