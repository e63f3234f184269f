"""Reverse-mode automatic differentiation over float32 numpy arrays.

Every backward rule is written with the same differentiable operations used in
the forward pass.  Running a backward pass with ``create_graph=True`` therefore
records the gradient computation itself, which is what the gradient penalty
needs: the norm of an input-gradient is a differentiable function of the
discriminator parameters.

Convolutions, pooling and context splicing are composites of a small set of
index primitives (``unfold``/``fold``, ``take``/``scatter``, ``pad``/``crop``)
that are each other's adjoints, so no operation needs a dedicated second
derivative.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Iterable, Sequence

import numpy as np

DTYPE = np.float32

_node_ids = itertools.count(1)
class _Mode(threading.local):
    # per-thread so concurrent trials cannot toggle each other's grad mode
    grad_enabled = True
    dtype = DTYPE


_mode = _Mode()


class AutodiffError(RuntimeError):
    """Raised on invalid graph usage (non-scalar loss, non-finite values, ...)."""


class NonFiniteError(AutodiffError):
    """A forward op produced NaN or Inf."""


@contextlib.contextmanager
def enable_grad(flag: bool = True):
    prev, _mode.grad_enabled = _mode.grad_enabled, flag
    try:
        yield
    finally:
        _mode.grad_enabled = prev


def no_grad():
    return enable_grad(False)


def is_grad_enabled() -> bool:
    return _mode.grad_enabled


def get_dtype():
    return _mode.dtype


@contextlib.contextmanager
def float64_mode():
    """Evaluate in double precision; used by finite-difference oracles only."""
    prev, _mode.dtype = _mode.dtype, np.float64
    try:
        yield
    finally:
        _mode.dtype = prev


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=_mode.dtype)


class Tensor:
    """Dense float32 array that optionally records the operations producing it."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_fn", "_inputs", "_ctx", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids) if requires_grad else None
        self._fn = None
        self._inputs: tuple = ()
        self._ctx: dict = {}

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ----------------------------------------------------------
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
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __rtruediv__(self, other):
        return mul(other, power(self, -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def backward(self, grad_output=None) -> None:
        backward(self, grad_output)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """One differentiable operation.

    ``forward`` works on numpy arrays; ``backward`` receives the upstream
    gradient as a Tensor and must return Tensors (or None) built from
    differentiable operations.
    """

    @staticmethod
    def forward(ctx: dict, *arrays, **kw) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: dict, g: Tensor) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kw) -> Tensor:
        tensors = tuple(_wrap(x) for x in inputs)
        ctx: dict = {}
        out = cls.forward(ctx, *(t.data for t in tensors), **kw)
        out = np.asarray(out, dtype=_mode.dtype)
        # one reduction catches NaN/Inf; the exact test only runs if it overflowed
        if not np.isfinite(np.add.reduce(out, axis=None)) and not np.isfinite(out).all():
            raise NonFiniteError(f"{cls.__name__} produced non-finite values")
        result = Tensor(out)
        if _mode.grad_enabled and any(t.requires_grad for t in tensors):
            result.requires_grad = True
            result.node_id = next(_node_ids)
            result._fn = cls
            result._inputs = tensors
            ctx.update(kw)
            result._ctx = ctx
        return result


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def _broadcast_shape(a: np.ndarray, b: np.ndarray, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


class SumTo(Function):
    @staticmethod
    def forward(ctx, a, shape):
        ctx["in_shape"] = a.shape
        return _sum_to_array(a, shape)

    @staticmethod
    def backward(ctx, g):
        return (broadcast_to(g, ctx["in_shape"]),)


class BroadcastTo(Function):
    @staticmethod
    def forward(ctx, a, shape):
        ctx["in_shape"] = a.shape
        return np.broadcast_to(a, shape).copy()

    @staticmethod
    def backward(ctx, g):
        return (sum_to(g, ctx["in_shape"]),)


def _sum_to_array(a: np.ndarray, shape: tuple) -> np.ndarray:
    if a.shape == tuple(shape):
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1
    )
    out = a.sum(axis=axes, keepdims=True)
    return out.reshape(shape)


def sum_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return SumTo.apply(x, shape=shape)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return BroadcastTo.apply(x, shape=shape)


class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape(a, b, "add")
        ctx["shapes"] = (a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx["shapes"]
        return sum_to(g, sa), sum_to(g, sb)


class Sub(Function):
    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape(a, b, "sub")
        ctx["shapes"] = (a.shape, b.shape)
        return a - b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx["shapes"]
        return sum_to(g, sa), sum_to(neg(g), sb)


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        _broadcast_shape(a, b, "mul")
        return a * b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx["inputs"]
        return sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)


class Neg(Function):
    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, g):
        return (neg(g),)


class Power(Function):
    @staticmethod
    def forward(ctx, a, p):
        if p < 0 and np.any(a == 0):
            raise AutodiffError("power: negative exponent of zero")
        return np.power(a, p)

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx["inputs"]
        p = ctx["p"]
        if p == 1.0:
            return (g,)
        return (mul(g, mul(power(a, p - 1.0), p)),)


class Exp(Function):
    @staticmethod
    def forward(ctx, a):
        return np.exp(a)

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx["inputs"]
        return (mul(g, exp(a)),)


class Log(Function):
    @staticmethod
    def forward(ctx, a):
        if np.any(a <= 0):
            raise AutodiffError("log of non-positive value")
        return np.log(a)

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx["inputs"]
        return (mul(g, power(a, -1.0)),)


def _stable_sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


class Sigmoid(Function):
    @staticmethod
    def forward(ctx, a):
        return _stable_sigmoid(a)

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx["inputs"]
        s = sigmoid(a)
        return (mul(g, mul(s, sub(1.0, s))),)


class Sum(Function):
    @staticmethod
    def forward(ctx, a, axis, keepdims):
        ctx["in_shape"] = a.shape
        return np.sum(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(ctx, g):
        shape = ctx["in_shape"]
        axis, keepdims = ctx["axis"], ctx["keepdims"]
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % len(shape) for ax in axes)
            kept = tuple(1 if i in axes else s for i, s in enumerate(shape))
            g = reshape(g, kept)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * len(shape))
        return (broadcast_to(g, shape),)


class Reshape(Function):
    @staticmethod
    def forward(ctx, a, shape):
        ctx["in_shape"] = a.shape
        return a.reshape(shape)

    @staticmethod
    def backward(ctx, g):
        return (reshape(g, ctx["in_shape"]),)


class Transpose(Function):
    @staticmethod
    def forward(ctx, a, axes):
        if axes is None:
            axes = tuple(reversed(range(a.ndim)))
        ctx["perm"] = axes
        return np.ascontiguousarray(np.transpose(a, axes))

    @staticmethod
    def backward(ctx, g):
        inv = tuple(np.argsort(ctx["perm"]))
        return (transpose(g, inv),)


class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")
        return np.matmul(a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx["inputs"]
        ga = matmul(g, swap_last(b))
        gb = matmul(swap_last(a), g)
        return sum_to(ga, a.shape), sum_to(gb, b.shape)


class Einsum(Function):
    """Two-operand contraction whose gradients are again two-operand contractions."""

    @staticmethod
    def forward(ctx, a, b, subscripts):
        return np.einsum(subscripts, a, b, optimize=True)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx["inputs"]
        lhs, out = ctx["subscripts"].split("->")
        sa, sb = lhs.split(",")
        ga = einsum(f"{out},{sb}->{sa}", g, b) if a.requires_grad else None
        gb = einsum(f"{out},{sa}->{sb}", g, a) if b.requires_grad else None
        return ga, gb


# ---------------------------------------------------------------------------
# index primitives (mutual adjoints)
# ---------------------------------------------------------------------------

class Unfold(Function):
    """(..., L) -> (..., T', K) sliding windows along the last axis."""

    @staticmethod
    def forward(ctx, a, kernel, stride):
        length = a.shape[-1]
        ctx["length"] = length
        n_out = (length - kernel) // stride + 1
        if n_out < 1:
            raise ValueError(f"unfold: length {length} shorter than kernel {kernel}")
        view = np.lib.stride_tricks.sliding_window_view(a, kernel, axis=-1)
        return np.ascontiguousarray(view[..., ::stride, :][..., :n_out, :])

    @staticmethod
    def backward(ctx, g):
        return (fold(g, ctx["length"], ctx["stride"]),)


class Fold(Function):
    """Adjoint of :class:`Unfold`: overlap-add windows back onto a length-L axis."""

    @staticmethod
    def forward(ctx, a, length, stride):
        n_out, kernel = a.shape[-2], a.shape[-1]
        if (n_out - 1) * stride + kernel > length:
            raise ValueError("fold: windows exceed target length")
        ctx["kernel"] = kernel
        out = np.zeros(a.shape[:-2] + (length,), dtype=a.dtype)
        span = (n_out - 1) * stride + 1
        for k in range(kernel):
            out[..., k:k + span:stride] += a[..., :, k]
        return out

    @staticmethod
    def backward(ctx, g):
        return (unfold(g, ctx["kernel"], ctx["stride"]),)


class Take(Function):
    """Gather along the last axis with a fixed integer index array."""

    @staticmethod
    def forward(ctx, a, index):
        ctx["length"] = a.shape[-1]
        return a[..., index]

    @staticmethod
    def backward(ctx, g):
        return (scatter(g, ctx["index"], ctx["length"]),)


class Scatter(Function):
    """Adjoint of :class:`Take`: scatter-add into a zero axis of size ``length``."""

    @staticmethod
    def forward(ctx, a, index, length):
        lead = a.shape[: a.ndim - index.ndim]
        flat = a.reshape(lead + (-1,))
        idx = index.reshape(-1)
        if idx.size * length <= 1 << 22:
            onehot = np.zeros((idx.size, length), dtype=a.dtype)
            onehot[np.arange(idx.size), idx] = 1.0
            return flat @ onehot
        out = np.zeros((length,) + lead, dtype=a.dtype)
        np.add.at(out, idx, np.moveaxis(flat, -1, 0))
        return np.moveaxis(out, 0, -1)

    @staticmethod
    def backward(ctx, g):
        return (take(g, ctx["index"]),)


class Pad(Function):
    @staticmethod
    def forward(ctx, a, axis, before, after):
        width = [(0, 0)] * a.ndim
        width[axis] = (before, after)
        ctx["size"] = a.shape[axis]
        return np.pad(a, width)

    @staticmethod
    def backward(ctx, g):
        b = ctx["before"]
        return (crop(g, ctx["axis"], b, b + ctx["size"]),)


class Crop(Function):
    @staticmethod
    def forward(ctx, a, axis, start, stop):
        if not 0 <= start <= stop <= a.shape[axis]:
            raise ValueError(f"crop: range [{start}, {stop}) outside axis of size {a.shape[axis]}")
        ctx["size"] = a.shape[axis]
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, stop)
        return np.ascontiguousarray(a[tuple(sl)])

    @staticmethod
    def backward(ctx, g):
        return (pad(g, ctx["axis"], ctx["start"], ctx["size"] - ctx["stop"]),)


class Concat(Function):
    @staticmethod
    def forward(ctx, *arrays, axis):
        ctx["sizes"] = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, g):
        axis = ctx["axis"]
        out, start = [], 0
        for size in ctx["sizes"]:
            out.append(crop(g, axis, start, start + size))
            start += size
        return tuple(out)


# ---------------------------------------------------------------------------
# functional API
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def neg(a) -> Tensor:
    return Neg.apply(a)


def power(a, p: float) -> Tensor:
    return Power.apply(a, p=float(p))


def exp(a) -> Tensor:
    return Exp.apply(a)


def log(a) -> Tensor:
    return Log.apply(a)


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def sigmoid(a) -> Tensor:
    return Sigmoid.apply(a)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    if isinstance(axis, list):
        axis = tuple(axis)
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a, axes=None) -> Tensor:
    return Transpose.apply(a, axes=None if axes is None else tuple(axes))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def einsum(subscripts: str, a, b) -> Tensor:
    return Einsum.apply(a, b, subscripts=subscripts.replace(" ", ""))


def unfold(a, kernel: int, stride: int = 1) -> Tensor:
    return Unfold.apply(a, kernel=int(kernel), stride=int(stride))


def fold(a, length: int, stride: int = 1) -> Tensor:
    return Fold.apply(a, length=int(length), stride=int(stride))


def take(a, index) -> Tensor:
    return Take.apply(a, index=np.asarray(index, dtype=np.intp))


def scatter(a, index, length: int) -> Tensor:
    return Scatter.apply(a, index=np.asarray(index, dtype=np.intp), length=int(length))


def pad(a, axis: int, before: int, after: int) -> Tensor:
    a = _wrap(a)
    if before == 0 and after == 0:
        return a
    return Pad.apply(a, axis=axis % a.ndim, before=int(before), after=int(after))


def crop(a, axis: int, start: int, stop: int) -> Tensor:
    a = _wrap(a)
    axis = axis % a.ndim
    if start == 0 and stop == a.shape[axis]:
        return a
    return Crop.apply(a, axis=axis, start=int(start), stop=int(stop))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list:
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
        for parent in node._inputs:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _run_backward(root: Tensor, grad_output, create_graph: bool) -> dict:
    if not root.requires_grad:
        raise AutodiffError("backward: tensor is not part of a recorded graph")
    if grad_output is None:
        if root.size != 1:
            raise AutodiffError(f"backward: loss must be scalar, got shape {root.shape}")
        grad_output = Tensor(np.ones(root.shape))
    grads = {id(root): _wrap(grad_output)}
    order = _topo_order(root)
    with enable_grad(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._fn is None:
                continue
            ctx = node._ctx
            ctx["inputs"] = node._inputs
            try:
                parent_grads = node._fn.backward(ctx, g)
            finally:
                del ctx["inputs"]
            for parent, pg in zip(node._inputs, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)
    return {k: v for k, v in grads.items()}, order


def backward(loss: Tensor, grad_output=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Calling twice without zeroing accumulates, as with most frameworks.
    """
    grads, order = _run_backward(loss, grad_output, create_graph=False)
    for node in order:
        if node._fn is None:
            g = grads.get(id(node))
            if g is None:
                continue
            node.grad = g.data.copy() if node.grad is None else node.grad + g.data


def grad(output: Tensor, inputs: Iterable[Tensor], grad_output=None,
         create_graph: bool = False) -> list:
    """Return d(output)/d(input) for each input without touching ``.grad``.

    With ``create_graph=True`` the returned tensors are themselves recorded,
    so they can appear in a loss that is differentiated again.
    """
    inputs = list(inputs)
    grads, _ = _run_backward(output, grad_output, create_graph=create_graph)
    out = []
    for t in inputs:
        g = grads.get(id(t))
        out.append(Tensor(np.zeros(t.shape)) if g is None else g)
    return out
