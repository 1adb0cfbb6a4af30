"""Dense numpy-backed tensors with define-by-run reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` holding links to
its inputs and a closure that maps the output gradient to input gradients.
:func:`backward` orders the reachable graph into a :class:`Tape` (reverse
topological order) and replays it once.

Broadcasting is restricted to scalar-with-tensor. Row-wise bias addition is a
named operation (:func:`add_bias`) rather than an implicit broadcast.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "tensor", "elementwise", "add", "sub", "mul", "neg",
    "exp", "log", "sigmoid", "relu", "scale", "absolute", "matmul",
    "add_bias", "conv2d", "reduce", "tsum", "mean", "tmax", "softmax",
    "log_softmax", "l2_norm", "reshape", "transpose", "custom_op",
    "backward", "no_grad_value", "no_grad",
]

L2_EPS = 1e-12
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (this thread only)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward",
                 "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else _infer_dtype(data))
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("tensor created with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

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

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def abs(self):
        return absolute(self)

    def backward(self) -> "Tape":
        return backward(self)


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    if isinstance(data, Tensor):
        return data.data.dtype
    return np.float64


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def custom_op(value: np.ndarray, parents: Iterable[Tensor],
              backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
              op: str = "custom") -> Tensor:
    """Wrap ``value`` as the output of a differentiable op.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    ``None``) per parent, each shaped like that parent.
    """
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    if not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out.data = value
    out.grad = None
    out.op = op
    out._consumed = False
    out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def no_grad_value(x) -> np.ndarray:
    """Raw array of a tensor or array-like, outside the graph."""
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# -- elementwise -----------------------------------------------------------

def _binary_shapes(a: Tensor, b: Tensor, kind: str) -> None:
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ValueError(f"{kind}: shape mismatch {a.shape} vs {b.shape} "
                         "(only scalar broadcasting is supported)")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _binary_shapes(a, b, "add")
    return custom_op(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _binary_shapes(a, b, "sub")
    return custom_op(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _binary_shapes(a, b, "mul")
    return custom_op(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape),
                                _unbroadcast(g * a.data, b.shape)), "mul")


def neg(a: Tensor) -> Tensor:
    return custom_op(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return custom_op(a.data * a.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return custom_op(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    return custom_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def _logistic(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _logistic(a.data)
    return custom_op(y, (a,), lambda g: (g * y * (1 - y),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return custom_op(np.where(pos, a.data, 0).astype(a.dtype), (a,),
                     lambda g: (g * pos,), "relu")


def absolute(a: Tensor) -> Tensor:
    return custom_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


_UNARY = {"neg": neg, "exp": exp, "log": log, "sigmoid": sigmoid, "relu": relu, "abs": absolute}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name; ``scale`` takes a python number as ``b``."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind == "scale":
        return scale(a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    return custom_op(a.data @ b.data, (a, b),
                     lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """``a[..., n] + bias[n]``."""
    if bias.data.ndim != 1 or a.shape[-1] != bias.shape[0]:
        raise ValueError(f"add_bias: bias {bias.shape} does not match trailing axis of {a.shape}")
    lead = tuple(range(a.data.ndim - 1))
    return custom_op(a.data + bias.data, (a, bias),
                     lambda g: (g, g.sum(axis=lead)), "add_bias")


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # x: [B, C, H, W] -> [B*H'*W', C*k*k]
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, bias: Tensor | None = None) -> Tensor:
    """Valid cross-correlation. ``x`` is [C,H,W] or batched [B,C,H,W]."""
    if stride < 1:
        raise ValueError("stride must be positive")
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4) or kernels.data.ndim != 4:
        raise ValueError("conv2d expects input [C,H,W] or [B,C,H,W] and kernels [O,C,k,k]")
    xd = x.data if batched else x.data[None]
    bsz, c, h, w = xd.shape
    o, ck, k, k2 = kernels.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    if ck != c:
        raise ValueError(f"conv2d: kernel expects {ck} channels, input has {c}")
    if k > h or k > w:
        raise ValueError(f"conv2d: kernel {k}x{k} larger than input {h}x{w}")
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    cols = _im2col(xd, k, stride)
    kmat = kernels.data.reshape(o, -1)
    out = cols @ kmat.T
    if bias is not None:
        if bias.shape != (o,):
            raise ValueError("conv2d: bias must have one entry per output channel")
        out = out + bias.data
    out = out.reshape(bsz, ho, wo, o).transpose(0, 3, 1, 2)
    if not batched:
        out = out[0]
    out = np.ascontiguousarray(out)

    def _back(g):
        gb = g if batched else g[None]
        gmat = gb.transpose(0, 2, 3, 1).reshape(-1, o)
        dk = (gmat.T @ cols).reshape(kernels.shape)
        dcols = (gmat @ kmat).reshape(bsz, ho, wo, c, k, k)
        dx = np.zeros_like(xd)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        grads = [dx if batched else dx[0], dk]
        if bias is not None:
            grads.append(gmat.sum(axis=0))
        return grads

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return custom_op(out, parents, _back, "conv2d")


# -- reductions ------------------------------------------------------------

def _norm_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(kind: str, a: Tensor, axis=None) -> Tensor:
    axes = _norm_axis(axis, a.data.ndim)
    if any(a.shape[ax] == 0 for ax in axes) or (a.data.ndim and a.size == 0):
        raise ValueError("reduce over an empty axis")
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
    if kind == "sum":
        return custom_op(a.data.sum(axis=axes), (a,),
                         lambda g: (np.broadcast_to(np.reshape(g, kept), a.shape).copy(),), "sum")
    if kind == "mean":
        count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
        return custom_op(a.data.mean(axis=axes), (a,),
                         lambda g: (np.broadcast_to(np.reshape(g, kept) / count, a.shape).copy(),),
                         "mean")
    if kind == "max":
        # move reduced axes to the end, flatten them, argmax picks the first maximum
        rest = tuple(i for i in range(a.data.ndim) if i not in axes)
        moved = a.data.transpose(rest + axes)
        flat = moved.reshape(moved.shape[:len(rest)] + (-1,))
        idx = flat.argmax(axis=-1)
        val = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

        def _back(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, idx[..., None], np.asarray(g)[..., None], axis=-1)
            inv = np.argsort(rest + axes)
            return (gflat.reshape(moved.shape).transpose(inv),)

        return custom_op(val, (a,), _back, "max")
    raise ValueError(f"unknown reduction {kind!r}")


def tsum(a: Tensor, axis=None) -> Tensor:
    return reduce("sum", a, axis)


def mean(a: Tensor, axis=None) -> Tensor:
    return reduce("mean", a, axis)


def tmax(a: Tensor, axis=None) -> Tensor:
    return reduce("max", a, axis)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def _back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return custom_op(y, (a,), _back, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def _back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return custom_op(y, (a,), _back, "log_softmax")


def l2_norm(a: Tensor, axis: int = -1) -> Tensor:
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))

    def _back(g):
        safe = np.where(n > L2_EPS, n, 1.0)
        unit = np.where(n > L2_EPS, a.data / safe, 0.0)
        return (np.expand_dims(g, axis) * unit,)

    return custom_op(np.squeeze(n, axis=axis), (a,), _back, "l2_norm")


# -- structural ------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.data.ndim)))
    inv = tuple(np.argsort(axes))
    return custom_op(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                     lambda g: (g.transpose(inv),), "transpose")


# -- backward --------------------------------------------------------------

class Tape:
    """Operation record for one backward pass, in reverse topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
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
                if id(p) not in seen:
                    stack.append((p, False))
        order.reverse()
        return cls(order)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every requires_grad ancestor."""
    if loss.size != 1:
        raise ValueError("backward requires a scalar loss")
    if loss._consumed:
        raise RuntimeError("backward already ran on this graph; rebuild it first")
    tape = Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in tape:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient at {node.op} node")
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if pg.shape != parent.shape:
                raise RuntimeError(f"{node.op}: gradient shape {pg.shape} != {parent.shape}")
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in tape:
        if node._backward is not None:
            node._consumed = True
    return tape
