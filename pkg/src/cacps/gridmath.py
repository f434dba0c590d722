"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation appends a node to the active :class:`Tape`
when any of its inputs requires a gradient.  :func:`backward` replays the
tape in reverse, populating ``grad`` on the leaf tensors, then clears it.

Only what the segmentation network and its losses need is provided:
elementwise arithmetic (scalar broadcasting only), same-padded stride-1
convolution, 2x average pooling / nearest upsampling, a channel softmax,
sum/mean reductions and batch gathering.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CacpsError

# floor applied to log arguments and division denominators
EPS = 1e-8

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_leaf")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def sum(self, axes=None) -> "Tensor":
        return reduce(self, "sum", axes)

    def mean(self, axes=None) -> "Tensor":
        return reduce(self, "mean", axes)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def relu(self) -> "Tensor":
        return relu(self)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered record of the differentiable operations executed so far."""

    nodes: list[_Node] = field(default_factory=list)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn) -> None:
        self.nodes.append(_Node(out, inputs, backward))

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def use_tape(tape: Tape) -> Iterator[Tape]:
    """Record onto ``tape`` instead of the thread's default tape."""
    prev = current_tape()
    _local.tape = tape
    try:
        yield tape
    finally:
        _local.tape = prev


@contextmanager
def no_grad() -> Iterator[None]:
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    out = Tensor(data)
    out._leaf = False
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        current_tape().record(out, inputs, backward)
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``grad`` of every requires-grad leaf reachable from ``loss``.

    Leaves that appear on the tape but receive no gradient (for instance
    behind :func:`stop_gradient`) end up with an all-zero ``grad``.  The
    tape is cleared afterwards.
    """
    tape = current_tape() if tape is None else tape
    if loss.size != 1:
        raise CacpsError("non-scalar", f"loss has shape {loss.shape}")
    try:
        for node in tape.nodes:
            for t in node.inputs:
                if t._leaf and t.requires_grad:
                    t.grad = np.zeros_like(t.data)
        if loss._leaf:
            if loss.requires_grad:
                loss.grad = np.ones_like(loss.data)
            return
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(tape.nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._leaf:
                    t.grad += gi
                else:
                    key = id(t)
                    pending[key] = pending[key] + gi if key in pending else gi
    finally:
        tape.clear()


def stop_gradient(x: Tensor) -> Tensor:
    """Same values, treated as a constant by :func:`backward`."""
    out = Tensor(x.data)
    out._leaf = False
    if grad_enabled() and x.requires_grad:
        # registers x with the tape so it receives a zero gradient
        current_tape().record(out, (x,), lambda g: (None,))
    return out


# --- elementwise ----------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise CacpsError("shape", f"operand shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair(a, b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair(a, b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair(a, b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    """``a / max(b, EPS)``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair(a, b)
    denom = np.maximum(b.data, EPS)
    live = b.data > EPS

    def _back(g):
        ga = _unbroadcast(g / denom, a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(np.where(live, -g * a.data / denom**2, 0.0), b.shape)
        return ga, gb

    return _result(a.data / denom, (a, b), _back)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    """``log(max(a, EPS))``."""
    a = _as_tensor(a)
    clamped = np.maximum(a.data, EPS)
    live = a.data > EPS
    return _result(np.log(clamped), (a,), lambda g: (np.where(live, g / clamped, 0.0),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    live = a.data > 0
    return _result(np.where(live, a.data, 0.0), (a,), lambda g: (g * live,))


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}
_UNARY = {"exp": exp, "log": log, "neg": neg, "relu": relu}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, div (binary); exp, log, neg, relu (unary)."""
    if kind in _BINARY:
        if b is None:
            raise CacpsError("unsupported", f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise CacpsError("unsupported", f"unknown elementwise op {kind!r}")


# --- convolution ----------------------------------------------------------


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (C*k*k, N*H*W) patch matrix with zero padding."""
    n, c, h, w = x.shape
    if k == 1:
        return x.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * h * w)


def _conv_raw(x: np.ndarray, kernel: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
    n, _, h, w = x.shape
    o, _, k, _ = kernel.shape
    if cols is None:
        cols = _im2col(x, k)
    out = kernel.reshape(o, -1) @ cols
    return out.reshape(o, n, h, w).transpose(1, 0, 2, 3)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Zero-padded, stride-1 cross-correlation; output keeps the input's H, W."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise CacpsError("shape", "conv2d expects (N,C,H,W) input and (O,C,k,k) kernel")
    n, c, h, w = x.shape
    o, ck, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise CacpsError("kernel-size", f"kernel must be square and odd, got {k}x{k2}")
    if ck != c:
        raise CacpsError("shape", f"kernel expects {ck} channels, input has {c}")
    if bias is not None and bias.shape != (o,):
        raise CacpsError("shape", f"bias shape {bias.shape} != ({o},)")

    cols = _im2col(x.data, k)
    out = _conv_raw(x.data, kernel.data, cols)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def _back(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx = _conv_raw(g, np.ascontiguousarray(flipped))
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=1)

    return _result(out, inputs, _back)


def resample(x: Tensor, direction: str, factor: int = 2) -> Tensor:
    """2x2 average pooling (``"down"``) or nearest-neighbour 2x upsampling (``"up"``)."""
    if factor != 2:
        raise CacpsError("unsupported", "only factor 2 is implemented")
    if x.ndim != 4:
        raise CacpsError("shape", "resample expects (N,C,H,W)")
    n, c, h, w = x.shape
    if direction == "down":
        if h % 2 or w % 2:
            raise CacpsError("shape", f"cannot halve odd spatial dims {h}x{w}")
        out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
        return _result(
            out, (x,), lambda g: (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)
        )
    if direction == "up":
        out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
        return _result(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))
    raise CacpsError("unsupported", f"unknown direction {direction!r}")


# --- softmax / reductions -------------------------------------------------


def softmax_channels(logits: Tensor) -> Tensor:
    """Softmax over axis 1, stabilised by subtracting the per-pixel max."""
    if logits.ndim < 2:
        raise CacpsError("shape", "softmax_channels needs a channel axis")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    return _result(s, (logits,), lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise CacpsError("axis", f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise CacpsError("axis", f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce(x: Tensor, kind: str, axes=None) -> Tensor:
    """Sum or arithmetic mean over ``axes`` (all axes when ``None``)."""
    axes_t = _norm_axes(axes, x.ndim)
    if kind == "sum":
        scale = 1.0
        out = x.data.sum(axis=axes_t)
    elif kind == "mean":
        count = int(np.prod([x.shape[a] for a in axes_t])) if axes_t else 1
        scale = 1.0 / count
        out = x.data.mean(axis=axes_t)
    else:
        raise CacpsError("unsupported", f"unknown reduction {kind!r}")

    def _back(g):
        g = np.expand_dims(g, axes_t) if axes_t else g
        return (np.broadcast_to(g * scale, x.shape),)

    return _result(np.asarray(out), (x,), _back)


def take(x: Tensor, indices) -> Tensor:
    """Gather rows of the leading (batch) axis."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise CacpsError("shape", "take expects a 1-d index list")
    if idx.size and (idx.min() < -x.shape[0] or idx.max() >= x.shape[0]):
        raise CacpsError("axis", f"index out of range for batch of {x.shape[0]}")

    def _back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(x.data[idx], (x,), _back)
