"""Minimal dense tensor engine with tape-based reverse-mode differentiation.

Images use the ``[n, c, h, w]`` layout. Every operation is a pure function of
its inputs; when a :class:`Tape` is active and some input requires a gradient
the operation appends a node holding the values its backward pass needs.

    with Tape():
        loss = softmax_cross_entropy(dense(x, w, b), labels)
        backward(loss)
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, InputError, ShapeError, StateError

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "dssprune_active_tape", default=None
)


class Tensor:
    """An n-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: Tape | None = None

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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise InputError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def sum(self) -> "Tensor":
        return tensor_sum(self)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    # maps the output gradient to one gradient (or None) per input
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of executed operations for one training context."""

    nodes: list[_Node] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        out._tape = self
        self.nodes.append(_Node(out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        backward(loss)


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = _ACTIVE_TAPE.get()
    if needs and tape is not None:
        tape.record(out, inputs, vjp)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf."""
    tape = loss._tape
    if tape is None:
        raise StateError("backward() called on a tensor that was not produced under an active Tape")
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            tensors[key] = inp
            grads[key] = grads[key] + gi if key in grads else gi

    # whatever remains was never produced by a recorded op: the leaves
    for key, g in grads.items():
        leaf = tensors[key]
        if leaf._tape is not None:
            continue
        g = g.astype(leaf.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    for node in tape.nodes:
        node.out._tape = None
    tape.nodes.clear()


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _emit(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, factor: float) -> Tensor:
    return _emit(a.data * a.dtype.type(factor), (a,), lambda g: (g * factor,))


def tensor_sum(a: Tensor) -> Tensor:
    return _emit(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # grad at exactly 0 is 0
    return _emit(np.where(mask, x.data, x.dtype.type(0)), (x,), lambda g: (g * mask,))


def flatten(x: Tensor) -> Tensor:
    """Channel-major flatten ``[n, c, h, w] -> [n, c*h*w]``."""
    shape = x.shape
    return _emit(x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),))


def channel_mask(x: Tensor, keep: np.ndarray) -> Tensor:
    """Zero every channel of ``x`` whose entry in the boolean ``keep`` is False."""
    m = np.asarray(keep, dtype=x.dtype).reshape((1, -1) + (1,) * (x.data.ndim - 2))
    return _emit(x.data * m, (x,), lambda g: (g * m,))


# --------------------------------------------------------------------- layers


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if c != ic:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {ic}")
    if bias.shape != (oc,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {oc} output channels")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    span_h, span_w = h + 2 * padding - kh, w + 2 * padding - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ConfigError(
            f"conv2d: input {h}x{w} with kernel {kh}x{kw}, stride {stride}, padding {padding} "
            "does not give an integral output size"
        )
    oh, ow = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    w2 = weight.data.reshape(oc, -1)
    out = (cols @ w2.T + bias.data).reshape(n, oh, ow, oc).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, oc)
        dw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        db = g2.sum(axis=0) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(n, oh, ow, c, kh, kw)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return dx, dw, db

    return _emit(out, (x, weight, bias), vjp)


def maxpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping ``k x k`` max pooling; ties route the gradient to the first maximum."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects a 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if k < 1 or h % k or w % k:
        raise ConfigError(f"maxpool2d: spatial size {h}x{w} is not divisible by pool size {k}")
    oh, ow = h // k, w // k
    blocks = x.data.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, k * k)
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros((n, c, oh, ow, k * k), dtype=g.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        return (gb.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _emit(out, (x,), vjp)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"dense expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input width {x.shape[1]} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias shape {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T + bias.data

    def vjp(g):
        return (
            g @ weight.data if x.requires_grad else None,
            g.T @ x.data if weight.requires_grad else None,
            g.sum(axis=0) if bias.requires_grad else None,
        )

    return _emit(out, (x, weight, bias), vjp)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be [n, k], got {logits.shape}")
    n, k = logits.shape
    if n < 1 or labels.shape != (n,):
        raise InputError(f"expected {n} labels for logits of shape {logits.shape}, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= k:
        raise InputError(f"labels must be integers in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((lse - z[rows, labels]).mean(), dtype=logits.dtype)

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1
        return (p * (g / n),)

    return _emit(loss, (logits,), vjp)


# ------------------------------------------------------------------ optimizer


class SGD:
    """SGD with heavy-ball momentum: ``v <- m*v + g; p <- p - lr*v``.

    Velocities persist between steps; gradients are cleared after each step.
    """

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.9):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if not 0 <= momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity: list[np.ndarray | None] = [None] * len(self.params)

    def step(self) -> None:
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise StateError(f"parameters {missing} have no gradient; run backward() first")
        for i, p in enumerate(self.params):
            v = self._velocity[i]
            v = p.grad.copy() if v is None else self.momentum * v + p.grad
            self._velocity[i] = v
            p.data -= (self.lr * v).astype(p.dtype, copy=False)
            p.grad = None
