"""Dense tensors with a reverse-mode gradient tape and an Adam optimizer.

Operations are plain functions over :class:`Tensor`. When at least one input
requires a gradient and a :class:`GradTape` is active on the current thread,
the operation is appended to that tape together with its vector-Jacobian
product. ``tape.backward(loss)`` replays the records in reverse.

Images and feature maps use NHWC layout throughout.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_local = threading.local()


class ShapeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    """Raised when a kernel produces NaN or Inf from finite inputs."""


class Tensor:
    """An n-dimensional array that may participate in a gradient tape.

    Tensors are not mutated by operations. Optimizers update ``data`` in place.
    Equality and hashing are by identity so tensors can key gradient maps.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self._tape: GradTape | None = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


class GradTape:
    """Ordered record of operations applied to tracked tensors.

    Use as a context manager; only the innermost active tape on a thread
    receives records, so nested or concurrent tapes never share gradients::

        with GradTape() as tape:
            loss = tensor.sum(tensor.square(w))
        grads = tape.backward(loss)
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> GradTape:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of a scalar ``loss`` for every leaf tensor seen on this tape.

        Leaves that do not lie on a path to ``loss`` get exact zeros. The tape
        is cleared afterwards.
        """
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("backward: loss was not recorded on this tape")

        produced = {id(r.out) for r in self.records}
        leaves: dict[int, Tensor] = {}
        for r in self.records:
            for t in r.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves.setdefault(id(t), t)

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for r in reversed(self.records):
            g = grads.pop(id(r.out), None)
            if g is None:
                continue
            for t, gi in zip(r.inputs, r.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                _check_finite(gi, f"{r.name} (backward)")
                if id(t) in grads:
                    grads[id(t)] = grads[id(t)] + gi
                else:
                    grads[id(t)] = gi

        result = {}
        for key, t in leaves.items():
            g = grads.get(key)
            result[t] = np.zeros_like(t.data) if g is None else g.astype(t.dtype, copy=False)
        self.records.clear()
        return result

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        grads = self.backward(loss)
        return [grads.get(s, np.zeros_like(s.data)) for s in sources]


def _stack() -> list[GradTape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Run the backward pass on whichever tape recorded ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._tape is None:
        raise ValueError("backward: loss is not on any gradient tape")
    return loss._tape.backward(loss)


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name}: produced non-finite values")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], vjp, name: str) -> Tensor:
    _check_finite(data, name)
    out = Tensor(data)
    stack = _stack()
    if stack and any(t.requires_grad for t in inputs):
        tape = stack[-1]
        out.requires_grad = True
        out._tape = tape
        tape.records.append(_Record(out, inputs, vjp, name))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def square(x: Tensor) -> Tensor:
    return _result(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _result(out, (x,), lambda g: (g / x.data,), "log")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    # out * (1 - out) rounds to 0 once out == 1.0; this form stays positive
    slope = (e / (1.0 + e) ** 2).astype(x.dtype)
    return _result(out, (x,), lambda g: (g * slope,), "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), vjp, "softmax")


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), vjp, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis), 1.0 / float(n))


def l1_norm(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _result(np.asarray(np.abs(x.data).sum()), (x,), lambda g: (g * sign,), "l1_norm")


def l2_norm(x: Tensor) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum())

    def vjp(g):
        if norm == 0:
            return (np.zeros_like(x.data),)
        return (g * x.data / norm,)

    return _result(np.asarray(norm), (x,), vjp, "l2_norm")


# ---------------------------------------------------------------- structure


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], -1))


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out), (x,), vjp, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    return _result(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T if a.requires_grad else None, a.data.T @ g if b.requires_grad else None),
        "matmul",
    )


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Valid, stride-1 convolution (cross-correlation).

    ``x`` is (N, H, W, Cin) and ``w`` is (kh, kw, Cin, Cout); the result is
    (N, H-kh+1, W-kw+1, Cout).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {w.shape} do not conform")
    kh, kw = w.shape[:2]
    if kh > x.shape[1] or kw > x.shape[2]:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than input {x.shape}")

    n, h, wd, cin = x.shape
    ho, wo = h - kh + 1, wd - kw + 1
    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    # im2col: patch columns ordered (i, j, cin) to match the kernel layout
    cols = np.concatenate([x.data[:, i : i + ho, j : j + wo, :] for i, j in offsets], axis=-1)
    kmat = w.data.reshape(kh * kw * cin, -1)
    out = (cols.reshape(-1, cols.shape[-1]) @ kmat).reshape(n, ho, wo, -1)

    def vjp(g):
        gw = None
        if w.requires_grad:
            gw = (cols.reshape(-1, cols.shape[-1]).T @ g.reshape(-1, g.shape[-1])).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (g.reshape(-1, g.shape[-1]) @ kmat.T).reshape(cols.shape)
            gx = np.zeros_like(x.data)
            for k, (i, j) in enumerate(offsets):
                gx[:, i : i + ho, j : j + wo, :] += gcols[..., k * cin : (k + 1) * cin]
        return gx, gw

    return _result(out, (x, w), vjp, "conv2d")


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max-pool with stride 2 over (N, H, W, C); odd trailing rows/cols are dropped."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: expected (N, H, W, C) input, got {x.shape}")
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeError(f"maxpool2d: input {x.shape} too small to pool")
    blocks = (
        x.data[:, : 2 * h2, : 2 * w2, :]
        .reshape(n, h2, 2, w2, 2, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, h2, w2, c, 4)
    )
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        onehot = np.zeros_like(blocks)
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, : 2 * h2, : 2 * w2, :] = (
            onehot.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
        )
        return (gx,)

    return _result(out, (x,), vjp, "maxpool2d")


# ---------------------------------------------------------------- losses


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer class labels."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape} and labels {labels.shape} do not conform"
        )
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"softmax_cross_entropy: labels outside [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    loss = -logp[np.arange(n), labels].mean()

    def vjp(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return (g * grad / n,)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), vjp, "softmax_cross_entropy")


def cross_entropy(probs: Tensor, onehot) -> Tensor:
    """Mean cross-entropy between probability rows and one-hot targets."""
    onehot = _as_tensor(onehot)
    if probs.shape != onehot.shape:
        raise ShapeError(f"cross_entropy: probs {probs.shape} and targets {onehot.shape} differ")
    n = probs.shape[0] if probs.data.ndim > 1 else 1
    return mul(sum(mul(onehot, log(probs))), -1.0 / n)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def like(cls, param: Tensor, **kwargs) -> AdamState:
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), **kwargs)


def adam_step(state: AdamState, param: Tensor, grad: np.ndarray) -> Tensor:
    """Apply one bias-corrected Adam update to ``param`` in place."""
    grad = np.asarray(grad)
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise ShapeError(
            f"adam_step: param {param.shape}, grad {grad.shape}, moments {state.m.shape} differ"
        )
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    update = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    param.data -= update.astype(param.dtype, copy=False)
    _check_finite(param.data, "adam_step")
    return param


@dataclass
class Adam:
    """Adam over a fixed list of parameters."""

    params: list[Tensor]
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    states: list[AdamState] = field(init=False)

    def __post_init__(self):
        self.states = [
            AdamState.like(p, learning_rate=self.learning_rate, beta1=self.beta1,
                           beta2=self.beta2, epsilon=self.epsilon)
            for p in self.params
        ]

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        for p, s in zip(self.params, self.states):
            adam_step(s, p, grads.get(p, np.zeros_like(p.data)))
