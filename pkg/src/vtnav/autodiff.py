"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

Every operation records a backward closure on the output tensor; calling
``backward()`` on a scalar walks the recorded graph in reverse topological
order and accumulates gradients into the leaves. The graph is freed after
backward by default (episodic workloads, bounded memory).

Broadcasting is deliberately restricted: an elementwise op accepts equal
shapes, a trailing vector ``(N,)``, a row vector ``(1, N)``, or a scalar on
the right-hand side. Nothing else.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_state = threading.local()


def _default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.float32)


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def precision(mode: str):
    """Switch the default float width ("float32" or "float64").

    Training runs in float32; gradient checks need float64 to be reliable.
    """
    if mode not in ("float32", "float64"):
        raise ValueError(f"unknown precision mode {mode!r}")
    prev = _default_dtype()
    _state.dtype = np.dtype(mode)
    try:
        yield
    finally:
        _state.dtype = prev


@contextmanager
def no_grad():
    """Disable taping inside the block (pure inference, no graph)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(FloatingPointError):
    """A value or gradient stopped being finite (NaN/Inf)."""


class Tensor:
    """Dense float tensor with an optional gradient and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _default_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def assert_finite(self, what: str = "tensor") -> None:
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"{what} contains NaN/Inf")

    def _accumulate(self, g: np.ndarray) -> None:
        # always copy on first touch: pass-through backwards (add, reshape,
        # transpose) may hand the same buffer to several parents
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, free_graph: bool = True) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.shape != ():
            raise ShapeError("backward() requires a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self.grad = np.ones((), dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if free_graph:
                node._parents = ()
                node._backward = None

    # operator sugar; the module-level functions are the primary API
    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else Tensor(other, dtype=self.dtype))

    def __sub__(self, other):
        return sub(self, other if isinstance(other, Tensor) else Tensor(other, dtype=self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad and _grad_enabled():
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    """Allow equal shapes, trailing (N,), row (1, N), or scalar b; nothing else."""
    if a.shape == b.shape:
        return
    if b.shape == ():
        return
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    if b.ndim == 2 and b.shape[0] == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[1]:
        return
    raise ShapeError(f"broadcast not supported: {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient g down to `shape` (undo the restricted broadcast)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    data = a.data + b.data

    def back(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b.shape))

    return _make(data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    data = a.data - b.data

    def back(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_reduce_to(g, b.shape))

    return _make(data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    data = a.data * b.data

    def back(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b.shape))

    return _make(data, (a, b), back)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    data = x.data * np.asarray(s, dtype=x.dtype)

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g * np.asarray(s, dtype=g.dtype))

    return _make(data, (x,), back)


def add_scalar(x: Tensor, c: float) -> Tensor:
    data = x.data + np.asarray(float(c), dtype=x.dtype)

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g)

    return _make(data, (x,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2D x 2D, batched x 2D, or batched x batched (equal batch dims)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"batch dimensions disagree: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.ndim == 2:
        raise ShapeError(f"2-d @ batched is not supported: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def back(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                n = g.shape[-1]
                gb = np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, n))
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(gb)

    return _make(data, (a, b), back)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g * (x.data > 0))

    return _make(data, (x,), back)


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g * (1.0 - data * data))

    return _make(data, (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-x.data))

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g * data * (1.0 - data))

    return _make(data, (x,), back)


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g / x.data)

    return _make(data, (x,), back)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            dot = (g * data).sum(axis=-1, keepdims=True)
            x._accumulate(data * (g - dot))

    return _make(data, (x,), back)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-d logits, got {logits.shape}")
    idx = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, k = logits.shape
    if idx.shape[0] != b:
        raise ShapeError(f"label count {idx.shape[0]} != batch {b}")
    if idx.min() < 0 or idx.max() >= k:
        raise IndexError(f"label out of range [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    nll = -(shifted[np.arange(b), idx] - np.log(e.sum(axis=1)))
    data = np.asarray(nll.mean(), dtype=logits.dtype)

    def back(g: np.ndarray) -> None:
        if logits.requires_grad:
            d = p.copy()
            d[np.arange(b), idx] -= 1.0
            logits._accumulate(d * (g / b))

    return _make(data, (logits,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply per-channel gain and bias."""
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm params must be ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def back(g: np.ndarray) -> None:
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (dxhat - m1 - xhat * m2))

    return _make(data, (x, gain, bias), back)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = list(tensors)
    data = np.concatenate([t.data for t in parts], axis=axis)
    sizes = [t.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g: np.ndarray) -> None:
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(data, parts, back)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g.reshape(x.shape))

    return _make(data, (x,), back)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    data = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(np.transpose(g, inverse))

    return _make(data, (x,), back)


def _reduce(x: Tensor, axis, op: str) -> Tensor:
    if axis is None:
        data = x.data.sum() if op == "sum" else x.data.mean()
        count = x.data.size

        def back(g: np.ndarray) -> None:
            if x.requires_grad:
                factor = g if op == "sum" else g / count
                x._accumulate(np.broadcast_to(factor, x.shape).astype(g.dtype, copy=True))

        return _make(np.asarray(data, dtype=x.dtype), (x,), back)

    ax = axis if axis >= 0 else x.ndim + axis
    data = x.data.sum(axis=ax) if op == "sum" else x.data.mean(axis=ax)
    count = x.shape[ax]

    def back(g: np.ndarray) -> None:
        if x.requires_grad:
            ge = np.expand_dims(g, ax)
            factor = ge if op == "sum" else ge / count
            x._accumulate(np.broadcast_to(factor, x.shape).astype(g.dtype, copy=True))

    return _make(data, (x,), back)


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    return _reduce(x, axis, "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    return _reduce(x, axis, "mean")


def take_rows(table: Tensor, indices) -> Tensor:
    """Row lookup (embedding): out[i] = table[indices[i]]."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row index out of range [0, {table.shape[0]})")
    data = table.data[idx]

    def back(g: np.ndarray) -> None:
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, idx, g)
            table._accumulate(acc)

    return _make(data, (table,), back)


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), the initialization used everywhere."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(_default_dtype())


class Adam:
    """Adam with bias correction over a named parameter dict.

    `lr_overrides` maps name prefixes to learning rates, longest prefix wins;
    used for the two-rate fine-tuning regime (representation vs policy).
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        lr_overrides: dict[str, float] | None = None,
    ):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.lr_overrides = dict(lr_overrides or {})
        self.state: dict[str, dict] = {
            name: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            for name, p in params.items()
        }

    def _lr_for(self, name: str) -> float:
        best = None
        for prefix, lr in self.lr_overrides.items():
            if name.startswith(prefix) and (best is None or len(prefix) > len(best)):
                best = prefix
        return self.lr_overrides[best] if best is not None else self.lr

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
            st = self.state[name]
            adam_update(p.data, p.grad, st, self._lr_for(name), self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def adam_update(
    param: np.ndarray,
    grad: np.ndarray,
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place bias-corrected Adam step on a single parameter array."""
    state["t"] += 1
    t = state["t"]
    m, v = state["m"], state["v"]
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    param -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(param.dtype, copy=False)
