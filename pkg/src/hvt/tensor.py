"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable op records a :class:`Node` on its output. Nodes carry a
global creation sequence number, so the backward pass can walk the recorded
graph in strict reverse creation order without a separate topological sort.
"""

from __future__ import annotations

import itertools
import threading
import weakref
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

_SEQ = itertools.count()
_STATE = threading.local()

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericalError(ArithmeticError):
    """An operation produced NaN or Inf from finite inputs."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


class EvaluationError(RuntimeError):
    """A function under gradient check returned a non-finite value."""


def grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


@dataclass(eq=False)
class Node:
    seq: int
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    out: Callable[[], Optional["Tensor"]] = field(repr=False, default=lambda: None)
    op: str = ""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        return mul(self, 1.0 / other) if np.isscalar(other) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple, backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        out.node = Node(next(_SEQ), inputs, backward_fn, weakref.ref(out), op)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


@dataclass
class Graph:
    """Recorded operations reachable from an output, in creation order."""

    nodes: list

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        seen = {}
        stack = [out.node] if out.node is not None else []
        while stack:
            node = stack.pop()
            if node.seq in seen:
                continue
            seen[node.seq] = node
            for t in node.inputs:
                if t.node is not None and t.node.seq not in seen:
                    stack.append(t.node)
        return cls(sorted(seen.values(), key=lambda n: n.seq))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
        loss.grad = seed if loss.grad is None else loss.grad + seed
        for node in reversed(self.nodes):
            out = node.out()
            if out is None or out.grad is None:
                continue
            for t, g in zip(node.inputs, node.backward(out.grad)):
                if g is None or not t.requires_grad:
                    continue
                t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every ``requires_grad`` ancestor of a scalar loss."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    Graph.from_output(loss).backward(loss)


# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {sa} and {sb}") from exc
    return _result(data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {sa} and {sb}") from exc
    return _result(data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} and {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(data, (a, b), bw, "div")


def matmul(a, b) -> Tensor:
    """Matrix product, batched over leading axes of either operand."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(data, (a, b), bw, "matmul")


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    data = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(data), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {orig} as {tuple(shape)}") from exc
    return _result(data, (x,), lambda g: (g.reshape(orig),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(x.data[index]), (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(data, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(x.data)
    return _result(data, (x,), lambda g: (g * data,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(x.data)
    return _result(data, (x,), lambda g: (g / x.data,), "log")


# nonlinearities and normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result(p, (x,), bw, "softmax")


def softmax_rows(m: Tensor) -> Tensor:
    """Row-wise softmax of a matrix (or a batch of matrices)."""
    return softmax(m, axis=-1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), bw, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf-based normal CDF."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return _result(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),), "gelu")


# windowed gathers along the token axis (-2)
#
# ``windows`` is an int array (n_out, k) of source token indexes, -1 marking
# padded positions.


def _check_windows(x: Tensor, windows: np.ndarray) -> None:
    if x.ndim < 2:
        raise ShapeError(f"window ops need a (..., n, D) input, got {x.shape}")
    if windows.size and windows.max() >= x.shape[-2]:
        raise ShapeError(f"window index {windows.max()} out of range for {x.shape[-2]} tokens")


def _flat_lead(shape: tuple) -> int:
    return int(np.prod(shape[:-2])) if len(shape) > 2 else 1


def window_gather(x: Tensor, windows: np.ndarray) -> Tensor:
    """Gather ``(..., n_out, k, D)`` windows, zero-filling padded slots."""
    windows = np.asarray(windows, dtype=np.int64)
    _check_windows(x, windows)
    valid = windows >= 0
    idx = np.where(valid, windows, 0)
    data = x.data[..., idx, :] * valid[..., None]
    shape = x.shape
    lead = _flat_lead(shape)

    def bw(g):
        full = np.zeros((lead,) + shape[-2:])
        g = (g * valid[..., None]).reshape(lead, -1, shape[-1])
        np.add.at(full, (slice(None), idx.reshape(-1)), g)
        return (full.reshape(shape),)

    return _result(data, (x,), bw, "window_gather")


def window_max(x: Tensor, windows: np.ndarray) -> Tensor:
    """Per-channel max over each window; padded slots never win."""
    windows = np.asarray(windows, dtype=np.int64)
    _check_windows(x, windows)
    valid = windows >= 0
    if not valid.any(axis=1).all():
        raise ContractError("window_max: a window contains only padding")
    idx = np.where(valid, windows, 0)
    vals = np.where(valid[..., None], x.data[..., idx, :], -np.inf)
    slot = vals.argmax(axis=-2)                                  # (..., n_out, D)
    src = idx[np.arange(idx.shape[0])[:, None], slot]            # token index per output
    data = np.take_along_axis(vals, slot[..., None, :], axis=-2)[..., 0, :]
    shape = x.shape
    lead = _flat_lead(shape)

    def bw(g):
        d = shape[-1]
        full = np.zeros((lead,) + shape[-2:])
        np.add.at(full, (np.arange(lead)[:, None, None], src.reshape(lead, -1, d),
                         np.arange(d)[None, None, :]), g.reshape(lead, -1, d))
        return (full.reshape(shape),)

    return _result(np.ascontiguousarray(data), (x,), bw, "window_max")


def window_mean(x: Tensor, windows: np.ndarray) -> Tensor:
    """Per-channel mean over the valid (non-padded) slots of each window."""
    windows = np.asarray(windows, dtype=np.int64)
    counts = (windows >= 0).sum(axis=1)
    if (counts == 0).any():
        raise ContractError("window_mean: a window contains only padding")
    summed = sum_(window_gather(x, windows), axis=-2)
    return mul(summed, (1.0 / counts)[:, None])


# verification


def _evaluate(f, x):
    try:
        return f(x)
    except NumericalError as exc:
        raise EvaluationError(str(exc)) from exc


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Compare ``x``'s analytic gradient against central differences.

    ``f`` is called with ``x`` itself; the numeric pass perturbs ``x.data`` in
    place and restores it, so ``x`` may equally be a model parameter that
    ``f`` reaches through closure.

    Returns:
        max over coordinates of ``|a - n| / max(1, |a|, |n|)``.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ContractError(f"grad_check step {h} outside [1e-6, 1e-4]")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        y = _evaluate(f, x)
    except EvaluationError:
        x.requires_grad = was
        raise
    if y.data.size != 1 or not np.isfinite(y.data).all():
        x.requires_grad = was
        raise EvaluationError("grad_check needs a finite scalar function value")
    backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.requires_grad = was

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            try:
                flat[i] = orig + h
                fp = _evaluate(f, x).data.item()
                flat[i] = orig - h
                fm = _evaluate(f, x).data.item()
            finally:
                flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise EvaluationError(f"non-finite value at coordinate {i}")
            numeric.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    x.grad = None
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0
