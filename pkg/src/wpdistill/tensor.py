"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable operation records a node holding its inputs and a
local gradient rule. ``backward`` collects the nodes reachable from a
scalar loss into a :class:`Tape`, orders them by creation sequence (which
is a topological order, since inputs always exist before their outputs)
and visits each one exactly once in reverse.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DTYPE = np.float64

_seq = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Node:
    __slots__ = ("op", "inputs", "rule", "seq")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], rule: Callable):
        self.op = op
        self.inputs = inputs
        self.rule = rule
        self.seq = next(_seq)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "__weakref__")

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != DTYPE:
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._node: Node | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def op(self) -> str | None:
        return None if self._node is None else self._node.op

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    # -- operator sugar ---------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


def _result(data: np.ndarray, op: str, inputs: tuple[Tensor, ...], rule: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, inputs, rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- tape ----------------------------------------------------------------
class Tape:
    """Ordered record of the operations that produced ``output``."""

    def __init__(self, output: Tensor):
        self.output = output
        nodes: dict[int, Tensor] = {}
        stack = [output]
        while stack:
            t = stack.pop()
            if t._node is None or id(t) in nodes:
                continue
            nodes[id(t)] = t
            stack.extend(t._node.inputs)
        self.ops = sorted(nodes.values(), key=lambda t: t._node.seq)

    def __len__(self) -> int:
        return len(self.ops)

    def __iter__(self):
        return iter(self.ops)


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dT into ``.grad`` of every reachable tensor that requires grad."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    tape = Tape(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.ops):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        t.grad = g if t.grad is None else t.grad + g
        node = t._node
        for inp, gi in zip(node.inputs, node.rule(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            elif id(inp) in pending:
                pending[id(inp)] = pending[id(inp)] + gi
            else:
                pending[id(inp)] = gi


# -- elementwise ---------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, "add", (a, b),
                   lambda g: (_unbroadcast(g, sa) if a.requires_grad else None,
                              _unbroadcast(g, sb) if b.requires_grad else None))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, sa) if a.requires_grad else None,
                              _unbroadcast(-g, sb) if b.requires_grad else None))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, "mul", (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                              _unbroadcast(g * ad, bd.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad / bd, "div", (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                              _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return _result(ad ** exponent, "pow", (a,),
                   lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, "exp", (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), "log", (a,), lambda g: (g / ad,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    th = x2 * 0.044715
    th += 1.0
    th *= x
    th *= _GELU_C
    np.tanh(th, out=th)
    y = th + 1.0
    y *= x
    y *= 0.5

    def rule(g):
        # d/dx = 0.5(1 + th) + 0.5 x (1 - th^2) c (1 + 3k x^2)
        d = x2 * (3 * 0.044715)
        d += 1.0
        d *= _GELU_C * 0.5
        d *= x
        d *= 1.0 - th * th
        d += 0.5
        d += 0.5 * th
        d *= g
        return (d,)

    return _result(y, "gelu", (a,), rule)


# -- reductions / shape --------------------------------------------------
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,), rule)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back to the source."""
    shape = a.shape

    def rule(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, index, g)
        return (out,)

    return _result(a.data[index], "getitem", (a,), rule)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids)
    shape = table.shape

    def rule(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (out,)

    return _result(table.data[ids], "take_rows", (table,), rule)


# -- linear algebra ------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return (ga, gb)

    return _result(ad @ bd, "matmul", (a, b), rule)


# -- normalizations ------------------------------------------------------
def _check_finite(x: np.ndarray, op: str) -> None:
    if np.isnan(x).any():
        raise NumericError(f"{op}: NaN in input")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    _check_finite(d, "log_softmax")
    shifted = d - d.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def rule(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, "log_softmax", (x,), rule)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    _check_finite(d, "softmax")
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, "softmax", (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise DimensionError(
            f"layer_norm width mismatch: input {x.shape}, gain {gain.shape}, bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def rule(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return (gx, (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return _result(xhat * gd + bias.data, "layer_norm", (x, gain, bias), rule)


# -- gradient checking ---------------------------------------------------
def finite_diff_check(
    f: Callable,
    x: Tensor | Sequence[Tensor],
    step: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` is called with ``x`` and must return a scalar Tensor. ``x`` may be a
    single tensor or a list of tensors that ``f`` closes over (e.g. model
    parameters). ``max_coords`` samples that many coordinates per tensor.
    """
    tensors = [x] if isinstance(x, Tensor) else list(x)
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    out = f(x)
    backward(out)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    worst = 0.0
    with no_grad():
        for t, ga in zip(tensors, analytic):
            if not t.data.flags.c_contiguous:
                t.data = np.ascontiguousarray(t.data)
            flat = t.data.reshape(-1)
            coords: Iterable[int] = range(flat.size)
            if max_coords is not None and flat.size > max_coords:
                gen = rng if rng is not None else np.random.default_rng(0)
                coords = gen.choice(flat.size, size=max_coords, replace=False)
            gflat = ga.reshape(-1)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + step
                fp = f(x).item()
                flat[i] = orig - step
                fm = f(x).item()
                flat[i] = orig
                numeric = (fp - fm) / (2 * step)
                err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
                worst = max(worst, err)
    return worst
