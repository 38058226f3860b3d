"""Dense tensor primitives with reverse-mode differentiation.

A deliberately small engine: a `Tensor` wraps a contiguous numpy array
(f32 or f64), records the ops applied to it, and `backward` replays the
tape in reverse. Only the handful of primitives the encoder and loss need
are provided; there is no general graph machinery beyond that.

Every op output is checked for NaN/Inf at the boundary and raises
`NonFiniteValue` instead of letting bad values propagate.
"""

from __future__ import annotations

import math
from typing import Callable, Iterator

import numpy as np
from scipy.special import erf as _erf

from .errors import (
    GraphReuse,
    NondeterministicFunction,
    NonFiniteValue,
    ShapeMismatch,
)

__all__ = [
    "Tensor",
    "ParamSet",
    "tensor",
    "matmul",
    "softmax_lastdim",
    "layer_norm",
    "gelu",
    "geglu_ffn",
    "attention",
    "concat",
    "stack",
    "backward",
    "grad_check",
]

_ALLOWED_DTYPES = (np.float32, np.float64)


def _check_finite(arr: np.ndarray) -> np.ndarray:
    # single-pass reduction first: any NaN/Inf makes the sum non-finite; the
    # full elementwise scan only runs to rule out pure overflow of the sum
    if not math.isfinite(float(arr.sum())) and not np.all(np.isfinite(arr)):
        raise NonFiniteValue("non-finite value crossed an operation boundary")
    return arr


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape its operand had before broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """A numpy array plus the tape entry that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        arr = np.asarray(data)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float64)
        self.data = _check_finite(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._vjp = _vjp if self.requires_grad else None
        self._consumed = False

    # -- bookkeeping ------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"

    # -- elementwise arithmetic -------------------------------------------
    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        out_data = self.data + other.data
        return Tensor(
            out_data,
            _parents=(self, other),
            _vjp=lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.data, _parents=(self,), _vjp=lambda g: (-g,))

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        other = self._coerce(other)
        return Tensor(
            self.data * other.data,
            _parents=(self, other),
            _vjp=lambda g: (
                _unbroadcast(g * other.data, self.shape),
                _unbroadcast(g * self.data, other.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        inv = 1.0 / other.data
        return Tensor(
            self.data * inv,
            _parents=(self, other),
            _vjp=lambda g: (
                _unbroadcast(g * inv, self.shape),
                _unbroadcast(-g * self.data * inv * inv, other.shape),
            ),
        )

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, exponent: float):
        e = float(exponent)
        return Tensor(
            self.data**e,
            _parents=(self,),
            _vjp=lambda g: (g * e * self.data ** (e - 1.0),),
        )

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops --------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.shape
        return Tensor(
            self.data.reshape(shape),
            _parents=(self,),
            _vjp=lambda g: (g.reshape(orig),),
        )

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        return Tensor(
            self.data.transpose(axes),
            _parents=(self,),
            _vjp=lambda g: (g.transpose(inv),),
        )

    def swapaxes(self, a: int, b: int):
        return Tensor(
            self.data.swapaxes(a, b),
            _parents=(self,),
            _vjp=lambda g: (g.swapaxes(a, b),),
        )

    def __getitem__(self, idx):
        out = self.data[idx]

        def vjp(g):
            gx = np.zeros_like(self.data)
            np.add.at(gx, idx, g)
            return (gx,)

        return Tensor(out, _parents=(self,), _vjp=vjp)

    # -- reductions -------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.shape).astype(self.dtype, copy=False),)

        return Tensor(out, _parents=(self,), _vjp=vjp)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise functions --------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return Tensor(out, _parents=(self,), _vjp=lambda g: (g * out,))

    def log(self):
        return Tensor(
            np.log(self.data), _parents=(self,), _vjp=lambda g: (g / self.data,)
        )

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor(out, _parents=(self,), _vjp=lambda g: (g * 0.5 / out,))

    def sin(self):
        return Tensor(
            np.sin(self.data),
            _parents=(self,),
            _vjp=lambda g: (g * np.cos(self.data),),
        )

    def cos(self):
        return Tensor(
            np.cos(self.data),
            _parents=(self,),
            _vjp=lambda g: (-g * np.sin(self.data),),
        )

    def erf(self):
        c = 2.0 / math.sqrt(math.pi)
        return Tensor(
            _erf(self.data),
            _parents=(self,),
            _vjp=lambda g: (g * c * np.exp(-self.data * self.data),),
        )

    # -- backward ---------------------------------------------------------
    def backward(self) -> None:
        """Reverse-mode sweep from this scalar; grads accumulate into leaves.

        A second sweep from the same node raises `GraphReuse`.
        """
        if self.data.size != 1:
            raise ShapeMismatch("backward requires a scalar loss")
        if self._consumed:
            raise GraphReuse("backward already called on this graph")
        self._consumed = True

        order: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(self, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for parent in node._parents:
                stack_.append((parent, False))

        grads: dict[int, np.ndarray] = {
            id(self): np.ones_like(self.data)
        }
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                # leaf parameter
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
    if arr.dtype not in _ALLOWED_DTYPES:
        arr = arr.astype(np.float64)
    return Tensor(arr, requires_grad=requires_grad)


# -- composite primitives --------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with broadcasting over leading dimensions."""
    if not isinstance(a, Tensor):
        a = tensor(a)
    if not isinstance(b, Tensor):
        b = tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul operands must have >= 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"inner dimensions disagree: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None

    def vjp(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last dimension."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return Tensor(y, _parents=(x,), _vjp=vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last dimension, then affine scale/shift."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        ggamma = _unbroadcast((g * xhat).astype(gamma.dtype), gamma.shape)
        gbeta = _unbroadcast(g.astype(beta.dtype), beta.shape)
        gy = g * gamma.data
        gx = inv * (
            gy
            - gy.mean(axis=-1, keepdims=True)
            - xhat * (gy * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return Tensor(out, _parents=(x, gamma, beta), _vjp=vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU (erf form)."""
    xd = x.data
    cdf = 0.5 * (1.0 + _erf(xd * (1.0 / math.sqrt(2.0))))
    pdf = np.exp(-0.5 * xd * xd) * (1.0 / math.sqrt(2.0 * math.pi))
    return Tensor(xd * cdf, _parents=(x,), _vjp=lambda g: (g * (cdf + xd * pdf),))


def geglu_ffn(
    x: Tensor,
    w_a: Tensor,
    b_a: Tensor,
    w_b: Tensor,
    b_b: Tensor,
    w_out: Tensor,
    b_out: Tensor,
) -> Tensor:
    """Gated feed-forward block: GELU(x Wa + ba) * (x Wb + bb), projected back."""
    gate = gelu(matmul(x, w_a) + b_a)
    value = matmul(x, w_b) + b_b
    return matmul(gate * value, w_out) + b_out


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention per head; full bidirectional, no mask."""
    d = q.shape[-1]
    if d < 2 or d % 2 != 0:
        raise ShapeMismatch(f"head dimension must be even and >= 2, got {d}")
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch(f"attention shapes disagree: {q.shape} {k.shape} {v.shape}")
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d))
    weights = softmax_lastdim(scores)
    return matmul(weights, v)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(out, _parents=tuple(tensors), _vjp=vjp)


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0)[i] for i in range(len(tensors)))

    return Tensor(out, _parents=tuple(tensors), _vjp=vjp)


# -- the differentiation contract -----------------------------------------


class ParamSet:
    """Named parameter arrays with parallel gradients.

    Iteration order is deterministic (lexicographic by name) so optimizer
    updates and serialization never depend on insertion order.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name: {name}")
        t = tensor(np.array(array, copy=True), requires_grad=True)
        t.grad = np.zeros_like(t.data)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._tensors[name]

    def zero_grad(self) -> None:
        for _, t in self.items():
            t.grad = np.zeros_like(t.data)

    def n_entries(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self.items():
            out.add(name, t.data)
        return out

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet()
        for name, t in self.items():
            out.add(name, t.data.astype(dtype))
        return out


def backward(loss: Tensor, params: ParamSet) -> None:
    """Populate every parameter's gradient slot from a scalar loss."""
    loss.backward()
    for _, t in params.items():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)


def grad_check(
    f: Callable[[ParamSet], Tensor], params: ParamSet, step: float = 1e-4
) -> float:
    """Max relative error between analytic gradients and central differences.

    `f` must be deterministic; two baseline evaluations are compared and a
    mismatch raises `NondeterministicFunction`. The finite-difference step
    is scaled per entry as step * max(1, |theta|). The relative-error
    denominator is floored at 1e-6: below that scale a central difference
    is dominated by floating-point cancellation noise (~eps*|f|/h), so a
    tighter floor would measure the probe, not the gradient.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    v1 = f(params).item()
    v2 = f(params).item()
    if v1 != v2:
        raise NondeterministicFunction(
            f"two evaluations at identical params differ: {v1} vs {v2}"
        )

    params.zero_grad()
    loss = f(params)
    backward(loss, params)
    analytic = {name: t.grad.copy() for name, t in params.items()}

    max_rel = 0.0
    for name, t in params.items():
        theta = t.data
        flat = theta.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = step * max(1.0, abs(float(orig)))
            flat[i] = orig + h
            fp = f(params).item()
            flat[i] = orig - h
            fm = f(params).item()
            flat[i] = orig
            diff = (fp - fm) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[i])
            denom = max(abs(a), abs(diff), 1e-6)
            max_rel = max(max_rel, abs(a - diff) / denom)
    return max_rel
