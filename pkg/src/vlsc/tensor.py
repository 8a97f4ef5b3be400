"""Minimal float64 tensor with reverse-mode autodiff.

Every value is a dense numpy array in row-major order. Ops record their
parents and a backward closure; ``Tensor.backward()`` runs a topological
sweep and accumulates gradients into every reachable tensor that has
``requires_grad`` set. The op set is deliberately small: matmul, reshape,
transpose, concat, slicing/gather, elementwise arithmetic, exp/log/sqrt,
softmax/log-softmax, reductions, layer norm, GELU, embedding lookup,
cosine similarity, cross-entropy, plus detach and clip. Everything else
in the package is composed from these.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import NumericError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Dense multi-dimensional float64 array participating in autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward_fn = None

    # -- construction ----------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: tuple, backward_fn) -> "Tensor":
        out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
        if out.requires_grad:
            out._parents = parents
            out._backward_fn = backward_fn
        return out

    # -- basic properties ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 \
            else float(self.data)  # raises for size > 1, as it should

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff --------------------------------------------------------

    def detach(self) -> "Tensor":
        """A view of the same data cut out of the graph; backward through
        it accumulates nothing into its producers."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.size != 1:
                raise ShapeError("backward() without an explicit gradient "
                                 "requires a scalar tensor")
            grad = np.ones_like(self.data)
        else:
            grad = _as_array(grad)
            if grad.shape != self.shape:
                raise ShapeError("gradient shape mismatch in backward()")
        if not self.requires_grad:
            return

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(topo):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward_fn is None:
                continue
            parent_grads = node._backward_fn(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in pending:
                    pending[id(p)] = pending[id(p)] + pg
                else:
                    pending[id(p)] = pg

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        out = self.data + other.data

        def back(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)

        return Tensor._from_op(out, (self, other), back)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        return self + (-as_tensor(other))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        out = self.data * other.data

        def back(g):
            return (_unbroadcast(g * other.data, self.shape),
                    _unbroadcast(g * self.data, other.shape))

        return Tensor._from_op(out, (self, other), back)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        out = self.data / other.data

        def back(g):
            return (_unbroadcast(g / other.data, self.shape),
                    _unbroadcast(-g * self.data / (other.data ** 2), other.shape))

        return Tensor._from_op(out, (self, other), back)

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, p) -> "Tensor":
        if not isinstance(p, (int, float)):
            raise ShapeError("only scalar exponents are supported")
        out = self.data ** p

        def back(g):
            return (g * p * self.data ** (p - 1),)

        return Tensor._from_op(out, (self,), back)

    # -- linear algebra ----------------------------------------------------

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ShapeError("matmul requires tensors with ndim >= 2")
        if self.shape[-1] != other.shape[-2]:
            raise ShapeError(f"matmul shapes do not conform: "
                             f"{self.shape} @ {other.shape}")
        out = self.data @ other.data

        def back(g):
            ga = g @ np.swapaxes(other.data, -1, -2)
            gb = np.swapaxes(self.data, -1, -2) @ g
            return _unbroadcast(ga, self.shape), _unbroadcast(gb, other.shape)

        return Tensor._from_op(out, (self, other), back)

    def transpose(self, axes: tuple) -> "Tensor":
        inv = tuple(np.argsort(axes))
        out = np.transpose(self.data, axes)

        def back(g):
            return (np.transpose(g, inv),)

        return Tensor._from_op(out, (self,), back)

    def swap_last(self) -> "Tensor":
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(tuple(axes))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        out = self.data.reshape(shape)

        def back(g):
            return (g.reshape(old),)

        return Tensor._from_op(out, (self,), back)

    def __getitem__(self, key) -> "Tensor":
        out = self.data[key]
        shape = self.shape

        def back(g):
            gx = np.zeros(shape, dtype=np.float64)
            np.add.at(gx, key, g)
            return (gx,)

        return Tensor._from_op(np.array(out, dtype=np.float64), (self,), back)

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def back(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._from_op(np.asarray(out, dtype=np.float64), (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for a in ax:
                n *= self.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise functions --------------------------------------------------

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * 0.5 / out,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * phi

    def back(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (phi + x.data * pdf),)

    return Tensor._from_op(out, (x,), back)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with pass-through gradient inside [lo, hi]."""
    out = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)

    def back(g):
        return (g * mask,)

    return Tensor._from_op(out, (x,), back)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; caller decides whether training is active."""
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * Tensor(keep)


# -- softmax family ----------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return Tensor._from_op(y, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    y = np.exp(out)

    def back(g):
        return (g - y * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), back)


# -- structural ops ----------------------------------------------------------

def concat(tensors: list, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(out, tuple(tensors), back)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding ids must be integers")
    out = weight.data[ids]

    def back(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        return (gw,)

    return Tensor._from_op(out, (weight,), back)


# -- composite numeric kernels ------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    xhat = xc / sqrt(var + eps)
    return xhat * gain + bias


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         mask: np.ndarray | None = None,
                         return_weights: bool = False):
    """softmax(q kᵀ / sqrt(d)) v over the last two axes.

    ``mask`` is an additive constant (broadcastable to the score shape);
    use -inf to exclude keys. Attention weights per query row sum to 1.
    """
    if q.ndim < 2 or k.ndim < 2 or v.ndim < 2:
        raise ShapeError("attention operands must have ndim >= 2")
    d = q.shape[-1]
    if d <= 0 or k.shape[-1] != d:
        raise ShapeError(f"query/key width mismatch: {q.shape} vs {k.shape}")
    if v.shape[-2] != k.shape[-2]:
        raise ShapeError(f"key/value length mismatch: {k.shape} vs {v.shape}")
    scores = (q @ k.swap_last()) * (1.0 / math.sqrt(d))
    if mask is not None:
        scores = scores + Tensor(mask)
    weights = softmax(scores, axis=-1)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


def cosine_similarity_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarity between rows of ``a`` (n×d) and ``b`` (m×d)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine similarity needs matching 2-d rows: "
                         f"{a.shape} vs {b.shape}")
    for t in (a, b):
        norms = np.sqrt((t.data ** 2).sum(axis=1))
        if np.any(norms < 1e-12):
            raise NumericError("zero-norm row in cosine similarity")
    an = a * (((a * a).sum(axis=1, keepdims=True) + 0.0) ** -0.5)
    bn = b * (((b * b).sum(axis=1, keepdims=True) + 0.0) ** -0.5)
    return an @ bn.swap_last()


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``targets`` under ``logits`` rows."""
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise ShapeError("cross_entropy expects (n, C) logits and (n,) targets")
    ls = log_softmax(logits, axis=-1)
    picked = ls[(np.arange(targets.shape[0]), targets)]
    return -picked.mean()


# -- parameter containers ------------------------------------------------------

class ParamRegistry:
    """Name -> Tensor map with deterministic iteration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def register(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def total_size(self) -> int:
        return sum(t.size for t in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ShapeError(f"parameter name mismatch: missing={sorted(missing)} "
                             f"extra={sorted(extra)}")
        for name, t in self._params.items():
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != t.data.shape:
                raise ShapeError(f"shape mismatch for {name}: "
                                 f"{a.shape} vs {t.data.shape}")
            t.data = a.copy()


def trunc_normal(shape, rng: np.random.Generator, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with draws beyond 2 std resampled."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out
