"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input tracks gradients. Outside a tape every operation is a plain
numpy computation, which is what inference uses.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * Tensor([3.0, 4.0])).sum()
    >>> tape.backward(loss)[w]
    array([3., 4.])
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "backward",
    "add",
    "sub",
    "mul",
    "matmul",
    "ew_and_matmul",
    "activations",
    "sigmoid",
    "tanh",
    "relu",
    "gelu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "linear",
    "concat",
    "stack",
    "dropout",
    "pick",
]


class ShapeError(ValueError):
    pass


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nested tapes shadow outer ones.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], vjp: Callable) -> None:
        self.nodes.append((out, inputs, vjp))
        self._produced.add(id(out))

    def backward(self, loss: "Tensor") -> dict["Tensor", np.ndarray]:
        """Return gradients of ``loss`` for every leaf tensor that tracks them.

        Leaves are tensors created with ``requires_grad=True`` rather than
        produced by a recorded operation. Leaves the loss does not depend on are
        absent from the result.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ValueError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, vjp in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = vjp(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in self._produced:
                    leaves[key] = t
        return {t: grads[k] for k, t in leaves.items() if k in grads}


def backward(loss: "Tensor", tape: Tape) -> dict["Tensor", np.ndarray]:
    return tape.backward(loss)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """Immutable n-dimensional array that may take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators ------------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return _unary(self, -self.data, lambda g: (-g,))

    def __getitem__(self, idx):
        out = self.data[idx]
        shape, dtype = self.shape, self.dtype

        def vjp(g):
            full = np.zeros(shape, dtype=dtype)
            full[idx] = g
            return (full,)

        return _unary(self, out, vjp)

    # -- shape manipulation --------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _unary(self, self.data.reshape(shape), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return _unary(self, self.data.transpose(axes), lambda g: (g.transpose(inv),))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def flip(self, axis: int) -> "Tensor":
        return _unary(self, np.flip(self.data, axis), lambda g: (np.flip(g, axis),))

    # -- reductions -----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _unary(self, out, vjp)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = math.prod(self.shape[a] for a in axes)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise math ----------------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return _unary(self, out, lambda g: (g * out,))

    def log(self) -> "Tensor":
        x = self.data
        return _unary(self, np.log(x), lambda g: (g / x,))


# ----------------------------------------------------------------------
# recording helpers


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(out: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=track, dtype=out.dtype)
    if track:
        tape.record(result, inputs, vjp)
    return result


def _unary(x: Tensor, out: np.ndarray, vjp: Callable) -> Tensor:
    return _make(np.asarray(out), (x,), vjp)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    return g


def _check_trailing(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {sa} and {sb} do not conform")


# ----------------------------------------------------------------------
# binary operations


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_trailing(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_trailing(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_trailing(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return (
            _reduce_to(g * bd, ad.shape) if a.requires_grad else None,
            _reduce_to(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), vjp)


def matmul(a, b) -> Tensor:
    """Matrix product with an optional stack of leading axes on ``a``.

    ``b`` is either a vector, a matrix shared across the stack, or a stack of
    matrices with exactly the same leading axes as ``a``.
    """
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if bd.ndim > 2 and bd.shape[:-2] != ad.shape[:-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = ad @ bd

    def vjp(g):
        ga = gb = None
        if ad.ndim == 1 and bd.ndim == 1:
            ga, gb = g * bd, g * ad
        elif bd.ndim == 1:
            if a.requires_grad:
                ga = g[..., None] * bd
            if b.requires_grad:
                gb = (ad * g[..., None]).reshape(-1, bd.shape[0]).sum(axis=0)
        elif ad.ndim == 1:
            if a.requires_grad:
                ga = bd @ g
            if b.requires_grad:
                gb = np.outer(ad, g)
        elif bd.ndim == 2:
            if a.requires_grad:
                ga = g @ bd.T
            if b.requires_grad:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            if a.requires_grad:
                ga = g @ np.swapaxes(bd, -1, -2)
            if b.requires_grad:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), vjp)


def ew_and_matmul(a, b, kind: str) -> Tensor:
    try:
        fn = {"add": add, "mul": mul, "matmul": matmul}[kind]
    except KeyError:
        raise ValueError(f"unknown kind {kind!r}") from None
    return fn(a, b)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis; ``weight`` is stored (out, in)."""
    y = matmul(x, weight.transpose())
    return y if bias is None else add(y, bias)


# ----------------------------------------------------------------------
# activations


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    return _unary(x, out, lambda g: (g * out * (1 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _unary(x, out, lambda g: (g * (1 - out * out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _unary(x, np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = (xd * cdf).astype(xd.dtype)

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(xd.dtype),)

    return _unary(x, out, vjp)


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _unary(x, out, vjp)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _unary(x, out, vjp)


_ACTIVATIONS = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "gelu": gelu,
    "softmax": softmax,
    "log_softmax": log_softmax,
}


def activations(x: Tensor, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


# ----------------------------------------------------------------------
# normalization and structural ops


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply the per-channel affine map."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: shapes {x.shape} and {gamma.shape}/{beta.shape} do not conform")
    xd, gd = x.data, gamma.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gd + beta.data

    def vjp(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, c).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, c).sum(axis=0)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]}: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, vjp)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(out, tensors, vjp)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. A ``None`` generator or zero rate is the identity."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep))


def pick(x: Tensor, index: np.ndarray) -> Tensor:
    """Select ``x[i, index[i]]`` for each row of a 2-D tensor."""
    index = np.asarray(index)
    rows = np.arange(x.shape[0])
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        full[rows, index] = g
        return (full,)

    return _unary(x, x.data[rows, index], vjp)
