"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every array in the package travels as a :class:`Tensor`. Operations build a
graph on the fly when at least one input requires a gradient; :func:`grad`
walks that graph backwards. :func:`finite_diff_check` and
:func:`gradient_errors` are the central-difference oracles used to validate
the analytic gradients.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "DimensionError",
    "ShapeError",
    "NumericError",
    "Tensor",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "transpose",
    "reshape",
    "stack",
    "concat",
    "tsum",
    "tmean",
    "tmax",
    "exp",
    "log",
    "relu",
    "gelu",
    "sigmoid",
    "softmax_rows",
    "log_softmax",
    "l2_normalize",
    "layer_norm",
    "dropout",
    "grad",
    "no_grad",
    "finite_diff_check",
    "gradient_errors",
]


class DimensionError(ValueError):
    """Operand extents are incompatible."""


class ShapeError(ValueError):
    """A tensor has the wrong rank or size for the requested operation."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one was required."""


class Tensor:
    """Dense real array with an optional gradient slot.

    ``data`` is always a float64 ndarray. ``grad`` stays ``None`` until
    :func:`grad` is called with this tensor among its leaves.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

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
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __truediv__ = lambda self, o: div(self, o)  # noqa: E731
    __rtruediv__ = lambda self, o: div(o, self)  # noqa: E731
    __matmul__ = lambda self, o: matmul(self, o)  # noqa: E731
    __rmatmul__ = lambda self, o: matmul(o, self)  # noqa: E731

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __getitem__(self, index) -> Tensor:
        return _index(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(a.data / b.data, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    Raises:
        DimensionError: if either operand has rank < 2 or the inner extents
            differ.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward)


# ------------------------------------------------------------------- shaping


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(a.data, axes), (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), backward)


def _index(a: Tensor, index) -> Tensor:
    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _result(np.array(a.data[index]), (a,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# ---------------------------------------------------------------- reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def tmax(a: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``. The gradient goes to the first maximal entry."""
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _result(out, (a,), backward)


# --------------------------------------------------------------- elementwise


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _result(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _result(np.where(mask, a.data, 0.0), (a,), backward)


_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def gelu(a, approximate: bool = False) -> Tensor:
    """GELU. Exact ``x * Phi(x)`` by default, tanh approximation on request."""
    a = as_tensor(a)
    x = a.data
    if approximate:
        inner = _SQRT_2_OVER_PI * (x + 0.044715 * x**3)
        t = np.tanh(inner)
        out = 0.5 * x * (1.0 + t)
        deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _SQRT_2_OVER_PI * (
            1.0 + 3 * 0.044715 * x * x
        )
    else:
        cdf = special.ndtr(x)
        out = x * cdf
        deriv = cdf + x * np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)

    def backward(g):
        return (g * deriv,)

    return _result(out, (a,), backward)


def sigmoid(a) -> Tensor:
    """Logistic function, evaluated without overflow for large |x|."""
    a = as_tensor(a)
    out = special.expit(a.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(np.asarray(out, dtype=np.float64), (a,), backward)


# ------------------------------------------------------------------ softmaxes


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis with per-row max subtraction."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward)


# ------------------------------------------------------------- normalization


def l2_normalize(v, eps: float = 1e-8, axis: int = -1) -> Tensor:
    """``v / (||v|| + eps)`` along ``axis``. A zero vector maps to zero."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    v = as_tensor(v)
    norm = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    denom = norm + eps
    out = v.data / denom

    def backward(g):
        proj = (g * v.data).sum(axis=axis, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        coef = np.where(norm > 0, proj / (safe * denom * denom), 0.0)
        return (g / denom - coef * v.data,)

    return _result(out, (v,), backward)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance normalization over the last axis (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _result(xhat, (a,), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity unless ``training`` and ``rate > 0``."""
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor(keep))


# ---------------------------------------------------------------- backprop


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def grad(loss: Tensor, leaves: Iterable[Tensor], accumulate: bool = False) -> list[np.ndarray]:
    """Populate ``leaf.grad`` with d(loss)/d(leaf) for every leaf.

    Leaves the loss does not depend on (frozen tensors included) get an
    all-zero gradient. Existing gradients are overwritten unless
    ``accumulate`` is set.

    Raises:
        ShapeError: if ``loss`` is not a single-element tensor.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    leaves = list(leaves)
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo_order(loss)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
    out = []
    for leaf in leaves:
        g = grads.get(id(leaf))
        g = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=np.float64)
        if accumulate and leaf.grad is not None:
            g = leaf.grad + g
        leaf.grad = g
        out.append(g)
    return out


# ------------------------------------------------------- finite differences


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def _scalar_of(value, where: str) -> float:
    v = value.item() if isinstance(value, Tensor) else float(value)
    if not math.isfinite(v):
        raise NumericError(f"non-finite function value {v} at {where}")
    return v


def finite_diff_check(f: Callable[[Tensor], Tensor], theta, h: float = 1e-4) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``f`` maps a parameter tensor to a scalar tensor. The analytic gradient
    comes from :func:`grad`; each coordinate is then perturbed by ``±h``.
    The relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as its
    denominator.

    Raises:
        NumericError: if any evaluation of ``f`` is not finite; the message
            names the offending coordinate.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    theta = np.array(theta.data if isinstance(theta, Tensor) else theta, dtype=np.float64)
    leaf = Tensor(theta, requires_grad=True)
    out = f(leaf)
    _scalar_of(out, "theta")
    (analytic,) = grad(out, [leaf])
    numeric = np.zeros_like(theta)
    flat = theta.reshape(-1)
    for i in range(flat.size):
        step = np.zeros_like(flat)
        step[i] = h
        hi = _scalar_of(f(Tensor((flat + step).reshape(theta.shape))), f"coordinate {i} (+h)")
        lo = _scalar_of(f(Tensor((flat - step).reshape(theta.shape))), f"coordinate {i} (-h)")
        numeric.reshape(-1)[i] = (hi - lo) / (2 * h)
    return float(_rel_err(analytic, numeric).max(initial=0.0))


def gradient_errors(
    loss_fn: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-4
) -> list[float]:
    """Per-leaf worst relative gradient error for a closure over ``leaves``.

    Same comparison as :func:`finite_diff_check`, but for a loss that reads
    several parameter tensors at once. Leaves are perturbed in place and
    restored afterwards.
    """
    loss = loss_fn()
    _scalar_of(loss, "base point")
    analytic = grad(loss, leaves)
    errors = []
    for li, (leaf, a) in enumerate(zip(leaves, analytic)):
        flat = leaf.data.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = _scalar_of(loss_fn(), f"leaf {li} coordinate {i} (+h)")
            flat[i] = orig - h
            lo = _scalar_of(loss_fn(), f"leaf {li} coordinate {i} (-h)")
            flat[i] = orig
            numeric[i] = (hi - lo) / (2 * h)
        errors.append(float(_rel_err(a.reshape(-1), numeric).max(initial=0.0)))
    return errors
