"""Minimal reverse-mode autodiff over numpy arrays.

Every differentiable quantity in the package (logits, probabilities, images,
noise predictions) is a :class:`Tensor`. Ops record a closure that maps the
output gradient to input gradients; :func:`backward` walks the graph in
reverse topological order and accumulates into leaf ``.grad`` buffers.

Broadcasting is restricted to the bias pattern: an operand whose shape equals
the trailing dims of the other (e.g. ``(B, H) + (H,)``) or a scalar.
"""

from __future__ import annotations

import math
import warnings
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericError",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "matmul",
    "relu",
    "gelu",
    "layer_norm",
    "log",
    "exp",
    "softmax",
    "log_softmax",
    "clamp_min",
    "concatenate",
    "finite_diff_check",
]


class ShapeError(ValueError):
    """Operands of an op have incompatible shapes."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class NumericError(FloatingPointError):
    """An op produced NaN or Inf from its inputs."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense float array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")
    __array_ufunc__ = None  # make numpy defer to Tensor's reflected operators

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    # -- introspection ---------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self._op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return add(other, -self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a python/numpy scalar")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms ----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tmean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def relu(self) -> Tensor:
        return relu(self)

    def gelu(self) -> Tensor:
        return gelu(self)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], rule, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: non-finite output")
    out = Tensor(data)
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
    return out


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    stretched = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if stretched:
        g = g.sum(axis=stretched, keepdims=True)
    return g.reshape(shape)


# -- elementwise / linear algebra ------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape

    def rule(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), rule, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def rule(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), rule, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def rule(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), rule, "matmul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def rule(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), rule, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def rule(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th**2) * dinner),)

    return _make(out, (x,), rule, "gelu")


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (no affine part)."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def rule(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (x,), rule, "layer_norm")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def rule(g):
        return (g * out,)

    return _make(out, (x,), rule, "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)

    def rule(g):
        return (g / xd,)

    return _make(out, (x,), rule, "log")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    xd = x.data
    mask = xd > floor

    def rule(g):
        return (g * mask,)

    return _make(np.where(mask, xd, np.asarray(floor, dtype=xd.dtype)), (x,), rule, "clamp_min")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), rule, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def rule(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), rule, "log_softmax")


# -- reductions / shape ----------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), rule, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    return tsum(x, axes, keepdims) * (1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    src = x.shape

    def rule(g):
        return (g.reshape(src),)

    return _make(out, (x,), rule, "reshape")


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    shape = x.shape
    dtype = x.dtype
    fancy = any(isinstance(i, (list, np.ndarray)) for i in (index if isinstance(index, tuple) else (index,)))

    def rule(g):
        full = np.zeros(shape, dtype=dtype)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(np.array(out), (x,), rule, "slice")


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError:
        raise ShapeError("concatenate", *(t.shape for t in tensors)) from None
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def rule(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tensors, rule, "concatenate")


# -- backward --------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every gradient-tracking leaf."""
    if root.size != 1:
        raise ValueError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_toposort(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- gradient oracle -------------------------------------------------------

def _rel_errors(f, leaves, eps):
    worst = 0.0
    for leaf in leaves:
        flat = leaf.data.reshape(-1)
        analytic = leaf.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = float(f().data)
            flat[i] = orig - eps
            with no_grad():
                fm = float(f().data)
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
    return worst


def finite_diff_check(f: Callable[[], Tensor], x: Tensor | Iterable[Tensor], eps: float = 1e-5) -> float:
    """Compare backward() gradients of ``f`` against central differences.

    ``f`` is a zero-argument closure that rebuilds the scalar from the
    current contents of ``x`` (one tensor or several). Returns the maximum
    over components of ``|analytic - numeric| / max(1, |analytic|)``.
    A warning is emitted when shrinking ``eps`` does not shrink the error
    (the point is probably non-smooth); the check itself never raises.
    """
    leaves = [x] if isinstance(x, Tensor) else list(x)
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.grad = None
    out = f()
    backward(out)
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
    err = _rel_errors(f, leaves, eps)
    if err > 1e-6:
        coarse = _rel_errors(f, leaves, eps * 10)
        # smooth points shrink the error about 100x per decade of eps
        if err > 0.5 * coarse:
            warnings.warn(
                f"finite_diff_check: error {err:.3g} did not decrease with eps "
                f"({coarse:.3g} at {eps * 10:g}); function may be non-smooth here",
                RuntimeWarning,
                stacklevel=2,
            )
    return err
