"""Dense float64 tensors with a recording tape for reverse-mode differentiation.

Every operation goes through :func:`apply_primitive`, which looks the primitive
up in :data:`PRIMITIVES`, runs its forward rule on the raw arrays and, when a
:class:`Tape` is active and some input requires a gradient, records the
application so that :meth:`Tape.backward` can later replay the registered
vector-Jacobian products in reverse order.

Outside an active tape operations are evaluated eagerly and nothing is
recorded, which is how inference and finite-difference probes run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimensionError, DomainError, NumericalError, UsageError

__all__ = [
    "Tensor",
    "Tape",
    "Primitive",
    "PRIMITIVES",
    "apply_primitive",
    "backward",
    "grad_check",
    "grad_check_params",
    "as_tensor",
    "concat",
    "no_tape",
]


@dataclass
class Primitive:
    """A differentiable operation.

    ``forward(*arrays, **attrs)`` returns the output array and
    ``vjp(g, out, arrays, **attrs)`` returns one gradient (or ``None``) per input.
    """

    name: str
    forward: Callable
    vjp: Callable


PRIMITIVES: dict[str, Primitive] = {}


def _register(name):
    def deco(forward):
        def attach(vjp):
            PRIMITIVES[name] = Primitive(name, forward, vjp)
            return vjp

        forward.vjp = attach
        return forward

    return deco


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "decay", "_tape", "_node")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, decay: bool = True):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self.name = name
        self.decay = decay
        self._tape = None
        self._node = None

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t.decay = True
        t._tape = None
        t._node = None
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def assign(self, arr) -> None:
        """Rebind the stored values (optimizer updates and probes only)."""
        arr = np.array(arr, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise DimensionError(f"assign shape {arr.shape} != {self.data.shape}")
        _check_finite(arr, f"assign to {self.name or 'tensor'}")
        arr.flags.writeable = False
        self.data = arr

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return apply_primitive("add", [self, other])

    def __radd__(self, other):
        return apply_primitive("add", [other, self])

    def __sub__(self, other):
        return apply_primitive("sub", [self, other])

    def __rsub__(self, other):
        return apply_primitive("sub", [other, self])

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply_primitive("scale", [self], c=float(other))
        return apply_primitive("mul", [self, other])

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise UsageError("only division by a Python scalar is supported")
        return apply_primitive("scale", [self], c=1.0 / float(other))

    def __neg__(self):
        return apply_primitive("scale", [self], c=-1.0)

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, other])

    def __rmatmul__(self, other):
        return apply_primitive("matmul", [other, self])

    def __getitem__(self, index):
        return apply_primitive("slice", [self], index=index)

    # -- methods -------------------------------------------------------
    def relu(self):
        return apply_primitive("relu", [self])

    def exp(self):
        return apply_primitive("exp", [self])

    def log(self):
        return apply_primitive("log", [self])

    def sqrt(self):
        return apply_primitive("sqrt", [self])

    def square(self):
        return apply_primitive("square", [self])

    def sigmoid(self):
        return apply_primitive("sigmoid", [self])

    def sum(self, axis=None, keepdims=False):
        return apply_primitive("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply_primitive("mean", [self], axis=axis, keepdims=keepdims)

    def softmax(self):
        return apply_primitive("softmax", [self])

    def log_softmax(self):
        return apply_primitive("log_softmax", [self])

    def clamp_min(self, lo: float):
        return apply_primitive("clamp_min", [self], lo=float(lo))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return apply_primitive("reshape", [self], shape=tuple(shape))

    def transpose(self):
        """Swap the last two axes."""
        return apply_primitive("transpose", [self])

    def broadcast_to(self, shape):
        return apply_primitive("broadcast", [self], shape=tuple(shape))


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"non-finite value produced by {where}")


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    prim: Primitive
    inputs: list
    out: Tensor
    attrs: dict


_ACTIVE: list["Tape"] = []


def recording() -> bool:
    """True when some tape is currently recording."""
    return bool(_ACTIVE)


class Tape:
    """Ordered record of primitive applications.

    Used as a context manager; nested tapes are allowed and only the innermost
    one records.  A tape supports exactly one backward sweep.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor) -> dict:
        if loss._tape is not self:
            raise UsageError("loss was not produced on this tape")
        if self.consumed:
            raise UsageError("tape already swept; record a new forward pass")
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            arrays = [t.data for t in node.inputs]
            in_grads = node.prim.vjp(g, node.out.data, arrays, **node.attrs)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    raise DimensionError(
                        f"vjp of {node.prim.name} returned shape {gi.shape} for input {t.data.shape}"
                    )
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t._node is None:
                    leaves[key] = t

        out = {}
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            _check_finite(g, f"gradient of {t.name or 'leaf'}")
            t.grad = Tensor._wrap(g)
            out[t.name if t.name is not None else key] = t.grad
        return out


def no_tape():
    """Context manager suspending recording (a fresh, never-swept tape is not
    pushed; instead the stack is temporarily emptied)."""
    return _Suspend()


class _Suspend:
    def __enter__(self):
        self._saved = list(_ACTIVE)
        _ACTIVE.clear()

    def __exit__(self, *exc):
        _ACTIVE.extend(self._saved)
        return False


def backward(loss: Tensor) -> dict:
    """Sweep the tape that produced ``loss``; returns ``{param name: grad}``."""
    if not isinstance(loss, Tensor) or loss._tape is None:
        raise UsageError("backward called on a tensor that is not on a tape")
    return loss._tape.backward(loss)


def apply_primitive(name: str, inputs, **attrs) -> Tensor:
    prim = PRIMITIVES.get(name)
    if prim is None:
        raise UsageError(f"unknown primitive {name!r}")
    tensors = [x if isinstance(x, Tensor) else Tensor(x) for x in inputs]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):  # reported by _check_finite
        out_data = prim.forward(*[t.data for t in tensors], **attrs)
    if not isinstance(out_data, np.ndarray):
        out_data = np.asarray(out_data, dtype=np.float64)
    _check_finite(out_data, name)
    tape = _ACTIVE[-1] if _ACTIVE else None
    needs = tape is not None and any(t.requires_grad for t in tensors)
    out = Tensor._wrap(out_data, requires_grad=needs)
    if needs:
        node = _Node(prim, tensors, out, attrs)
        tape.nodes.append(node)
        out._tape = tape
        out._node = node
    return out


def concat(tensors, axis=-1) -> Tensor:
    return apply_primitive("concat", list(tensors), axis=axis)


# ---------------------------------------------------------------------------
# primitive rules


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


@_register("matmul")
def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    return np.matmul(a, b)


@_matmul.vjp
def _(g, out, arrays):
    a, b = arrays
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


@_register("add")
def _add(a, b):
    _broadcast_check("add", a, b)
    return a + b


@_add.vjp
def _(g, out, arrays):
    a, b = arrays
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


@_register("sub")
def _sub(a, b):
    _broadcast_check("sub", a, b)
    return a - b


@_sub.vjp
def _(g, out, arrays):
    a, b = arrays
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


@_register("mul")
def _mul(a, b):
    _broadcast_check("mul", a, b)
    return a * b


@_mul.vjp
def _(g, out, arrays):
    a, b = arrays
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@_register("scale")
def _scale(a, c):
    return a * c


@_scale.vjp
def _(g, out, arrays, c):
    return (g * c,)


@_register("relu")
def _relu(a):
    return np.maximum(a, 0.0)


@_relu.vjp
def _(g, out, arrays):
    return (g * (arrays[0] > 0),)


@_register("exp")
def _exp(a):
    with np.errstate(over="ignore"):
        return np.exp(a)


@_exp.vjp
def _(g, out, arrays):
    return (g * out,)


@_register("log")
def _log(a):
    if (a <= 0).any():
        raise DomainError("log of non-positive operand")
    return np.log(a)


@_log.vjp
def _(g, out, arrays):
    return (g / arrays[0],)


@_register("sqrt")
def _sqrt(a):
    if (a <= 0).any():
        raise DomainError("sqrt of non-positive operand")
    return np.sqrt(a)


@_sqrt.vjp
def _(g, out, arrays):
    return (g * 0.5 / out,)


@_register("square")
def _square(a):
    return a * a


@_square.vjp
def _(g, out, arrays):
    return (2.0 * g * arrays[0],)


@_register("sigmoid")
def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@_sigmoid.vjp
def _(g, out, arrays):
    return (g * out * (1.0 - out),)


@_register("clamp_min")
def _clamp_min(a, lo):
    return np.maximum(a, lo)


@_clamp_min.vjp
def _(g, out, arrays, lo):
    return (g * (arrays[0] > lo),)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@_register("sum")
def _sum(a, axis=None, keepdims=False):
    return np.asarray(np.sum(a, axis=axis, keepdims=keepdims), dtype=np.float64)


@_sum.vjp
def _(g, out, arrays, axis=None, keepdims=False):
    a = arrays[0]
    if not keepdims:
        g = np.expand_dims(g, _norm_axis(axis, a.ndim))
    return (np.broadcast_to(g, a.shape).copy(),)


@_register("mean")
def _mean(a, axis=None, keepdims=False):
    if a.size == 0:
        raise UsageError("mean of an empty tensor")
    return np.asarray(np.mean(a, axis=axis, keepdims=keepdims), dtype=np.float64)


@_mean.vjp
def _(g, out, arrays, axis=None, keepdims=False):
    a = arrays[0]
    axes = _norm_axis(axis, a.ndim)
    n = math.prod(a.shape[i] for i in axes)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return (np.broadcast_to(g / n, a.shape).copy(),)


@_register("softmax")
def _softmax(a):
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@_softmax.vjp
def _(g, out, arrays):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


@_register("log_softmax")
def _log_softmax(a):
    s = a - a.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


@_log_softmax.vjp
def _(g, out, arrays):
    return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


@_register("concat")
def _concat(*arrays, axis=-1):
    ref = arrays[0]
    ax = axis % ref.ndim
    for a in arrays[1:]:
        if a.ndim != ref.ndim or any(a.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {ref.shape} and {a.shape} on axis {axis}")
    return np.concatenate(arrays, axis=axis)


@_concat.vjp
def _(g, out, arrays, axis=-1):
    ax = axis % g.ndim
    bounds = np.cumsum([a.shape[ax] for a in arrays])[:-1]
    return tuple(np.split(g, bounds, axis=ax))


@_register("slice")
def _slice(a, index):
    try:
        return np.array(a[index], dtype=np.float64)
    except IndexError as exc:
        raise DimensionError(f"slice: {exc}") from None


@_slice.vjp
def _(g, out, arrays, index):
    full = np.zeros_like(arrays[0])
    np.add.at(full, index, g)
    return (full,)


@_register("broadcast")
def _broadcast(a, shape):
    try:
        return np.broadcast_to(a, shape).copy()
    except ValueError:
        raise DimensionError(f"broadcast: {a.shape} -> {shape}") from None


@_broadcast.vjp
def _(g, out, arrays, shape):
    return (_unbroadcast(g, arrays[0].shape),)


@_register("reshape")
def _reshape(a, shape):
    try:
        return a.reshape(shape).copy()
    except ValueError:
        raise DimensionError(f"reshape: {a.shape} -> {shape}") from None


@_reshape.vjp
def _(g, out, arrays, shape):
    return (g.reshape(arrays[0].shape),)


@_register("transpose")
def _transpose(a):
    if a.ndim < 2:
        raise DimensionError("transpose needs rank >= 2")
    return np.swapaxes(a, -1, -2).copy()


@_transpose.vjp
def _(g, out, arrays):
    return (np.swapaxes(g, -1, -2).copy(),)


@_register("batchnorm")
def _batchnorm(x, gamma, beta, eps=1e-5, mean=None, var=None):
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    if mean is None:
        if x.shape[0] < 2:
            raise DimensionError("batchnorm in training mode needs at least 2 rows")
        mu = x.mean(axis=0)
        v = x.var(axis=0)
    else:
        mu, v = mean, var
    xhat = (x - mu) / np.sqrt(v + eps)
    return gamma * xhat + beta


@_batchnorm.vjp
def _(g, out, arrays, eps=1e-5, mean=None, var=None):
    x, gamma, beta = arrays
    if mean is None:
        mu = x.mean(axis=0)
        v = x.var(axis=0)
    else:
        mu, v = mean, var
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (x - mu) * inv
    ggamma = (g * xhat).sum(axis=0)
    gbeta = g.sum(axis=0)
    gxhat = g * gamma
    if mean is None:
        n = x.shape[0]
        gx = inv / n * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
    else:
        gx = gxhat * inv
    return gx, ggamma, gbeta


# ---------------------------------------------------------------------------
# finite-difference checks


def _rel_err(a: np.ndarray, n: np.ndarray) -> float:
    if a.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom))


def _scalar(out, what="f") -> float:
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise UsageError(f"{what} must return a scalar Tensor")
    return float(out.data.reshape(()))


def grad_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Max relative error between the taped gradient of ``f`` at ``point`` and
    central differences, using ``|a - n| / max(1, |a|, |n|)`` per coordinate."""
    if not (0.0 < eps <= 1e-2):
        raise UsageError(f"eps must lie in (0, 1e-2], got {eps}")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base, requires_grad=True, name="point")
    with Tape() as tape:
        out = f(x)
    _scalar(out)
    if out._tape is tape:
        tape.backward(out)
    analytic = x.grad.data if x.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    with no_tape():
        for i in range(flat.size):
            xp = flat.copy()
            xp[i] += eps
            xm = flat.copy()
            xm[i] -= eps
            fp = _scalar(f(Tensor(xp.reshape(base.shape))))
            fm = _scalar(f(Tensor(xm.reshape(base.shape))))
            numeric.reshape(-1)[i] = (fp - fm) / (2.0 * eps)
    return _rel_err(analytic, numeric)


def grad_check_params(loss_fn: Callable[[], Tensor], params, eps: float = 1e-5, max_coords: int | None = None, rng=None):
    """Central-difference check of ``loss_fn()`` against every tensor in ``params``.

    ``loss_fn`` must be deterministic and read the parameter tensors directly.
    Returns ``(max_error, {param name: error})``.  With ``max_coords`` only that
    many coordinates per tensor are probed (chosen by ``rng``).
    """
    if not (0.0 < eps <= 1e-2):
        raise UsageError(f"eps must lie in (0, 1e-2], got {eps}")
    with Tape() as tape:
        out = loss_fn()
    _scalar(out, "loss_fn")
    for p in params:
        p.grad = None
    if out._tape is tape:
        tape.backward(out)

    errors = {}
    with no_tape():
        for p in params:
            base = p.data.copy()
            analytic = p.grad.data.reshape(-1) if p.grad is not None else np.zeros(base.size)
            coords = np.arange(base.size)
            if max_coords is not None and base.size > max_coords:
                coords = np.sort((rng or np.random.default_rng(0)).choice(base.size, max_coords, replace=False))
            num = np.empty(coords.size)
            flat = base.reshape(-1)
            for k, i in enumerate(coords):
                xp = flat.copy()
                xp[i] += eps
                p.assign(xp.reshape(base.shape))
                fp = _scalar(loss_fn())
                xm = flat.copy()
                xm[i] -= eps
                p.assign(xm.reshape(base.shape))
                fm = _scalar(loss_fn())
                num[k] = (fp - fm) / (2.0 * eps)
            p.assign(base)
            errors[p.name] = _rel_err(analytic[coords], num)
    return (max(errors.values()) if errors else 0.0), errors
