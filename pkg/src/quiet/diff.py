"""A small reverse-mode differentiation tape over numpy arrays.

Primitives record themselves on the innermost active :class:`Tape`; calling
:meth:`Tape.backward` walks the record in reverse and accumulates
vector-Jacobian products into every leaf tensor that requires a gradient.

    with Tape() as tape:
        y = diff.sum(diff.square(x))
    tape.backward(y)
    x.grad  # 2 * x.value
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericalError

SQRT_FLOOR = 1e-12
ABS_EPS = 1e-8
NORM_FLOOR = 1e-12
LOG_FLOOR = 1e-12

_local = threading.local()

# Test hook: primitive names whose backward rule gets deliberately corrupted.
_SABOTAGED: set[str] = set()


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "name")
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to Tensor's reflected ops

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __getitem__(self, index):
        return slice_(self, index)


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        self.nodes: list[tuple[str, Tensor, tuple, Callable]] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def record(self, op: str, out: Tensor, inputs: tuple, vjp: Callable):
        if op in _SABOTAGED:
            rule = vjp

            def vjp(g, _rule=rule):
                return tuple(None if d is None else 1.5 * d for d in _rule(g))

        self.nodes.append((op, out, inputs, vjp))

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every recorded leaf."""
        if loss.value.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(out) for _, out, _, _ in self.nodes}
        grads = {id(loss): np.ones_like(loss.value)}
        leaves: dict[int, Tensor] = {}
        for op, out, inputs, vjp in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, d in zip(inputs, vjp(g)):
                if d is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + d
                else:
                    grads[key] = d
                if key not in produced:
                    leaves[key] = t
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


def backward(tape: Tape, loss: Tensor):
    tape.backward(loss)


class sabotage:
    """Context manager that corrupts the backward rule of named primitives."""

    def __init__(self, *ops: str):
        self.ops = set(ops)

    def __enter__(self):
        self._added = self.ops - _SABOTAGED
        _SABOTAGED.update(self._added)
        return self

    def __exit__(self, *exc):
        _SABOTAGED.difference_update(self._added)
        return False


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, value, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(value, requires_grad=any(t.requires_grad for t in inputs))
    tape = current_tape()
    if out.requires_grad and tape is not None:
        tape.record(op, out, tuple(inputs), vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# -- arithmetic -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _emit("add", a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _emit("sub", a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("elementwise_mul", a, b)
    return _emit("elementwise_mul", a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


elementwise_mul = mul


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", c * a.value, (a,), lambda g: (c * g,))


def matmul(a, b) -> Tensor:
    """np.matmul semantics with batch broadcasting; a 1-D left operand is a row vector."""
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim == 1 and b.value.ndim == 2:
        return reshape(matmul(reshape(a, (1, -1)), b), (-1,))
    if a.value.ndim < 2 or b.value.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = np.matmul(a.value, b.value)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", out, (a, b), vjp)


def dot(a, b) -> Tensor:
    """Inner product over the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1:] != b.shape[-1:]:
        raise DimensionError(f"dot: last axes differ {a.shape} vs {b.shape}")
    _check_broadcast("dot", a, b)
    out = np.sum(a.value * b.value, axis=-1)

    def vjp(g):
        g = g[..., None]
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _emit("dot", out, (a, b), vjp)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", out, (a,), vjp)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


# -- shape ----------------------------------------------------------------


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _emit("concat", out, ts, vjp)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.value for t in ts], axis=axis)
    except ValueError as e:
        raise DimensionError(f"stack: {e}") from None

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _emit("stack", out, ts, vjp)


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.value[index]
    except IndexError as e:
        raise DimensionError(f"slice: {e}") from None

    def vjp(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        return (full,)

    return _emit("slice", np.array(out, dtype=np.float64), (a,), vjp)


def take(table, indices, axis: int = 0) -> Tensor:
    """Row lookup ``table[indices]`` along ``axis`` with integer ``indices``."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=int)
    out = np.take(table.value, idx, axis=axis)

    def vjp(g):
        full = np.zeros_like(table.value)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (full,)

    return _emit("take", out, (table,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _emit("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _emit("swapaxes", np.swapaxes(a.value, ax1, ax2), (a,),
                 lambda g: (np.swapaxes(g, ax1, ax2),))


def diagonal(a) -> Tensor:
    """Diagonal of the trailing two (square) axes."""
    a = as_tensor(a)
    n = a.shape[-1]
    if a.value.ndim < 2 or a.shape[-2] != n:
        raise DimensionError(f"diagonal: trailing axes not square {a.shape}")
    out = np.diagonal(a.value, axis1=-2, axis2=-1).copy()

    def vjp(g):
        return (g[..., :, None] * np.eye(n),)

    return _emit("diagonal", out, (a,), vjp)


# -- nonlinearities -------------------------------------------------------


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.value)
    return _emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _emit("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _emit("cos", np.cos(a.value), (a,), lambda g: (-g * np.sin(a.value),))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _emit("sin", np.sin(a.value), (a,), lambda g: (g * np.cos(a.value),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit("square", a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def sqrt(a) -> Tensor:
    """sqrt of max(x, 0); the derivative uses the input clamped at SQRT_FLOOR."""
    a = as_tensor(a)
    y = np.sqrt(np.maximum(a.value, 0.0))
    return _emit("sqrt", y, (a,),
                 lambda g: (g * 0.5 / np.sqrt(np.maximum(a.value, SQRT_FLOOR)),))


def abs_smooth(a, eps: float = ABS_EPS) -> Tensor:
    """sqrt(x^2 + eps^2), a differentiable stand-in for |x|."""
    a = as_tensor(a)
    y = np.sqrt(a.value * a.value + eps * eps)
    return _emit("abs_smooth", y, (a,), lambda g: (g * a.value / y,))


def log(a, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log of max(x, floor); zero derivative below the floor."""
    a = as_tensor(a)
    clipped = a.value <= floor
    safe = np.where(clipped, floor, a.value)
    return _emit("natural_log", np.log(safe), (a,),
                 lambda g: (np.where(clipped, 0.0, g / safe),))


natural_log = log


def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is False get probability 0."""
    a = as_tensor(a)
    x = a.value
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    y = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _emit("softmax", y, (a,), vjp)


def l2_normalize(a, axis: int = -1, floor: float = NORM_FLOOR) -> Tensor:
    """x / max(||x||, floor) along ``axis``."""
    a = as_tensor(a)
    norm = np.sqrt(np.sum(a.value * a.value, axis=axis, keepdims=True))
    clamped = norm < floor
    denom = np.where(clamped, floor, norm)
    y = a.value / denom

    def vjp(g):
        proj = g - y * np.sum(g * y, axis=axis, keepdims=True)
        return (np.where(clamped, g, proj) / denom,)

    return _emit("l2_normalize", y, (a,), vjp)


def dropout_mask_apply(a, mask, rate: float) -> Tensor:
    """Inverted dropout with a precomputed keep-mask."""
    a = as_tensor(a)
    m = np.asarray(mask, dtype=np.float64) / (1.0 - rate)
    return _emit("dropout_mask_apply", a.value * m, (a,), lambda g: (g * m,))


def check_finite(t: Tensor, what: str):
    if not np.all(np.isfinite(t.value)):
        raise NumericalError(f"non-finite value in {what}")
    return t


# -- verification ---------------------------------------------------------


def _named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, dict):
        return list(params.items())
    return [(t.name or f"param{i}", t) for i, t in enumerate(params)]


def gradient_errors(loss_fn: Callable[[], Tensor], params, h: float = 1e-5,
                    max_coords: int | None = None, seed: int = 0) -> dict[str, float]:
    """Per-tensor max relative error between tape gradients and central differences.

    ``loss_fn`` rebuilds the scalar loss from the current parameter values on
    every call. Tensors with more than ``max_coords`` entries are checked on a
    seeded subsample of that many coordinates.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    named = _named(params)
    for _, t in named:
        t.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    if not np.isfinite(loss.value).all():
        raise NumericalError("non-finite loss at the unperturbed point")
    tape.backward(loss)

    rng = np.random.default_rng(seed)
    errors = {}
    for name, t in named:
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
        flat = t.value.reshape(-1)
        coords = np.arange(t.size)
        if max_coords is not None and t.size > max_coords:
            coords = np.sort(rng.choice(t.size, size=max_coords, replace=False))
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().value)
            flat[i] = orig - h
            down = float(loss_fn().value)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericalError(f"non-finite loss perturbing {name}[{i}]")
            numeric = (up - down) / (2.0 * h)
            a = analytic[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
        errors[name] = float(worst)
    return errors


def finite_diff_check(loss_fn: Callable[[], Tensor], params, h: float = 1e-5,
                      max_coords: int | None = None, seed: int = 0) -> float:
    errs = gradient_errors(loss_fn, params, h=h, max_coords=max_coords, seed=seed)
    return max(errs.values(), default=0.0)
