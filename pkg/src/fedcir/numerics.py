"""Small dense-tensor arithmetic with a reverse-mode gradient tape.

Tensors are immutable fp64 arrays. Operations executed while a
:class:`GradTape` is active are recorded in execution order, so replaying
the record backwards is already a valid topological order.

    >>> w = Tensor([[1.0, 0.0], [0.0, 2.0]])
    >>> with GradTape() as tape:
    ...     tape.watch(w)
    ...     y = affine(w, Tensor([1.0, 1.0]), Tensor([1.0, 1.0]))
    ...     loss = sum_all(y)
    >>> tape.gradient(loss, [w])[0].tolist()
    [[1.0, 1.0], [1.0, 1.0]]
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LOG_GUARD = 1e-12


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A value left the finite / valid domain of an operation."""


class Tensor:
    """Immutable fp64 array. ``shape`` and row-major ``data`` mirror the array."""

    __slots__ = ("value",)

    def __init__(self, value):
        arr = np.array(value, dtype=np.float64)
        arr.setflags(write=False)
        self.value = arr

    @classmethod
    def _own(cls, arr: np.ndarray) -> "Tensor":
        # takes ownership of a freshly computed array, no copy
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        t.value = arr
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        return self.value.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return np.array(self.value)

    def item(self) -> float:
        return float(self.value.item())

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, value={self.value!r})"

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    output: int
    inputs: tuple[int, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class GradTape:
    """Ordered record of primitive ops; gradients of a scalar w.r.t. watched tensors.

    ``mults`` counts scalar multiplications done by recorded forward ops and by
    :meth:`gradient`, a rough compute meter for the simulator.
    """

    records: list[_Record] = field(default_factory=list)
    tracked: set[int] = field(default_factory=set)
    mults: int = 0
    _keep: list[Tensor] = field(default_factory=list, repr=False)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "GradTape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._keep.append(t)
            self.tracked.add(id(t))

    def is_tracked(self, t: Tensor) -> bool:
        return id(t) in self.tracked

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray | None]:
        """Gradient of scalar ``loss`` w.r.t. each source; None where unconnected."""
        if loss.value.size != 1:
            raise DimensionError(f"gradient needs a scalar loss, got shape {loss.shape}")
        wanted = {id(s) for s in sources}
        grads: dict[int, np.ndarray] = {}
        if id(loss) in self.tracked:
            grads[id(loss)] = np.ones_like(loss.value)
        for rec in reversed(self.records):
            g_out = grads.get(rec.output) if rec.output in wanted else grads.pop(rec.output, None)
            if g_out is None:
                continue
            self.mults += g_out.size
            for inp, g in zip(rec.inputs, rec.vjp(g_out)):
                if g is None or inp not in self.tracked:
                    continue
                if inp in grads:
                    grads[inp] = grads[inp] + g
                else:
                    grads[inp] = g
        out: list[np.ndarray | None] = []
        for s in sources:
            g = grads.get(id(s))
            out.append(None if g is None else np.asarray(g, dtype=np.float64).reshape(s.shape))
        return out


_ACTIVE: contextvars.ContextVar[GradTape | None] = contextvars.ContextVar("fedcir_tape", default=None)


def _record(out: Tensor, inputs: Sequence[Tensor], vjp, mults: int = 0) -> Tensor:
    tape = _ACTIVE.get()
    if tape is None:
        return out
    tape.mults += mults
    ids = tuple(id(t) for t in inputs)
    if not any(i in tape.tracked for i in ids):
        return out
    tape._keep.append(out)
    tape._keep.extend(inputs)
    tape.tracked.add(id(out))
    tape.records.append(_Record(id(out), ids, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced non-finite values")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._own(a.value + b.value)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._own(a.value - b.value)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._own(a.value * b.value)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
        mults=out.value.size,
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.value == 0):
        raise NumericError("division by zero")
    out = Tensor._own(a.value / b.value)
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.shape),
        ),
        mults=out.value.size,
    )


def square(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor._own(a.value * a.value)
    return _record(out, (a,), lambda g: (2.0 * g * a.value,), mults=out.value.size)


def exp(a) -> Tensor:
    a = as_tensor(a)
    v = np.exp(a.value)
    _check_finite(v, "exp")
    out = Tensor._own(v)
    return _record(out, (a,), lambda g: (g * v,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.value <= 0):
        raise NumericError("log of nonpositive value")
    out = Tensor._own(np.log(a.value))
    return _record(out, (a,), lambda g: (g / a.value,))


def relu(a) -> Tensor:
    # subgradient at 0 is 0
    a = as_tensor(a)
    mask = a.value > 0
    out = Tensor._own(np.where(mask, a.value, 0.0))
    return _record(out, (a,), lambda g: (g * mask,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    mask = (a.value >= lo) & (a.value <= hi)
    out = Tensor._own(np.clip(a.value, lo, hi))
    return _record(out, (a,), lambda g: (g * mask,))


def maximum(a, floor: float) -> Tensor:
    """Elementwise max with a constant; gradient passes only where ``a > floor``."""
    a = as_tensor(a)
    mask = a.value > floor
    out = Tensor._own(np.where(mask, a.value, floor))
    return _record(out, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor._own(a.value.sum())
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape),))


def sum_last(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor._own(a.value.sum(axis=-1))
    return _record(out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, -1), a.shape),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.value.size
    if n == 0:
        raise DimensionError("mean of empty tensor")
    out = Tensor._own(a.value.mean())
    return _record(out, (a,), lambda g: (np.broadcast_to(g / n, a.shape),))


def mean_stack(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of equally shaped tensors."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("mean of an empty list")
    shape = ts[0].shape
    for t in ts[1:]:
        if t.shape != shape:
            raise DimensionError(f"cannot average shapes {shape} and {t.shape}")
    n = len(ts)
    acc = ts[0].value.copy()
    for t in ts[1:]:
        acc = acc + t.value
    out = Tensor._own(acc / n)
    return _record(out, ts, lambda g: tuple(g / n for _ in ts))


# ---------------------------------------------------------------- structure


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = Tensor._own(np.concatenate([t.value for t in ts], axis=axis))
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record(out, ts, vjp)


def segment(vec, lo: int, hi: int, shape: tuple[int, ...]) -> Tensor:
    """Elements ``lo:hi`` of a flattened tensor, reshaped to ``shape``."""
    v = as_tensor(vec)
    flat = v.value.reshape(-1)
    if not 0 <= lo <= hi <= flat.size or hi - lo != int(np.prod(shape)):
        raise DimensionError(f"segment {lo}:{hi} of size {flat.size} cannot take shape {shape}")
    out = Tensor._own(flat[lo:hi].reshape(shape))

    def vjp(g):
        full = np.zeros(flat.size)
        full[lo:hi] = np.asarray(g).reshape(-1)
        return (full.reshape(v.shape),)

    return _record(out, (v,), vjp)


def affine(weight, bias, x) -> Tensor:
    """``x @ weight + bias`` for a single row or a batch of rows."""
    w, b, x = as_tensor(weight), as_tensor(bias), as_tensor(x)
    if w.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"affine: input shape {x.shape} incompatible with weight shape {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"affine: bias shape {b.shape} incompatible with weight shape {w.shape}")
    xv, wv = x.value, w.value
    out = Tensor._own(xv @ wv + b.value)
    rows = 1 if x.ndim == 1 else x.shape[0]
    cost = rows * w.shape[0] * w.shape[1]

    def vjp(g):
        if xv.ndim == 1:
            gw = np.outer(xv, g)
            gb = g
        else:
            gw = xv.T @ g
            gb = g.sum(axis=0)
        return (gw, gb, g @ wv.T)

    return _record(out, (w, b, x), vjp, mults=cost)


# ---------------------------------------------------------------- probabilities


def softmax(logits) -> Tensor:
    """Softmax along the last axis with max-subtraction."""
    z = as_tensor(logits)
    if z.ndim == 0 or z.shape[-1] == 0:
        raise DimensionError(f"softmax of empty input, shape {z.shape}")
    shifted = z.value - z.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._own(p)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(out, (z,), vjp, mults=p.size)


def cross_entropy(probs, label) -> Tensor:
    """``-log(max(probs[label], LOG_GUARD))``.

    ``probs`` may be one probability vector with an integer label, or a batch
    of rows with an integer label array; the batch form returns one loss per row.
    """
    p = as_tensor(probs)
    if p.ndim == 1:
        c = p.shape[0]
        y = int(label)
        if not 0 <= y < c:
            raise IndexError(f"label {y} out of range for {c} classes")
        picked = p.value[y]
        val = -np.log(max(picked, LOG_GUARD))

        def vjp1(g):
            grad = np.zeros_like(p.value)
            if picked > LOG_GUARD:
                grad[y] = -g / picked
            return (grad,)

        return _record(Tensor._own(np.array(val)), (p,), vjp1)
    if p.ndim != 2:
        raise DimensionError(f"cross_entropy expects rank 1 or 2, got shape {p.shape}")
    n, c = p.shape
    y = np.asarray(label, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise DimensionError(f"{n} probability rows but {y.shape[0]} labels")
    if np.any((y < 0) | (y >= c)):
        raise IndexError(f"labels out of range for {c} classes")
    rows = np.arange(n)
    picked = p.value[rows, y]
    out = Tensor._own(-np.log(np.maximum(picked, LOG_GUARD)))

    def vjp(g):
        grad = np.zeros_like(p.value)
        live = picked > LOG_GUARD
        grad[rows[live], y[live]] = -g[live] / picked[live]
        return (grad,)

    return _record(out, (p,), vjp)


# ---------------------------------------------------------------- gradient check


def grad_check(
    loss: Callable[[Tensor], Tensor],
    point,
    step: float = 1e-5,
    kink_tol: float = 1e-2,
) -> float:
    """Max relative error between tape gradient and central differences.

    Relative error per coordinate is ``|a - b| / max(|a|, |b|, 1e-8)``.
    Coordinates whose one-sided difference quotients disagree by more than
    ``kink_tol`` (relative) straddle a kink (ReLU, clamp) and are skipped.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(as_tensor(point).value, dtype=np.float64)
    param = Tensor(x0)
    with GradTape() as tape:
        tape.watch(param)
        f0 = loss(param)
    (g,) = tape.gradient(f0, [param])
    analytic = np.zeros_like(x0) if g is None else g
    f0v = float(f0.value)
    if not np.isfinite(f0v):
        raise NumericError("loss is not finite at the check point")

    worst = 0.0
    flat = x0.reshape(-1)
    a_flat = analytic.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        fp = float(loss(Tensor(xp.reshape(x0.shape))).value)
        fm = float(loss(Tensor(xm.reshape(x0.shape))).value)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite loss at probe point for coordinate {i}")
        fwd = (fp - f0v) / step
        bwd = (f0v - fm) / step
        if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), 1.0):
            continue
        numeric = (fp - fm) / (2.0 * step)
        a = a_flat[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
