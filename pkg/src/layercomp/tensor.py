"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`GradTape` is active on the
current thread and at least one operand requires gradients. Outside a tape
every op is a plain numpy computation, which is what the latency harness
relies on.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with GradTape() as tape:
    ...     y = (x * x).sum()
    >>> backward(y, tape)[x]
    array([2., 4., 6.])
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, EvaluationError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_state = threading.local()


class Tensor:
    """A row-major float64 array plus a ``requires_grad`` flag.

    Tensors compare by identity, so they can key gradient dictionaries.
    """

    __slots__ = ("data", "requires_grad", "__weakref__")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)  # always a private copy
        if any(n < 1 for n in arr.shape):
            raise DimensionError(f"all extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        return t

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
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int] | None = None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None) -> "Tensor":
        return sum_(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# Tape


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class GradTape:
    """Ordered record of differentiable ops executed while the tape is active.

    A tape belongs to the thread that entered it. Nesting is allowed; ops
    record onto the innermost active tape only.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "GradTape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        out.requires_grad = True
        self.records.append(_Record(out, inputs, vjp))
        self._produced.add(id(out))


def active_tape() -> GradTape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _emit(arr: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor._wrap(arr)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape._record(out, inputs, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (trailing-aligned numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# Element-wise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Element-wise product; ``b`` may be a python scalar."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)
        return _emit(a.data * c, (a,), lambda g: (g * c,))
    b = _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


# --------------------------------------------------------------------------
# Linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``(..., m, k)`` and ``(..., k, n)`` with equal batch dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _emit(ad @ bd, (a, b), vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(n) for n in shape)
    if math.prod(shape) != x.size:
        raise DimensionError(f"reshape: cannot view shape {x.shape} as {shape}")
    src = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of the axes of {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _emit(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    src = x.shape

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes), src).copy(),)

    return _emit(x.data.sum(axis=axes), (x,), vjp)


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = math.prod(x.shape[a] for a in axes)
    src = x.shape

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes), src) / count,)

    return _emit(x.data.mean(axis=axes), (x,), vjp)


# --------------------------------------------------------------------------
# Neural-network primitives


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``0.5 x (1 + erf(x / sqrt 2))``."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _emit(xd * cdf, (x,), vjp)


def softmax_last_axis(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row over the last axis, then apply ``gain`` and ``bias``."""
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(
            f"layer_norm: last extent {c} of {x.shape} does not match "
            f"gain {gain.shape} / bias {bias.shape}"
        )
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be positive, got {eps}")
    xd, gd = x.data, gain.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def vjp(g):
        gx = g * gd
        dx = inv_std * (
            gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(xd.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit(xhat * gd + bias.data, (x, gain, bias), vjp)


# --------------------------------------------------------------------------
# Reverse pass and finite-difference checking


def backward(
    output: Tensor, tape: GradTape, wrt: Iterable[Tensor] | None = None
) -> dict[Tensor, np.ndarray]:
    """Propagate adjoints of the scalar ``output`` back through ``tape``.

    Returns a gradient for every gradient-requiring leaf reached by the tape,
    plus one for each tensor in ``wrt`` (zeros when it was not reached).
    """
    if output.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    adj: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    leaves: dict[int, Tensor] = {}
    if output.requires_grad and not tape.produced(output):
        leaves[id(output)] = output

    for rec in reversed(tape.records):
        g = adj.pop(id(rec.out), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.vjp(g)):
            if not t.requires_grad or gi is None:
                continue
            key = id(t)
            if key in adj:
                adj[key] = adj[key] + gi
            else:
                adj[key] = np.asarray(gi, dtype=np.float64)
            if not tape.produced(t):
                leaves[key] = t

    grads = {t: adj.get(key, np.zeros_like(t.data)) for key, t in leaves.items()}
    for t in wrt or ():
        if t not in grads:
            grads[t] = np.zeros_like(t.data)
    return grads


def gradient_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` takes no arguments and reads ``params`` by closure; entries of
    ``params`` are perturbed in place and restored. The relative error of a
    coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``. When ``max_coords`` is
    set, that many coordinates are sampled uniformly (without replacement)
    across all parameters.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    params = list(params)
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = True
    try:
        with GradTape() as tape:
            out = f()
        _require_finite(out, "f(params)")
        grads = backward(out, tape, wrt=params)
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if max_coords is not None and max_coords < len(coords):
        rng = np.random.default_rng(seed)
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[n] for n in sorted(picked)]

    worst = 0.0
    for i, j in coords:
        flat = params[i].data.flat
        orig = float(flat[j])
        flat[j] = orig + step
        up = _require_finite(f(), "f(p + h)")
        flat[j] = orig - step
        down = _require_finite(f(), "f(p - h)")
        flat[j] = orig
        numeric = (up - down) / (2.0 * step)
        analytic = float(grads[params[i]].reshape(-1)[j])
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def _require_finite(t: Tensor, what: str) -> float:
    value = float(np.asarray(t.data).reshape(-1)[0]) if isinstance(t, Tensor) else float(t)
    if not math.isfinite(value):
        raise EvaluationError(f"{what} is not finite ({value})")
    return value
