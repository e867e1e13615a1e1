"""Dense float64 tensors with reverse-mode differentiation.

Every op applied to a tracked tensor records its inputs and a
vector-Jacobian product on the result. ``backward`` orders those records
topologically, runs them once in reverse and then drops them, so each
forward pass owns an independent tape that is freed after use.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)
_debug = contextvars.ContextVar("debug", default=False)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them (evaluation passes)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every op result for NaN/Inf while active."""
    token = _debug.set(enabled)
    try:
        yield
    finally:
        _debug.reset(token)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise ValueError("tensor must have at least one element")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents, vjp, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._vjp = None
        out._op = op
        if _debug.get() and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"{op} produced non-finite values")
        if _grad_enabled.get() and any(p._tracked for p in parents):
            out._parents = tuple(parents)
            out._vjp = vjp
        return out

    @property
    def _tracked(self) -> bool:
        return self.requires_grad or self._vjp is not None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), vjp, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), vjp, "mul")


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: batch shapes {a.shape} and {b.shape} do not broadcast") from None

    if b.ndim == 2:
        # One BLAS call per leading-axis slice, so a slice's result never
        # depends on how many other slices share the call (BLAS picks its
        # kernels by problem size, and kernels round differently).
        a2 = a.data.reshape(-1, a.shape[-1])
        out = np.matmul(a.data.reshape(a.shape[0], -1, a.shape[-1]), b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def vjp2(g):
            g2 = g.reshape(-1, b.shape[1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return Tensor._result(out, (a, b), vjp2, "matmul")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._result(a.data @ b.data, (a, b), vjp, "matmul")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return Tensor._result(out, (a,), lambda g: (g * (out > 0),), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    ex = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return Tensor._result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: input must be positive")
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: no inputs")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ValueError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=ax), tensors, vjp, "concat")


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g.reshape(out.shape), a.shape).copy(),)

    res = out.reshape(()) if axis is None else np.squeeze(out, axis=axis)
    return Tensor._result(np.atleast_1d(res), (a,), vjp, "reduce_sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(reduce_sum(a, axis), 1.0 / float(n))


def max_pool_rows(a: Tensor, axis: int = -2) -> Tensor:
    """Max over ``axis``; the gradient goes to the first maximal entry."""
    ax = axis % a.ndim
    idx = np.expand_dims(np.argmax(a.data, axis=ax), ax)
    out = np.take_along_axis(a.data, idx, axis=ax)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, g.reshape(out.shape), axis=ax)
        return (ga,)

    return Tensor._result(np.squeeze(out, axis=ax), (a,), vjp, "max_pool_rows")


def take(a: Tensor, key) -> Tensor:
    """Numpy-style (basic or advanced) indexing; repeated indices accumulate."""
    out = a.data[key]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, g)
        return (ga,)

    return Tensor._result(np.array(out, ndmin=1), (a,), vjp, "take")


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def forward_primitive(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name."""
    table = {
        "matmul": matmul,
        "add": add,
        "relu": relu,
        "sigmoid": sigmoid,
        "concat": lambda *xs, axis=0: concat(xs, axis=axis),
        "mean": mean,
        "max_pool_rows": max_pool_rows,
    }
    if op not in table:
        raise ValueError(f"unknown primitive {op!r}")
    return table[op](*inputs, **kwargs)


BCE_CLAMP = 1e-7


def bce_loss(predictions: Tensor, labels, weights=None) -> Tensor:
    """Mean binary cross-entropy; probabilities are clamped to [1e-7, 1 - 1e-7].

    With ``weights`` the per-item terms are combined as ``sum(w * l) / sum(w)``.
    """
    predictions = as_tensor(predictions)
    y = np.asarray(labels, dtype=np.float64).reshape(predictions.shape)
    if predictions.data.size == 0:
        raise ValueError("bce_loss: empty input")
    if y.size != predictions.data.size:
        raise ValueError(f"bce_loss: {predictions.data.size} predictions vs {y.size} labels")
    if weights is None:
        w = np.full(predictions.shape, 1.0 / predictions.data.size)
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(predictions.shape)
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("bce_loss: weights must be non-negative with a positive sum")
        w = w / w.sum()
    p = np.clip(predictions.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    value = -np.sum(w * (y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))
    inside = (predictions.data >= BCE_CLAMP) & (predictions.data <= 1.0 - BCE_CLAMP)

    def vjp(g):
        return (g.reshape(()) * inside * w * (-(y / p) + (1.0 - y) / (1.0 - p)),)

    return Tensor._result(np.array([value]), (predictions,), vjp, "bce")


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss._tracked:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(p) not in seen and p._tracked:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                node.grad = node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent._tracked:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in order:
        if node._vjp is not None:
            node._parents = ()
            node._vjp = None


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.lr <= 0 or self.epsilon <= 0:
            raise ValueError("lr and epsilon must be positive")
        if self.step < 0:
            raise ValueError("step must be non-negative")

    @classmethod
    def fresh(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            **hyper,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray] | None, state: AdamState):
    """One bias-corrected ADAM update, applied in place. Returns ``(params, state)``.

    ``grads`` defaults to each parameter's accumulated ``.grad``.
    """
    if grads is None:
        grads = [p.grad for p in params]
    if not (len(params) == len(grads) == len(state.first_moment) == len(state.second_moment)):
        raise ValueError("adam_step: params, grads and moments differ in length")
    for p, g, m in zip(params, grads, state.first_moment):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ValueError(f"adam_step: shape mismatch {p.shape} / {np.shape(g)} / {m.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


def finite_difference_check(
    fn: Callable[..., Tensor],
    point,
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest deviation between ``backward`` and central differences.

    ``point`` is one array or a sequence of arrays passed to ``fn`` as
    ``requires_grad`` tensors. The error is ``max|analytic - numeric|``
    divided by the largest gradient magnitude seen on either side, so it is
    scale-free and stays meaningful when individual entries are near zero.
    ``max_coords`` probes a seeded random subset of entries per array.
    """
    single = isinstance(point, np.ndarray) or np.isscalar(point)
    arrays = [np.array(point, dtype=np.float64)] if single else [np.array(p, dtype=np.float64) for p in point]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    backward(fn(*leaves))
    analytic = [leaf.grad for leaf in leaves]

    rng = np.random.default_rng(seed)
    diffs, scale = [], 0.0
    with no_grad():
        for i, base in enumerate(arrays):
            flat_idx = np.arange(base.size)
            if max_coords is not None and base.size > max_coords:
                flat_idx = np.sort(rng.choice(base.size, size=max_coords, replace=False))
            for j in flat_idx:
                coord = np.unravel_index(j, base.shape)
                vals = []
                for step in (h, -h):
                    shifted = [a.copy() for a in arrays]
                    shifted[i][coord] += step
                    vals.append(fn(*[Tensor(a) for a in shifted]).item())
                numeric = (vals[0] - vals[1]) / (2.0 * h)
                a = analytic[i][coord]
                diffs.append(abs(a - numeric))
                scale = max(scale, abs(a), abs(numeric))
    if not diffs or scale == 0.0:
        return float(max(diffs, default=0.0))
    return float(max(diffs) / scale)
