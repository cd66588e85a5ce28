"""Minimal reverse-mode differentiation over 2-D numpy arrays.

Operations are recorded on the active :class:`Tape` (if any) and replayed in
reverse by :meth:`Tape.backward`. Outside a tape every op is a plain forward
computation and nothing is recorded.

    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = mean(matmul(w, w))
    >>> tape.backward(loss)
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

NORM_EPS = 1e-12
LOG_EPS = 1e-12

_DTYPE = np.float64


class DimensionError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class DomainError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for new tensors (float64 or float32)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ParameterError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def default_dtype():
    return _DTYPE


class Tensor:
    """Dense array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return stop_gradient(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by python scalars")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; nested tapes are allowed and the innermost one
    records. ``backward`` may be called once per tape.
    """

    _local = threading.local()

    def __init__(self):
        self.nodes: list[_Node] = []
        self._used = False

    @classmethod
    def active(cls) -> Tape | None:
        stack = getattr(cls._local, "stack", None)
        return stack[-1] if stack else None

    def __enter__(self) -> Tape:
        stack = getattr(self._local, "stack", None)
        if stack is None:
            stack = self._local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        self._local.stack.pop()

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        if self._used:
            raise TapeError("tape already consumed by backward(); call reset()")
        self.nodes.append(_Node(out, inputs, backward))

    def reset(self) -> None:
        self.nodes = []
        self._used = False

    def backward(self, loss: Tensor, seed_grad: np.ndarray | None = None) -> None:
        if self._used:
            raise TapeError("backward() called twice on the same tape without reset()")
        self._used = True
        if seed_grad is None:
            if loss.data.size != 1:
                raise DimensionError("backward() without seed_grad needs a scalar loss")
            seed_grad = np.ones_like(loss.data)
        # intermediate grads live here; leaf grads accumulate on the tensors
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed_grad, dtype=loss.data.dtype)}
        produced = {id(n.out) for n in self.nodes}
        if id(loss) not in produced and loss.requires_grad:
            _accumulate(loss, grads[id(loss)])
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in produced:
                    if key in grads:
                        grads[key] = grads[key] + ig
                    else:
                        grads[key] = ig
                else:
                    _accumulate(inp, ig)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    tape = Tape.active()
    out.requires_grad = requires and tape is not None
    if out.requires_grad:
        tape.record(out, inputs, backward)
    return out


def _check_2d(x: Tensor, op: str) -> None:
    if x.data.ndim != 2:
        raise DimensionError(f"{op} expects a 2-D tensor, got shape {x.shape}")


def _row_norms(x: np.ndarray, op: str) -> np.ndarray:
    norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    if np.any(norms < NORM_EPS):
        raise DegenerateInputError(f"{op}: row with norm below {NORM_EPS}")
    return norms


# ---------------------------------------------------------------- elementwise


def _reduce_like(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only row-vector / scalar broadcasting is supported
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.sum(g)
    if len(shape) == 1:
        return np.sum(g.reshape(-1, shape[0]), axis=0)
    if shape[0] == 1 and len(g.shape) == 2:
        return np.sum(g, axis=0, keepdims=True)
    if shape[1] == 1 and len(g.shape) == 2:
        return np.sum(g, axis=1, keepdims=True)
    raise DimensionError(f"cannot reduce gradient {g.shape} to {shape}")


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    big, small = (a, b) if a.size >= b.size else (b, a)
    ok = big.ndim == 2 and (
        small.shape in ((big.shape[1],), (1, big.shape[1]), (big.shape[0], 1))
    )
    if not ok:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_reduce_like(g, sa), _reduce_like(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_reduce_like(g, sa), -_reduce_like(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _reduce_like(g * bd, ad.shape), _reduce_like(g * ad, bd.shape)

    return _emit(ad * bd, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # derivative at exactly 0 is 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit(out, (x,), lambda g: (g * out,))


def log(x: Tensor, eps: float = LOG_EPS) -> Tensor:
    """Natural log with inputs clamped from below at ``eps``."""
    if np.any(x.data < 0):
        raise DomainError("log of a negative entry")
    clamped = np.maximum(x.data, eps)
    live = x.data >= eps
    return _emit(np.log(clamped), (x,), lambda g: (np.where(live, g / clamped, 0.0),))


def stop_gradient(x: Tensor) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = x.data.copy()
    out.grad = None
    out.name = x.name
    out.requires_grad = False
    return out


# ------------------------------------------------------------------ reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return _emit(np.mean(x.data), (x,), lambda g: (np.full(shape, g / n),))


def sum_rows(x: Tensor) -> Tensor:
    """Row sums of an ``m×n`` tensor, returned as shape ``(m,)``."""
    _check_2d(x, "sum_rows")
    n = x.shape[1]
    return _emit(np.sum(x.data, axis=1), (x,), lambda g: (np.repeat(g[:, None], n, axis=1),))


def _select_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    rows = np.arange(x.shape[0])
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[rows, idx] = g
        return (out,)

    return _emit(x.data[rows, idx], (x,), backward)


def max_rows(x: Tensor) -> Tensor:
    """Row maxima, shape ``(m,)``; gradient goes to the first maximal entry."""
    _check_2d(x, "max_rows")
    return _select_rows(x, np.argmax(x.data, axis=1))


def min_rows(x: Tensor) -> Tensor:
    """Row minima, shape ``(m,)``; gradient goes to the first minimal entry."""
    _check_2d(x, "min_rows")
    return _select_rows(x, np.argmin(x.data, axis=1))


# ------------------------------------------------------------------- structure


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    widths = {t.shape[1:] for t in tensors}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows: mismatched widths {sorted(widths)}")
    sizes = np.cumsum([t.shape[0] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=0))

    return _emit(np.concatenate([t.data for t in tensors], axis=0), tuple(tensors), backward)


def take_cols(x: Tensor, cols: Sequence[int]) -> Tensor:
    _check_2d(x, "take_cols")
    cols = np.asarray(cols, dtype=np.int64)
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, (slice(None), cols), g)
        return (out,)

    return _emit(x.data[:, cols], (x,), backward)


def transpose(x: Tensor) -> Tensor:
    _check_2d(x, "transpose")
    return _emit(x.data.T.copy(), (x,), lambda g: (g.T,))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d(a, "matmul")
    _check_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def l2_normalize(x: Tensor) -> Tensor:
    """Scale every row to unit Euclidean norm."""
    _check_2d(x, "l2_normalize")
    norms = _row_norms(x.data, "l2_normalize")
    y = x.data / norms

    def backward(g):
        return ((g - y * np.sum(g * y, axis=1, keepdims=True)) / norms,)

    return _emit(y, (x,), backward)


def cosine_sim_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Entry ``(i, j)`` is the cosine of the angle between ``a[i]`` and ``b[j]``."""
    _check_2d(a, "cosine_sim_matrix")
    _check_2d(b, "cosine_sim_matrix")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"cosine_sim_matrix: widths differ, {a.shape} vs {b.shape}")
    return matmul(l2_normalize(a), transpose(l2_normalize(b)))


def rowwise_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of index-aligned rows, shape ``(m,)``."""
    if a.shape != b.shape:
        raise DimensionError(f"rowwise_cosine: shapes differ, {a.shape} vs {b.shape}")
    return sum_rows(mul(l2_normalize(a), l2_normalize(b)))


# ------------------------------------------------------------------- softmax


def _check_temperature(t: float) -> None:
    if not t > 0:
        raise ParameterError(f"temperature must be positive, got {t}")


def log_softmax_rows(s: Tensor, temperature: float = 1.0) -> Tensor:
    _check_2d(s, "log_softmax_rows")
    _check_temperature(temperature)
    z = s.data / temperature
    z = z - np.max(z, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return ((g - p * np.sum(g, axis=1, keepdims=True)) / temperature,)

    return _emit(out, (s,), backward)


def softmax_rows(s: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax of ``s / temperature`` (max-subtracted)."""
    _check_2d(s, "softmax_rows")
    _check_temperature(temperature)
    z = s.data / temperature
    e = np.exp(z - np.max(z, axis=1, keepdims=True))
    p = e / np.sum(e, axis=1, keepdims=True)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=1, keepdims=True)) / temperature,)

    return _emit(p, (s,), backward)


def cross_entropy_rows(target: Tensor, pred: Tensor) -> Tensor:
    """Mean over rows of ``-sum_k target * log(pred)``; ``target`` gets no gradient."""
    if target.shape != pred.shape:
        raise DimensionError(f"cross_entropy_rows: shapes differ, {target.shape} vs {pred.shape}")
    if np.any(target.data < 0) or np.any(pred.data < 0):
        raise DomainError("cross_entropy_rows: negative probability")
    t = stop_gradient(target)
    return mul(mean(sum_rows(mul(t, log(pred)))), -1.0)
