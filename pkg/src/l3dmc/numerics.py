"""Dense float64 tensors with a small reverse-mode differentiation engine.

Only the operations needed by the geometry, kernel, distillation and model
code are provided. Broadcasting follows numpy; gradients are reduced back to
the operand shape.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

MIN_NORM = 1e-15
RIDGE_LADDER = (0.0, 1e-10, 1e-8, 1e-6)
SOLVE_RTOL = 1e-8
# past this, solves keep about four significant digits; the 1e-10 rung stays
# under it for Gram matrices of up to ~100 unit-diagonal rows
COND_MAX = 1e12

_state = threading.local()


class NumericError(ArithmeticError):
    """Raised when an operation would produce NaN/Inf or a solve cannot be made."""


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array, optionally tracked for reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...], backward, op: str) -> "Tensor":
        if not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite value produced by {op}")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        track = _grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic -------------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._result(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
            "add",
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._result(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._result(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)),
            "sub",
        )

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._result(
            x * y,
            (self, other),
            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        x, y = self.data, other.data
        if np.any(y == 0):
            raise NumericError("division by zero")
        return Tensor._result(
            x / y,
            (self, other),
            lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)),
            "div",
        )

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, p: float) -> "Tensor":
        if isinstance(p, Tensor):
            raise TypeError("only constant exponents are supported")
        x = self.data
        return Tensor._result(x**p, (self,), lambda g: (g * p * x ** (p - 1),), "pow")

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __rmatmul__(self, other) -> "Tensor":
        return matmul(as_tensor(other), self)

    # -- shape ops -----------------------------------------------------------

    def __getitem__(self, idx) -> "Tensor":
        shape = self.shape

        def back(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._result(self.data[idx], (self,), back, "index")

    def reshape(self, *shape) -> "Tensor":
        old = self.shape
        return Tensor._result(
            self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),), "reshape"
        )

    @property
    def T(self) -> "Tensor":
        return Tensor._result(self.data.T, (self,), lambda g: (g.T,), "transpose")

    # -- reductions ------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._result(
            np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), back, "sum"
        )

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- gradient ----------------------------------------------------------------

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unary(x: Tensor, value: np.ndarray, deriv: np.ndarray, op: str) -> Tensor:
    return Tensor._result(value, (x,), lambda g: (g * deriv,), op)


def matmul(a, b) -> Tensor:
    """Matrix product for rank-1/rank-2 operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ValueError("matmul supports rank 1 and 2 operands only")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"shape mismatch in matmul: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def back(g):
        x2 = x if x.ndim == 2 else x[None, :]
        y2 = y if y.ndim == 2 else y[:, None]
        g2 = g.reshape(x2.shape[0], y2.shape[1])
        return ((g2 @ y2.T).reshape(x.shape), (x2.T @ g2).reshape(y.shape))

    return Tensor._result(x @ y, (a, b), back, "matmul")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by the finite check
        v = np.exp(x.data)
    return _unary(x, v, v, "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log of non-positive value")
    return _unary(x, np.log(x.data), 1.0 / x.data, "log")


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("sqrt needs strictly positive input to stay differentiable")
    v = np.sqrt(x.data)
    return _unary(x, v, 0.5 / v, "sqrt")


def tanh(x: Tensor) -> Tensor:
    v = np.tanh(x.data)
    return _unary(x, v, 1.0 - v * v, "tanh")


def atanh(x: Tensor) -> Tensor:
    u = np.clip(x.data, -1 + MIN_NORM, 1 - MIN_NORM)
    return _unary(x, np.arctanh(u), 1.0 / (1.0 - u * u), "atanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _unary(x, np.where(mask, x.data, 0.0), mask.astype(np.float64), "relu")


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values; the gradient is zero wherever clipping is active."""
    v = np.clip(x.data, lo, hi)
    inside = np.ones_like(v, dtype=bool)
    if lo is not None:
        inside &= x.data >= lo
    if hi is not None:
        inside &= x.data <= hi
    return _unary(x, v, inside.astype(np.float64), "clamp")


# tanh(x)/x and atanh(x)/x with their limits at 0; series below the switch point.
_SERIES_SWITCH = 1e-2


def tanhc(x: Tensor) -> Tensor:
    """tanh(x)/x, equal to 1 at x = 0."""
    u = x.data
    small = np.abs(u) < _SERIES_SWITCH
    safe = np.where(small, 0.5, u)
    t = np.tanh(safe)
    u2 = u * u
    v = np.where(small, 1 - u2 / 3 + 2 * u2**2 / 15 - 17 * u2**3 / 315, t / safe)
    d = np.where(
        small,
        -2 * u / 3 + 8 * u * u2 / 15 - 102 * u * u2**2 / 315,
        (safe * (1 - t * t) - t) / (safe * safe),
    )
    return _unary(x, v, d, "tanhc")


def atanhc(x: Tensor) -> Tensor:
    """atanh(x)/x, equal to 1 at x = 0. Arguments are kept below 1."""
    u = np.clip(x.data, -1 + MIN_NORM, 1 - MIN_NORM)
    small = np.abs(u) < _SERIES_SWITCH
    safe = np.where(small, 0.5, u)
    a = np.arctanh(safe)
    u2 = u * u
    v = np.where(small, 1 + u2 / 3 + u2**2 / 5 + u2**3 / 7, a / safe)
    d = np.where(
        small,
        2 * u / 3 + 4 * u * u2 / 5 + 6 * u * u2**2 / 7,
        (safe / (1 - safe * safe) - a) / (safe * safe),
    )
    return _unary(x, v, d, "atanhc")


def norm(x: Tensor, axis=-1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``. The gradient at an exact zero is taken as 0."""
    v = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    denom = np.maximum(v, MIN_NORM)
    xd = x.data

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * xd / denom,)

    out = v if keepdims else np.squeeze(v, axis=axis)
    return Tensor._result(out, (x,), back, "norm")


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    soft = e / s
    out = np.log(s) + m

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return Tensor._result(out if keepdims else np.squeeze(out, axis=axis), (x,), back, "logsumexp")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._result(
        np.stack([t.data for t in tensors], axis=axis), tuple(tensors), back, "stack"
    )


# -- symmetric positive-definite solve ------------------------------------------


@dataclass(frozen=True)
class SpdSolveReport:
    ridge_added: float
    condition_estimate: float


def _factor(K: np.ndarray, ridge: float) -> np.ndarray | None:
    try:
        L = np.linalg.cholesky(K + ridge * np.eye(K.shape[0]) if ridge else K)
    except np.linalg.LinAlgError:
        return None
    d = np.diag(L)
    if np.any(d <= 0) or not np.all(np.isfinite(L)):
        return None
    return L


def _report(L: np.ndarray, ridge: float, cond: float | None = None) -> SpdSolveReport:
    if cond is None:
        d = np.diag(L)
        cond = float((d.max() / d.min()) ** 2)
    return SpdSolveReport(ridge_added=ridge, condition_estimate=cond)


def _symmetric(K: np.ndarray) -> np.ndarray:
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {K.shape}")
    if not np.all(np.isfinite(K)):
        raise NumericError("non-finite entry in matrix to factor")
    return 0.5 * (K + K.T)


def cholesky_with_ridge(K: np.ndarray) -> tuple[np.ndarray, SpdSolveReport]:
    """Factor ``(K + ridge*I)`` with the smallest ridge on the ladder that works."""
    K = _symmetric(K)
    for ridge in RIDGE_LADDER:
        L = _factor(K, ridge)
        if L is not None:
            return L, _report(L, ridge)
    raise NumericError(f"matrix is not positive definite even with ridge {RIDGE_LADDER[-1]:g}")


def cho_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    y = solve_triangular(L, b, lower=True)
    return solve_triangular(L.T, y, lower=False)


def spd_solve(K, b) -> tuple[Tensor, SpdSolveReport]:
    """Solve ``(K + ridge*I) x = b`` for symmetric K.

    The ridge climbs ``RIDGE_LADDER`` until three things hold: the shifted
    spectrum has condition number at most ``COND_MAX``, the factorization
    succeeds, and the residual is within ``1e-8 * (1 + max|b|)``. The
    condition test uses eigenvalues, so the chosen ridge does not depend on
    the row order of K; the last rung skips it.

    Gradients flow to ``b`` (``K^{-1} g``) and, when K is tracked, to ``K``
    through the implicit-function rule ``-K^{-1} g x^T`` (symmetrized).
    """
    K, b = as_tensor(K), as_tensor(b)
    if b.ndim not in (1, 2) or b.shape[0] != K.shape[0]:
        raise ValueError(f"shape mismatch in spd_solve: {K.shape} vs {b.shape}")
    Ks = _symmetric(K.data)
    bound = SOLVE_RTOL * (1.0 + (np.max(np.abs(b.data)) if b.data.size else 0.0))
    eig = np.linalg.eigvalsh(Ks)
    lo, hi = float(eig[0]), float(eig[-1])
    last = RIDGE_LADDER[-1]
    for ridge in RIDGE_LADDER:
        cond = (hi + ridge) / (lo + ridge) if lo + ridge > 0 else math.inf
        if ridge != last and cond > COND_MAX:
            continue
        L = _factor(Ks, ridge)
        if L is None:
            continue
        x = cho_solve(L, b.data)
        resid = (Ks @ x + ridge * x) - b.data
        if resid.size == 0 or np.max(np.abs(resid)) <= bound:
            break
    else:
        raise NumericError(f"no ridge up to {last:g} gives an accurate positive-definite solve")
    report = _report(L, ridge, cond if math.isfinite(cond) else None)

    def back(g):
        gb = cho_solve(L, g)
        gb2 = gb if gb.ndim == 2 else gb[:, None]
        x2 = x if x.ndim == 2 else x[:, None]
        gk = -gb2 @ x2.T
        return (0.5 * (gk + gk.T), gb)

    return Tensor._result(x, (K, b), back, "spd_solve"), report


# -- reverse sweep ------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
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


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tracked leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls until zeroed.
    """
    if loss.data.size != 1:
        raise ValueError("backward() needs a scalar loss")
    if not loss.requires_grad:
        raise ValueError("loss is not tracked; nothing to differentiate")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- finite differences ---------------------------------------------------------------


def numerical_grad(f: Callable[..., float], arrays: Sequence[np.ndarray], h: float = 1e-4) -> list[np.ndarray]:
    """Central-difference gradient of scalar ``f(*arrays)`` w.r.t. each array."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + h
            up = f(*arrays)
            a[idx] = orig - h
            down = f(*arrays)
            a[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def grad_mismatch(analytic: np.ndarray, numeric: np.ndarray, rel: float = 1e-3, abs_: float = 1e-6) -> float:
    """Largest violation ratio of |a - n| <= max(rel*max(|a|,|n|), abs_); <= 1 means pass."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    if a.size == 0:
        return 0.0
    tol = np.maximum(rel * np.maximum(np.abs(a), np.abs(n)), abs_)
    return float(np.max(np.abs(a - n) / tol))
