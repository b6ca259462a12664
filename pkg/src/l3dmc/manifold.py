"""Poincare ball geometry with curvature -c.

All functions act on the last axis, so a batch of points is a ``(B, n)``
tensor. Inputs may be numpy arrays or :class:`~l3dmc.numerics.Tensor`; the
result is always a Tensor, differentiable when the inputs are tracked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import MIN_NORM, Tensor, as_tensor, atanh, atanhc, clamp, norm, tanhc

BALL_EPS = 1e-5


def _check_c(c: float) -> float:
    c = float(c)
    if not c > 0:
        raise ValueError(f"curvature parameter c must be positive, got {c}")
    return c


def _same_dim(x: Tensor, y: Tensor) -> None:
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(f"dimension mismatch: {x.shape[-1]} vs {y.shape[-1]}")


def project_to_ball(x, c: float = 1.0, eps: float = BALL_EPS) -> Tensor:
    """Radially pull points back so that sqrt(c)*|x| <= 1 - eps."""
    c = _check_c(c)
    x = as_tensor(x)
    maxnorm = (1.0 - eps) / math.sqrt(c)
    n = norm(x, keepdims=True)
    if np.all(n.data <= maxnorm):
        return x
    scale = clamp(maxnorm / clamp(n, lo=MIN_NORM), hi=1.0)
    return x * scale


def mobius_add(x, y, c: float = 1.0) -> Tensor:
    c = _check_c(c)
    x, y = as_tensor(x), as_tensor(y)
    _same_dim(x, y)
    xy = (x * y).sum(axis=-1, keepdims=True)
    x2 = (x * x).sum(axis=-1, keepdims=True)
    y2 = (y * y).sum(axis=-1, keepdims=True)
    num = (1 + 2 * c * xy + c * y2) * x + (1 - c * x2) * y
    den = 1 + 2 * c * xy + c * c * x2 * y2
    return project_to_ball(num / clamp(den, lo=MIN_NORM), c)


def geodesic_distance(x, y, c: float = 1.0) -> Tensor:
    c = _check_c(c)
    sc = math.sqrt(c)
    w = mobius_add(-as_tensor(x), y, c)
    return (2.0 / sc) * atanh(sc * norm(w))


def conformal_factor(v, c: float = 1.0, keepdims: bool = False) -> Tensor:
    c = _check_c(c)
    v = as_tensor(v)
    return 2.0 / (1 - c * (v * v).sum(axis=-1, keepdims=keepdims))


def expmap0(v, c: float = 1.0) -> Tensor:
    """Map a tangent vector at the origin into the ball."""
    c = _check_c(c)
    v = as_tensor(v)
    sc = math.sqrt(c)
    return project_to_ball(tanhc(sc * norm(v, keepdims=True)) * v, c)


def logmap0(z, c: float = 1.0) -> Tensor:
    """Map a ball point to the tangent space at the origin."""
    c = _check_c(c)
    z = as_tensor(z)
    sc = math.sqrt(c)
    return atanhc(sc * norm(z, keepdims=True)) * z


def expmap(x, v, c: float = 1.0) -> Tensor:
    """Exponential map at anchor ``x``; ``v = 0`` returns ``x``."""
    c = _check_c(c)
    x, v = as_tensor(x), as_tensor(v)
    _same_dim(x, v)
    sc = math.sqrt(c)
    half_lam = 0.5 * conformal_factor(x, c, keepdims=True)
    # tanh(sc*lam*|v|/2) * v / (sc*|v|) written through tanh(u)/u
    step = half_lam * tanhc(sc * half_lam * norm(v, keepdims=True)) * v
    return mobius_add(x, step, c)


def logmap(x, y, c: float = 1.0) -> Tensor:
    """Logarithmic map of ``y`` into the tangent space at ``x``; zero when y == x."""
    c = _check_c(c)
    x, y = as_tensor(x), as_tensor(y)
    _same_dim(x, y)
    sc = math.sqrt(c)
    w = mobius_add(-x, y, c)
    lam = conformal_factor(x, c, keepdims=True)
    return (2.0 / lam) * atanhc(sc * norm(w, keepdims=True)) * w


def product_distance(parts) -> Tensor:
    """Mixed-curvature distance: the sum of per-component distances.

    ``parts`` is an iterable of ``(x, y, c)`` with ``c = 0`` meaning a
    Euclidean factor.
    """
    total = None
    for x, y, c in parts:
        if c == 0:
            d = norm(as_tensor(x) - as_tensor(y))
        else:
            d = geodesic_distance(x, y, c)
        total = d if total is None else total + d
    if total is None:
        raise ValueError("product_distance needs at least one component")
    return total


@dataclass(frozen=True, eq=False)
class BallPoint:
    coords: Tensor
    c: float = 1.0

    def __post_init__(self):
        _check_c(self.c)
        coords = as_tensor(self.coords)
        if coords.ndim != 1:
            raise ValueError("BallPoint holds a single vector")
        if math.sqrt(self.c) * float(np.linalg.norm(coords.data)) >= 1.0:
            raise ValueError("point lies outside the open Poincare ball")
        object.__setattr__(self, "coords", coords)

    @classmethod
    def from_ambient(cls, x, c: float = 1.0) -> "BallPoint":
        return cls(project_to_ball(x, c), c)

    def _match(self, other: "BallPoint") -> None:
        if other.c != self.c:
            raise ValueError(f"curvature mismatch: {self.c} vs {other.c}")

    def __add__(self, other: "BallPoint") -> "BallPoint":
        self._match(other)
        return BallPoint(mobius_add(self.coords, other.coords, self.c), self.c)

    def __neg__(self) -> "BallPoint":
        return BallPoint(-self.coords, self.c)

    def distance(self, other: "BallPoint") -> float:
        self._match(other)
        return geodesic_distance(self.coords, other.coords, self.c).item()

    def conformal_factor(self) -> float:
        return conformal_factor(self.coords, self.c).item()

    def log(self, other: "BallPoint") -> "TangentVector":
        self._match(other)
        return TangentVector(logmap(self.coords, other.coords, self.c), self)

    def exp(self, v: "TangentVector") -> "BallPoint":
        if v.anchor.c != self.c or not np.array_equal(v.anchor.coords.data, self.coords.data):
            raise ValueError("tangent vector is anchored at a different point")
        return BallPoint(expmap(self.coords, v.coords, self.c), self.c)


@dataclass(frozen=True, eq=False)
class TangentVector:
    coords: Tensor
    anchor: BallPoint
