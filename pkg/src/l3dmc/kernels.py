"""Gaussian RBF kernels on Euclidean space and on the Poincare ball.

The hyperbolic kernel pulls ball points back to the tangent space at the
origin with ``logmap0`` and applies the ordinary RBF there, which keeps the
kernel positive definite (the geodesic-distance RBF is not).
"""

from __future__ import annotations

from dataclasses import dataclass

from .manifold import logmap0
from .numerics import Tensor, as_tensor, exp

FAMILIES = ("euclidean-rbf", "hyperbolic-rbf")


@dataclass(frozen=True)
class KernelSpec:
    family: str = "euclidean-rbf"
    lam: float = 1.0
    c: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        if not self.lam > 0:
            raise ValueError(f"kernel bandwidth must be positive, got {self.lam}")
        if self.family == "hyperbolic-rbf" and not self.c > 0:
            raise ValueError(f"curvature must be positive, got {self.c}")

    def embed(self, z) -> Tensor:
        """Coordinates in which the kernel is a plain Euclidean RBF."""
        z = as_tensor(z)
        if self.family == "hyperbolic-rbf":
            return logmap0(z, self.c)
        return z


def _rbf(spec: KernelSpec, A: Tensor, B: Tensor) -> Tensor:
    # exact differences keep the diagonal at exp(0) = 1 and the matrix symmetric
    m, n = A.shape
    p = B.shape[0]
    diff = A.reshape(m, 1, n) - B.reshape(1, p, n)
    return exp(-spec.lam * (diff * diff).sum(axis=-1))


def _check(A: Tensor, B: Tensor) -> None:
    if A.shape[-1] != B.shape[-1]:
        raise ValueError(f"dimension mismatch: {A.shape[-1]} vs {B.shape[-1]}")


def kernel_value(spec: KernelSpec, zi, zj) -> Tensor:
    zi, zj = as_tensor(zi), as_tensor(zj)
    _check(zi, zj)
    ei, ej = spec.embed(zi), spec.embed(zj)
    d = ei - ej
    return exp(-spec.lam * (d * d).sum())


def gram_matrix(spec: KernelSpec, Z) -> Tensor:
    Z = as_tensor(Z)
    if Z.ndim != 2 or Z.shape[0] < 1:
        raise ValueError("gram_matrix expects a non-empty (m, n) array")
    E = spec.embed(Z)
    return _rbf(spec, E, E)


def cross_kernel(spec: KernelSpec, z, Z) -> Tensor:
    """Kernel values between ``z`` and every row of ``Z``.

    ``z`` may be a single vector (result shape ``(m,)``) or a batch ``(B, n)``
    (result shape ``(B, m)``).
    """
    z, Z = as_tensor(z), as_tensor(Z)
    _check(z, Z)
    single = z.ndim == 1
    zb = z.reshape(1, -1) if single else z
    K = _rbf(spec, spec.embed(zb), spec.embed(Z))
    return K.reshape(-1) if single else K
