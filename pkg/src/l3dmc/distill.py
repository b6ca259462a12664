"""Kernel subspace distillation over Euclidean and Poincare-ball embeddings.

For a new embedding ``z`` and old embeddings ``Z = {z_1..z_m}``, the squared
RKHS distance from ``phi(z)`` to ``span{phi(z_i)}`` is

    delta(z, Z) = k(z, z) - k_zZ^T K_ZZ^{-1} k_zZ

The old side is frozen, so ``K_ZZ`` is factorized once per batch and treated
as a constant; gradients reach ``z`` only through ``k_zZ``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Protocol

import numpy as np

from .kernels import KernelSpec, cross_kernel, gram_matrix
from .manifold import expmap0
from .numerics import SpdSolveReport, Tensor, as_tensor, clamp, no_grad, spd_solve


class ProjectionHeads(Protocol):
    def project_e(self, feats) -> Tensor: ...

    def project_h(self, feats) -> Tensor: ...


BANDWIDTH_MODES = ("fixed", "median")


@dataclass(frozen=True)
class DistillConfig:
    """Weights and kernel settings for the distillation loss.

    With ``bandwidth="median"`` the kernel uses ``lambda / median squared
    distance`` of the old embeddings in the batch (measured in the kernel's
    own coordinates), so the loss keeps its resolution as features grow.
    """

    beta: float = 1.0
    lambda_e: float = 1.0
    lambda_h: float = 1.0
    c: float = 1.0
    bandwidth: str = "fixed"

    def __post_init__(self):
        if self.bandwidth not in BANDWIDTH_MODES:
            raise ValueError(f"bandwidth must be one of {BANDWIDTH_MODES}")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not (self.lambda_e > 0 and self.lambda_h > 0):
            raise ValueError("kernel bandwidths must be positive")
        if not self.c > 0:
            raise ValueError("curvature must be positive")

    @property
    def detach_old(self) -> bool:
        return True

    @property
    def euclidean_kernel(self) -> KernelSpec:
        return KernelSpec("euclidean-rbf", self.lambda_e)

    @property
    def hyperbolic_kernel(self) -> KernelSpec:
        return KernelSpec("hyperbolic-rbf", self.lambda_h, self.c)


@dataclass
class SubspaceBasis:
    """Old embeddings, their Gram matrix, and the ridge used by the latest solve.

    Rows are held in lexicographic order so that the factorization, and with
    it every rounding error, depends on the set of old embeddings and not on
    the order the batch arrived in. ``order`` maps sorted rows back to the
    caller's rows.
    """

    Z_old: np.ndarray
    spec: KernelSpec
    gram: np.ndarray = field(repr=False)
    order: np.ndarray = field(repr=False, default=None)
    report: SpdSolveReport | None = None

    def __post_init__(self):
        if self.order is None:
            self.order = np.arange(self.Z_old.shape[0])

    @property
    def gram_ridge(self) -> float:
        return self.report.ridge_added if self.report else 0.0

    @property
    def m(self) -> int:
        return self.Z_old.shape[0]

    def solve(self, rhs: Tensor) -> Tensor:
        x, self.report = spd_solve(self.gram, rhs)
        return x


def median_bandwidth(spec: KernelSpec, Z_old) -> KernelSpec:
    """Rescale ``spec.lam`` by the median pairwise squared distance of ``Z_old``."""
    with no_grad():
        E = spec.embed(np.asarray(Z_old, dtype=np.float64)).data
    m = E.shape[0]
    if m < 2:
        return spec
    iu = np.triu_indices(m, 1)
    d2 = ((E[:, None, :] - E[None, :, :]) ** 2).sum(-1)[iu]
    med = float(np.median(d2))
    if med <= MEDIAN_FLOOR:
        return spec
    return replace(spec, lam=spec.lam / med)


MEDIAN_FLOOR = 1e-12


def build_basis(Z_old, spec: KernelSpec, bandwidth: str = "fixed") -> SubspaceBasis:
    Z = np.array(as_tensor(Z_old).data, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 1:
        raise ValueError("basis needs at least one old embedding, shape (m, d)")
    if bandwidth == "median":
        spec = median_bandwidth(spec, Z)
    order = np.lexsort(Z.T[::-1])
    Z = Z[order]
    with no_grad():
        K = gram_matrix(spec, Z).data
    return SubspaceBasis(Z_old=Z, spec=spec, gram=K, order=order)


def _check_dim(z: Tensor, basis: SubspaceBasis) -> None:
    if z.shape[-1] != basis.Z_old.shape[1]:
        raise ValueError(
            f"embedding dimension {z.shape[-1]} does not match basis dimension {basis.Z_old.shape[1]}"
        )


def alpha_solve(z_new, basis: SubspaceBasis) -> Tensor:
    """Coefficients of the best approximation of phi(z) within the span.

    Shape ``(m,)`` for a single embedding, ``(B, m)`` for a batch.
    """
    z = as_tensor(z_new)
    _check_dim(z, basis)
    k = cross_kernel(basis.spec, z, basis.Z_old)
    back = np.argsort(basis.order)
    if k.ndim == 1:
        return basis.solve(k)[back]
    return basis.solve(k.T).T[:, back]


def subspace_residual(z_new, alpha, basis: SubspaceBasis) -> Tensor:
    """|phi(z) - sum_i alpha_i phi(z_i)|^2 for an arbitrary ``alpha`` (single z).

    Uses the Gram matrix with the ridge of the latest solve on its diagonal.
    """
    z = as_tensor(z_new)
    _check_dim(z, basis)
    a = as_tensor(alpha)[basis.order]
    k = cross_kernel(basis.spec, z, basis.Z_old)
    K = basis.gram + basis.gram_ridge * np.eye(basis.m)
    return 1.0 - 2.0 * (a * k).sum() + (a * (as_tensor(K) @ a)).sum()


def subspace_distance(z_new, basis: SubspaceBasis) -> Tensor:
    """Closed-form RKHS distance of phi(z) to the span of the basis.

    Returns a scalar for a single embedding, a ``(B,)`` tensor for a batch.
    """
    z = as_tensor(z_new)
    _check_dim(z, basis)
    k = cross_kernel(basis.spec, z, basis.Z_old)
    if k.ndim == 1:
        proj = (k * basis.solve(k)).sum()
    else:
        proj = (k * basis.solve(k.T).T).sum(axis=1)
    # k(z, z) = 1 for both RBF families
    return clamp(1.0 - proj, lo=0.0)


@dataclass
class KDTerms:
    loss: Tensor
    euclidean: float
    hyperbolic: float | None
    reports: dict


def kd_terms(Z_new_feat, Z_old_feat, heads: ProjectionHeads, old_heads: ProjectionHeads,
             cfg: DistillConfig) -> KDTerms:
    """Batch-level mixed-curvature distillation loss with diagnostics.

    ``heads`` belong to the live model; ``old_heads`` to the frozen snapshot
    that produced ``Z_old_feat``. The hyperbolic term is skipped when beta is 0.
    """
    Z_new_feat = as_tensor(Z_new_feat)
    old = np.asarray(as_tensor(Z_old_feat).data)
    if Z_new_feat.shape[0] != old.shape[0]:
        raise ValueError(
            f"batch size mismatch between new ({Z_new_feat.shape[0]}) and old ({old.shape[0]}) features"
        )
    if Z_new_feat.shape[0] < 1:
        raise ValueError("empty batch")

    with no_grad():
        ze_old = old_heads.project_e(old).data
    basis_e = build_basis(ze_old, cfg.euclidean_kernel, cfg.bandwidth)
    d_e = subspace_distance(heads.project_e(Z_new_feat), basis_e).mean()
    loss = d_e
    reports = {"euclidean": basis_e.report}
    hyp_value = None
    if cfg.beta > 0:
        with no_grad():
            zh_old = expmap0(old_heads.project_h(old), cfg.c).data
        basis_h = build_basis(zh_old, cfg.hyperbolic_kernel, cfg.bandwidth)
        zh_new = expmap0(heads.project_h(Z_new_feat), cfg.c)
        d_h = subspace_distance(zh_new, basis_h).mean()
        loss = loss + cfg.beta * d_h
        reports["hyperbolic"] = basis_h.report
        hyp_value = d_h.item()
    return KDTerms(loss=loss, euclidean=d_e.item(), hyperbolic=hyp_value, reports=reports)


def kd_loss(Z_new_feat, Z_old_feat, heads: ProjectionHeads, old_heads: ProjectionHeads,
            cfg: DistillConfig) -> Tensor:
    return kd_terms(Z_new_feat, Z_old_feat, heads, old_heads, cfg).loss
