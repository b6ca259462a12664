import math

import numpy as np
import pytest

from l3dmc.distill import (
    DistillConfig,
    alpha_solve,
    build_basis,
    kd_loss,
    kd_terms,
    subspace_distance,
    subspace_residual,
)
from l3dmc.kernels import KernelSpec, kernel_value
from l3dmc.manifold import expmap0
from l3dmc.model import Architecture, L3Model
from l3dmc.numerics import grad_mismatch, no_grad, numerical_grad

EUC = KernelSpec("euclidean-rbf", 1.0)
HYP = KernelSpec("hyperbolic-rbf", 1.0, 1.0)


def ball_points(rng, m, n):
    v = rng.normal(size=(m, n))
    return v / np.linalg.norm(v, axis=1, keepdims=True) * rng.uniform(0, 0.9, (m, 1))


def points(rng, spec, m, n):
    return ball_points(rng, m, n) if spec.family == "hyperbolic-rbf" else rng.normal(size=(m, n))


def explicit_gram(spec, Z):
    return np.array([[kernel_value(spec, a, b).item() for b in Z] for a in Z])


def quadratic(K, k, alpha):
    """|phi(z) - sum_i alpha_i phi(z_i)|^2 expanded with k(z, z) = 1."""
    return 1.0 - 2.0 * alpha @ k + alpha @ K @ alpha


@pytest.mark.parametrize("spec", [EUC, HYP])
def test_member_of_basis_has_zero_distance(rng, spec):
    Z = points(rng, spec, 4, 3)
    basis = build_basis(Z, spec)
    assert subspace_distance(Z[1], basis).item() <= 1e-10
    alpha = alpha_solve(Z[1], basis).data
    assert basis.gram_ridge == 0.0
    assert np.allclose(alpha, [0, 1, 0, 0], atol=1e-8)


@pytest.mark.parametrize("spec", [EUC, HYP])
def test_single_element_basis(rng, spec):
    Z = points(rng, spec, 1, 3)
    z = points(rng, spec, 1, 3)[0]
    k = kernel_value(spec, z, Z[0]).item()
    basis = build_basis(Z, spec)
    assert subspace_distance(z, basis).item() == pytest.approx(1 - k * k, abs=1e-12)
    assert alpha_solve(z, basis).data == pytest.approx([k], abs=1e-12)


@pytest.mark.parametrize("spec", [EUC, HYP])
def test_closed_form_is_the_minimum(rng, spec):
    for _ in range(10):
        Z = points(rng, spec, 4, 3)
        z = points(rng, spec, 1, 3)[0]
        basis = build_basis(Z, spec)
        delta = subspace_distance(z, basis).item()
        K = explicit_gram(spec, Z)
        k = np.array([kernel_value(spec, z, b).item() for b in Z])
        alpha = np.linalg.solve(K, k)
        assert delta == pytest.approx(quadratic(K, k, alpha), abs=1e-9)
        assert subspace_residual(z, alpha_solve(z, basis), basis).item() == pytest.approx(delta, abs=1e-10)
        for a in rng.normal(size=(200, 4)):
            assert delta <= quadratic(K, k, a) + 1e-12


def test_batch_matches_single(rng):
    Z = rng.normal(size=(5, 3))
    zs = rng.normal(size=(3, 3))
    basis = build_basis(Z, EUC)
    batch = subspace_distance(zs, basis).data
    single = [subspace_distance(z, basis).item() for z in zs]
    assert np.allclose(batch, single, atol=1e-14)
    assert alpha_solve(zs, basis).shape == (3, 5)


def test_growing_basis_never_increases_distance(rng):
    Z = rng.normal(size=(6, 3))
    z = rng.normal(size=3)
    prev = math.inf
    for m in range(1, 7):
        d = subspace_distance(z, build_basis(Z[:m], EUC)).item()
        assert d <= prev + 1e-12
        prev = d


def test_permutation_invariance(rng):
    Z = ball_points(rng, 5, 3)
    z = ball_points(rng, 1, 3)[0]
    a = subspace_distance(z, build_basis(Z, HYP)).item()
    b = subspace_distance(z, build_basis(Z[rng.permutation(5)], HYP)).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_duplicate_basis_rows_use_ridge(rng):
    Z = rng.normal(size=(1, 3)).repeat(2, axis=0)
    basis = build_basis(Z, EUC)
    d = subspace_distance(Z[0] + 0.1, basis).item()
    assert basis.gram_ridge > 0
    single = 1 - kernel_value(EUC, Z[0] + 0.1, Z[0]).item() ** 2
    assert d == pytest.approx(single, abs=1e-6)


def test_median_bandwidth_is_scale_free(rng):
    Z = rng.normal(size=(6, 3))
    z = rng.normal(size=3)
    a = subspace_distance(z, build_basis(Z, EUC, "median")).item()
    b = subspace_distance(10 * z, build_basis(10 * Z, EUC, "median")).item()
    assert a == pytest.approx(b, abs=1e-10)
    assert 0.0 < a < 1.0


def test_dimension_mismatch(rng):
    basis = build_basis(rng.normal(size=(3, 4)), EUC)
    with pytest.raises(ValueError, match="dimension"):
        subspace_distance(np.zeros(3), basis)


# -- full loss on a model --------------------------------------------------------------


def tiny_model(seed, in_dim=5):
    return L3Model(Architecture(in_dim, feat_dim=6, proj_dim=4, hidden=(8,), nonlinearity="tanh"), seed=seed)


def test_self_distillation_is_zero(rng):
    for seed in range(5):
        model = tiny_model(seed)
        old = model.snapshot()
        X = rng.normal(size=(int(rng.integers(1, 9)), 5))
        cfg = DistillConfig(beta=1.0)
        terms = kd_terms(model.forward_features(X), old.forward_features(X), model, old, cfg)
        assert terms.loss.item() <= 1e-8
        assert terms.hyperbolic is not None


def test_beta_zero_is_euclidean_term(rng):
    new, old = tiny_model(1), tiny_model(2).snapshot()
    X = rng.normal(size=(4, 5))
    f_new, f_old = new.forward_features(X), old.forward_features(X)
    t0 = kd_terms(f_new, f_old, new, old, DistillConfig(beta=0.0))
    t1 = kd_terms(f_new, f_old, new, old, DistillConfig(beta=1.0))
    assert t0.hyperbolic is None
    assert t0.loss.item() == t0.euclidean == pytest.approx(t1.euclidean, abs=1e-15)


def test_loss_is_mean_of_per_sample_distances(rng):
    new, old = tiny_model(3), tiny_model(4).snapshot()
    X = rng.normal(size=(4, 5))
    cfg = DistillConfig(beta=0.7, lambda_e=0.5, lambda_h=2.0, c=1.5)
    with no_grad():
        loss = kd_loss(new.forward_features(X), old.forward_features(X), new, old, cfg).item()
        ze_old = old.project_e(old.forward_features(X)).data
        zh_old = expmap0(old.project_h(old.forward_features(X)), 1.5).data
        ze = new.project_e(new.forward_features(X)).data
        zh = expmap0(new.project_h(new.forward_features(X)), 1.5).data
    be, bh = build_basis(ze_old, cfg.euclidean_kernel), build_basis(zh_old, cfg.hyperbolic_kernel)
    de = [subspace_distance(z, be).item() for z in ze]
    dh = [subspace_distance(z, bh).item() for z in zh]
    # batched and per-sample solves differ only by round-off
    assert loss == pytest.approx(np.mean(de) + 0.7 * np.mean(dh), abs=1e-10)


def test_batch_size_mismatch(rng):
    m = tiny_model(0)
    with pytest.raises(ValueError, match="batch size"):
        kd_loss(m.forward_features(rng.normal(size=(3, 5))), m.forward_features(rng.normal(size=(2, 5))),
                m, m.snapshot(), DistillConfig())


@pytest.mark.parametrize("bandwidth", ["fixed", "median"])
def test_kd_gradient_matches_finite_differences(rng, bandwidth):
    new, old = tiny_model(5), tiny_model(6).snapshot()
    X = rng.normal(size=(4, 5))
    cfg = DistillConfig(beta=1.0, lambda_e=0.5, lambda_h=0.5, bandwidth=bandwidth)
    f_old = old.forward_features(X)
    new.zero_grad()
    kd_loss(new.forward_features(X), f_old, new, old, cfg).backward()
    for name, p in new.named_parameters():
        if p.grad is None:
            continue
        base = p.data.copy()

        def f(a, p=p):
            p.data = a
            with no_grad():
                return kd_loss(new.forward_features(X), f_old, new, old, cfg).item()

        (ng,) = numerical_grad(f, [base])
        p.data = base
        assert grad_mismatch(p.grad, ng) <= 1, name


def test_config_validation():
    with pytest.raises(ValueError):
        DistillConfig(beta=-1)
    with pytest.raises(ValueError):
        DistillConfig(lambda_e=0)
    with pytest.raises(ValueError):
        DistillConfig(c=0)
    with pytest.raises(ValueError):
        DistillConfig(bandwidth="auto")
    assert DistillConfig().detach_old


def test_ridged_solve_adds_exactly_the_penalty(rng):
    # eight nearly coincident points: the ladder must regularize, and the closed
    # form then equals the quadratic plus ridge * |alpha|^2
    Z = rng.normal(size=(1, 2)) + 1e-6 * rng.normal(size=(8, 2))
    z = rng.normal(size=2)
    basis = build_basis(Z, EUC)
    delta = subspace_distance(z, basis).item()
    alpha = alpha_solve(z, basis).data
    assert basis.gram_ridge > 0
    K = explicit_gram(EUC, Z)
    k = np.array([kernel_value(EUC, z, b).item() for b in Z])
    assert delta == pytest.approx(quadratic(K, k, alpha) + basis.gram_ridge * alpha @ alpha, abs=1e-12)


def test_basis_row_order_does_not_change_a_single_bit(rng):
    # 30 points in 2-D give a badly conditioned Gram, where round-off would show
    Z = rng.normal(size=(30, 2))
    zs = rng.normal(size=(5, 2))
    a = build_basis(Z, EUC)
    b = build_basis(Z[rng.permutation(30)], EUC)
    assert np.array_equal(subspace_distance(zs, a).data, subspace_distance(zs, b).data)
    assert a.report.condition_estimate > 1e6
