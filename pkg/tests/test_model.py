import math

import numpy as np
import pytest

from l3dmc.model import (
    Architecture,
    L3Model,
    cross_entropy,
    load_checkpoint,
    read_checkpoint_header,
    save_checkpoint,
)
from l3dmc.numerics import Tensor, backward, grad_mismatch, no_grad, numerical_grad

ARCH = Architecture(5, feat_dim=6, proj_dim=3, hidden=(7,), nonlinearity="tanh")


def test_zero_linear_backbone_gives_zero_features(rng):
    m = L3Model(Architecture(4, feat_dim=3, hidden=(5,), nonlinearity="identity"))
    m.load_state_dict({k: np.zeros_like(v) for k, v in m.state_dict().items()})
    assert np.array_equal(m.forward_features(rng.normal(size=(3, 4))).data, np.zeros((3, 3)))


def test_rows_are_independent(rng):
    m = L3Model(ARCH, seed=1)
    X = rng.normal(size=(3, 5))
    one, many = m.forward_features(X[1:2]).data[0], m.forward_features(X).data[1]
    # BLAS may pick a different kernel for one row, so allow a few ulps
    assert np.allclose(one, many, rtol=4 * np.finfo(float).eps, atol=4 * np.finfo(float).eps)


def test_same_seed_same_features(rng):
    X = rng.normal(size=(4, 5))
    a = L3Model(ARCH, num_classes=3, seed=9)
    b = L3Model(ARCH, num_classes=3, seed=9)
    assert np.array_equal(a.forward_features(X).data, b.forward_features(X).data)
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != L3Model(ARCH, num_classes=3, seed=10).fingerprint()


def test_forward_matches_manual_composition(rng):
    m = L3Model(ARCH, num_classes=4, seed=2)
    X = rng.normal(size=(3, 5))
    s = m.state_dict()
    h = np.tanh(X @ s["backbone.0.weight"] + s["backbone.0.bias"])
    f = h @ s["backbone.1.weight"] + s["backbone.1.bias"]
    assert np.allclose(m.forward_features(X).data, f, atol=1e-14)
    logits = f @ s["classifier.weight"] + s["classifier.bias"]
    assert np.allclose(m.forward_logits(X).data, logits, atol=1e-14)
    pe = np.maximum(f @ s["head_e.0.weight"] + s["head_e.0.bias"], 0) @ s["head_e.1.weight"] + s["head_e.1.bias"]
    assert np.allclose(m.project_e(f).data, pe, atol=1e-14)


def test_classifier_shapes_and_degenerate_weights(rng):
    m = L3Model(ARCH, num_classes=1)
    X = rng.normal(size=(4, 5))
    assert m.forward_logits(X).shape == (4, 1)
    m.expand_classifier(3)
    state = m.state_dict()
    state["classifier.weight"] = np.zeros_like(state["classifier.weight"])
    m.load_state_dict(state)
    out = m.forward_logits(X).data
    assert np.array_equal(out, np.tile(state["classifier.bias"], (4, 1)))


def test_input_shape_checked():
    with pytest.raises(ValueError, match="expected input"):
        L3Model(ARCH).forward_features(np.zeros((2, 4)))


def test_architecture_validation():
    with pytest.raises(ValueError):
        Architecture(3, nonlinearity="gelu")
    with pytest.raises(ValueError):
        Architecture(3, feat_dim=0)


class TestCrossEntropy:
    def test_uniform(self):
        assert cross_entropy(np.zeros((2, 4)), [0, 3]).item() == pytest.approx(math.log(4), abs=1e-12)

    def test_saturated(self):
        logits = np.zeros((1, 3))
        logits[0, 1] = 1000.0
        assert cross_entropy(logits, [1]).item() == pytest.approx(0.0, abs=1e-12)

    def test_naive_oracle_and_gradient(self, rng):
        z = rng.normal(size=(5, 4))
        y = rng.integers(0, 4, 5)

        def naive(a):
            p = np.exp(a) / np.exp(a).sum(axis=1, keepdims=True)
            return float(-np.mean(np.log(p[np.arange(5), y])))

        t = Tensor(z, requires_grad=True)
        loss = cross_entropy(t, y)
        assert loss.item() == pytest.approx(naive(z), abs=1e-10)
        backward(loss)
        (ng,) = numerical_grad(naive, [z])
        assert grad_mismatch(t.grad, ng) <= 1

    def test_label_range(self):
        with pytest.raises(ValueError, match="out of range"):
            cross_entropy(np.zeros((2, 3)), [0, 3])


class TestSnapshot:
    def test_unchanged_by_training(self, rng):
        m = L3Model(ARCH, num_classes=2, seed=3)
        X = rng.normal(size=(6, 5))
        y = rng.integers(0, 2, 6)
        snap = m.snapshot()
        before = snap.forward_logits(X).data.copy()
        assert np.array_equal(before, m.forward_logits(X).data)
        for _ in range(10):
            m.zero_grad()
            backward(cross_entropy(m.forward_logits(X), y))
            for p in m.parameters():
                if p.grad is not None:
                    p.data = p.data - 0.1 * p.grad
        assert np.array_equal(snap.forward_logits(X).data, before)
        assert not np.array_equal(m.forward_logits(X).data, before)

    def test_restore_round_trip(self, rng):
        m = L3Model(ARCH, num_classes=2, seed=4)
        X = rng.normal(size=(3, 5))
        again = m.snapshot().restore().snapshot()
        assert np.array_equal(again.forward_logits(X).data, m.forward_logits(X).data)

    def test_read_only_and_untracked(self, rng):
        snap = L3Model(ARCH, num_classes=2).snapshot()
        with pytest.raises(TypeError):
            snap.expand_classifier(3)
        with pytest.raises(ValueError):
            snap["backbone.0.weight"].data[0, 0] = 1.0
        out = snap.forward_features(rng.normal(size=(2, 5)))
        assert not out.requires_grad


class TestExpand:
    def test_preserves_old_logits(self, rng):
        m = L3Model(ARCH, num_classes=4, seed=5)
        X = rng.normal(size=(3, 5))
        before = m.forward_logits(X).data
        m.expand_classifier(6)
        assert np.array_equal(m.forward_logits(X).data[:, :4], before)

    def test_must_grow(self):
        m = L3Model(ARCH, num_classes=4)
        with pytest.raises(ValueError, match="grow"):
            m.expand_classifier(4)

    def test_repeated(self):
        m = L3Model(ARCH, num_classes=2, seed=6)
        W, b = m["classifier.weight"].data.copy(), m["classifier.bias"].data.copy()
        m.expand_classifier(4)
        m.expand_classifier(8)
        assert np.array_equal(m["classifier.weight"].data[:, :2], W)
        assert np.array_equal(m["classifier.bias"].data[:2], b)
        assert m.num_classes == 8


def test_full_model_gradient(rng):
    m = L3Model(ARCH, num_classes=3, seed=7)
    X = rng.normal(size=(4, 5))
    y = np.array([0, 2, 1, 2])
    m.zero_grad()
    backward(cross_entropy(m.forward_logits(X), y))
    for name, p in m.named_parameters():
        if p.grad is None:
            continue
        base = p.data.copy()

        def f(a, p=p):
            p.data = a
            with no_grad():
                return cross_entropy(m.forward_logits(X), y).item()

        (ng,) = numerical_grad(f, [base])
        p.data = base
        assert grad_mismatch(p.grad, ng) <= 1, name


class TestCheckpoint:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        m = L3Model(ARCH, num_classes=2, seed=8)
        m.expand_classifier(5)
        path = tmp_path / "m.ckpt"
        save_checkpoint(m, path)
        back = load_checkpoint(path)
        assert back.fingerprint() == m.fingerprint()
        assert list(back.state_dict()) == list(m.state_dict())
        header = read_checkpoint_header(path)
        assert header["num_classes"] == 5
        assert header["architecture"]["hidden"] == [7]
        path2 = tmp_path / "again.ckpt"
        save_checkpoint(back, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_rejects_corruption(self, tmp_path):
        m = L3Model(ARCH, num_classes=2)
        path = tmp_path / "m.ckpt"
        save_checkpoint(m, path)
        blob = path.read_bytes()
        (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + blob[8:])
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(tmp_path / "bad.ckpt")
        (tmp_path / "short.ckpt").write_bytes(blob[:-8])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(tmp_path / "short.ckpt")
        (tmp_path / "long.ckpt").write_bytes(blob + b"\0")
        with pytest.raises(ValueError, match="trailing"):
            load_checkpoint(tmp_path / "long.ckpt")
