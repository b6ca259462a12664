"""Feed-forward continual-learning model: backbone, two projection heads, classifier."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .numerics import Tensor, as_tensor, logsumexp, no_grad, relu, tanh

NONLINEARITIES = {"relu": relu, "tanh": tanh, "identity": lambda x: x}

CHECKPOINT_MAGIC = b"L3DMCCKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    in_dim: int
    feat_dim: int = 32
    proj_dim: int = 16
    hidden: tuple = (64, 64)
    nonlinearity: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if min(self.in_dim, self.feat_dim, self.proj_dim, *self.hidden) < 1:
            raise ValueError("all layer widths must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def _uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class L3Model:
    """Backbone ``h_feat``, heads ``g_e``/``g_h`` and a growing linear classifier.

    Weights are stored as ``(fan_in, fan_out)`` so a layer is ``x @ W + b``.
    """

    def __init__(self, arch: Architecture, num_classes: int = 0, seed: int = 0):
        self.arch = arch
        self.rng_seed = int(seed)
        rng = np.random.default_rng(self.rng_seed)
        self._params: dict[str, Tensor] = {}
        widths = [arch.in_dim, *arch.hidden, arch.feat_dim]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            self._add(f"backbone.{i}", rng, a, b)
        for head in ("head_e", "head_h"):
            self._add(f"{head}.0", rng, arch.feat_dim, arch.proj_dim)
            self._add(f"{head}.1", rng, arch.proj_dim, arch.proj_dim)
        self._params["classifier.weight"] = Tensor(np.zeros((arch.feat_dim, 0)), requires_grad=True)
        self._params["classifier.bias"] = Tensor(np.zeros(0), requires_grad=True)
        if num_classes:
            self.expand_classifier(num_classes)

    def _add(self, name: str, rng, fan_in: int, fan_out: int) -> None:
        self._params[f"{name}.weight"] = Tensor(_uniform_init(rng, fan_in, (fan_in, fan_out)), requires_grad=True)
        self._params[f"{name}.bias"] = Tensor(_uniform_init(rng, fan_in, (fan_out,)), requires_grad=True)

    # -- parameters --------------------------------------------------------------

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    @property
    def num_classes(self) -> int:
        return self._params["classifier.bias"].shape[0]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if list(state) != list(self._params):
            raise ValueError("parameter names do not match this architecture")
        for k, v in state.items():
            if np.shape(v) != self._params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {np.shape(v)} vs {self._params[k].shape}")
        for k, v in state.items():
            self._params[k] = Tensor(np.array(v, dtype=np.float64), requires_grad=self._trainable)

    _trainable = True

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, p in self._params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def expand_classifier(self, new_class_count: int) -> None:
        """Grow the classifier; existing columns are kept bit-for-bit."""
        old = self.num_classes
        if new_class_count <= old:
            raise ValueError(f"classifier can only grow: {old} -> {new_class_count}")
        D = self.arch.feat_dim
        rng = np.random.default_rng([self.rng_seed, old, new_class_count])
        extra = new_class_count - old
        W = np.concatenate([self._params["classifier.weight"].data, _uniform_init(rng, D, (D, extra))], axis=1)
        b = np.concatenate([self._params["classifier.bias"].data, _uniform_init(rng, D, (extra,))])
        self._params["classifier.weight"] = Tensor(W, requires_grad=self._trainable)
        self._params["classifier.bias"] = Tensor(b, requires_grad=self._trainable)

    # -- forward -------------------------------------------------------------------

    def _affine(self, name: str, x: Tensor) -> Tensor:
        return x @ self._params[f"{name}.weight"] + self._params[f"{name}.bias"]

    def _check_input(self, X) -> Tensor:
        X = as_tensor(X)
        if X.ndim != 2 or X.shape[1] != self.arch.in_dim:
            raise ValueError(f"expected input of shape (B, {self.arch.in_dim}), got {X.shape}")
        return X

    def forward_features(self, X) -> Tensor:
        h = self._check_input(X)
        act = NONLINEARITIES[self.arch.nonlinearity]
        n_layers = len(self.arch.hidden) + 1
        for i in range(n_layers):
            h = self._affine(f"backbone.{i}", h)
            if i < n_layers - 1:
                h = act(h)
        return h

    def _head(self, name: str, feats) -> Tensor:
        return self._affine(f"{name}.1", relu(self._affine(f"{name}.0", as_tensor(feats))))

    def project_e(self, feats) -> Tensor:
        return self._head("head_e", feats)

    def project_h(self, feats) -> Tensor:
        """Hyperbolic head output, read as a tangent vector at the origin."""
        return self._head("head_h", feats)

    def classify(self, feats) -> Tensor:
        return self._affine("classifier", as_tensor(feats))

    def forward_logits(self, X) -> Tensor:
        return self.classify(self.forward_features(X))

    # -- snapshots -----------------------------------------------------------------

    def snapshot(self) -> "ModelSnapshot":
        return ModelSnapshot(self)

    def copy(self) -> "L3Model":
        clone = L3Model.__new__(L3Model)
        clone.arch = self.arch
        clone.rng_seed = self.rng_seed
        clone._params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self._params.items()}
        return clone


class ModelSnapshot(L3Model):
    """Frozen parameter copy. Forward passes through it are never tracked."""

    _trainable = False

    def __init__(self, model: L3Model):
        self.arch = model.arch
        self.rng_seed = model.rng_seed
        self._params = {}
        for k, v in model._params.items():
            arr = v.data.copy()
            arr.setflags(write=False)
            t = Tensor(arr)
            t.data = arr  # Tensor() copies; keep the read-only array
            self._params[k] = t

    def expand_classifier(self, new_class_count: int) -> None:
        raise TypeError("snapshots are immutable")

    def load_state_dict(self, state) -> None:
        raise TypeError("snapshots are immutable")

    def _run(self, fn, *args) -> Tensor:
        with no_grad():
            return fn(*args)

    def forward_features(self, X) -> Tensor:
        return self._run(super().forward_features, X)

    def project_e(self, feats) -> Tensor:
        return self._run(super().project_e, feats)

    def project_h(self, feats) -> Tensor:
        return self._run(super().project_h, feats)

    def classify(self, feats) -> Tensor:
        return self._run(super().classify, feats)

    def snapshot(self) -> "ModelSnapshot":
        return self

    def restore(self) -> L3Model:
        return L3Model.copy(self)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"expected {B} labels, got shape {labels.shape}")
    if B and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"label out of range for {C} classes")
    picked = logits[np.arange(B), labels]
    return (logsumexp(logits, axis=1) - picked).mean()


# -- checkpoints ---------------------------------------------------------------------


def _checkpoint_header(model: L3Model) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "architecture": model.arch.to_dict(),
        "num_classes": model.num_classes,
        "rng_seed": model.rng_seed,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in model.named_parameters()],
    }


def save_checkpoint(model: L3Model, path) -> None:
    """Write a checkpoint; identical parameters give identical bytes."""
    header = json.dumps(_checkpoint_header(model), sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in model.parameters())
    blob = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)) + header + body
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)[0]


def _read_header(fh) -> tuple[dict, int]:
    magic = fh.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise ValueError("not an l3dmc checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", fh.read(8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    return json.loads(fh.read(hlen).decode()), version


def load_checkpoint(path) -> L3Model:
    with open(path, "rb") as fh:
        header, _ = _read_header(fh)
        arch_d = dict(header["architecture"])
        arch = Architecture(**arch_d)
        model = L3Model(arch, seed=header["rng_seed"])
        if header["num_classes"]:
            model.expand_classifier(header["num_classes"])
        state = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape))
            raw = fh.read(8 * n)
            if len(raw) != 8 * n:
                raise ValueError(f"truncated checkpoint while reading {entry['name']}")
            state[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        if fh.read(1):
            raise ValueError("trailing bytes after checkpoint payload")
    model.load_state_dict(state)
    return model
