"""Labeled datasets: CSV ingestion, a binary flat-vector format, synthetic generators."""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field

import numpy as np

BINARY_MAGIC = b"L3DS"
BINARY_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    class_names: list[str] | None = None
    normalization: dict = field(default_factory=lambda: {"kind": "none"})

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] < 1:
            raise DatasetError("dataset needs at least one sample, X of shape (N, in)")
        if self.y.shape != (self.X.shape[0],):
            raise DatasetError("labels must be a vector with one entry per row of X")
        if not np.all(np.isfinite(self.X)):
            raise DatasetError("features must be finite")
        present = np.unique(self.y)
        if present[0] != 0 or present[-1] != len(present) - 1:
            raise DatasetError("labels must form a contiguous range 0..C-1")
        self.X.setflags(write=False)
        self.y.setflags(write=False)

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1

    @property
    def in_dim(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return self.X.shape[0]

    def subset(self, idx) -> "LabeledDataset":
        """Rows ``idx``; labels are kept as-is, so they need not stay contiguous."""
        out = LabeledDataset.__new__(LabeledDataset)
        out.X, out.y = self.X[idx], self.y[idx]
        out.class_names, out.normalization = self.class_names, self.normalization
        return out


def standardize(X: np.ndarray) -> tuple[np.ndarray, dict]:
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    scale = np.where(std > 0, std, 1.0)
    return (X - mean) / scale, {
        "kind": "per-feature-standardize",
        "mean": mean.tolist(),
        "scale": scale.tolist(),
    }


def load_csv(path, label_column: str, normalize: str = "none") -> LabeledDataset:
    """Read a headered CSV; labels are remapped to dense ids in sorted order."""
    if normalize not in ("none", "per-feature-standardize"):
        raise DatasetError(f"unknown normalization {normalize!r}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if label_column not in header:
            raise DatasetError(f"{path}: label column {label_column!r} not in header")
        li = header.index(label_column)
        rows, labels = [], []
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            feats = []
            for j, cell in enumerate(row):
                if j == li:
                    continue
                try:
                    feats.append(float(cell))
                except ValueError:
                    raise DatasetError(
                        f"{path}:{lineno}: non-numeric value {cell!r} in column {header[j]!r}"
                    ) from None
            rows.append(feats)
            labels.append(row[li].strip())
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    names = sorted(set(labels), key=_label_sort_key)
    mapping = {name: i for i, name in enumerate(names)}
    X = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise DatasetError(f"{path}: non-finite feature value")
    norm = {"kind": "none"}
    if normalize == "per-feature-standardize":
        X, norm = standardize(X)
    return LabeledDataset(X, np.array([mapping[l] for l in labels]), names, norm)


def write_csv(ds: LabeledDataset, path, label_column: str = "label") -> None:
    """Headered CSV with features ``x0..x{in-1}`` and the label column last."""
    header = [f"x{j}" for j in range(ds.in_dim)] + [label_column]
    names = ds.class_names
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row, label in zip(ds.X, ds.y):
            w.writerow([repr(float(v)) for v in row] + [names[label] if names else int(label)])
    os.replace(tmp, path)


def _label_sort_key(label: str):
    # numeric labels sort numerically, everything else lexically after them
    try:
        return (0, float(label), "")
    except ValueError:
        return (1, 0.0, label)


def write_binary(ds: LabeledDataset, path) -> None:
    """Magic, version, N, in, C (uint32 LE), then float64 LE features and int32 LE labels."""
    N, d = ds.X.shape
    blob = (
        BINARY_MAGIC
        + struct.pack("<IIII", BINARY_VERSION, N, d, ds.num_classes)
        + np.ascontiguousarray(ds.X, dtype="<f8").tobytes()
        + np.ascontiguousarray(ds.y, dtype="<i4").tobytes()
    )
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_binary(path) -> LabeledDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != BINARY_MAGIC:
        raise DatasetError(f"{path}: bad magic bytes")
    version, N, d, C = struct.unpack_from("<IIII", blob, 4)
    if version != BINARY_VERSION:
        raise DatasetError(f"{path}: unsupported version {version}")
    off = 20
    need = off + 8 * N * d + 4 * N
    if len(blob) != need:
        raise DatasetError(f"{path}: expected {need} bytes, found {len(blob)}")
    X = np.frombuffer(blob, dtype="<f8", count=N * d, offset=off).reshape(N, d).astype(np.float64)
    y = np.frombuffer(blob, dtype="<i4", count=N, offset=off + 8 * N * d).astype(np.int64)
    ds = LabeledDataset(X, y)
    if ds.num_classes != C:
        raise DatasetError(f"{path}: header says {C} classes, labels give {ds.num_classes}")
    return ds


def make_blobs(num_classes: int, per_class: int, dim: int, spread: float, seed: int) -> LabeledDataset:
    """Isotropic Gaussian classes around seeded unit-norm centers."""
    if min(num_classes, per_class, dim) < 1 or spread < 0:
        raise DatasetError("num_classes, per_class and dim must be positive; spread >= 0")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    y = np.repeat(np.arange(num_classes), per_class)
    X = centers[y] + spread * rng.standard_normal((len(y), dim))
    return LabeledDataset(X, y)


def make_tree_data(branching: int, depth: int, per_leaf: int, dim: int, noise: float,
                   seed: int, decay: float = 0.5) -> LabeledDataset:
    """Leaf classes of a random tree of feature offsets.

    Each node adds a Gaussian offset to its parent's position, shrinking by
    ``decay`` per level, so siblings share most of their path from the root.
    Labels are leaf ids in depth-first order.
    """
    if min(branching, depth, per_leaf, dim) < 1 or noise < 0:
        raise DatasetError("branching, depth, per_leaf and dim must be positive; noise >= 0")
    rng = np.random.default_rng(seed)
    level = np.zeros((1, dim))
    scale = 1.0
    for _ in range(depth):
        offsets = rng.standard_normal((level.shape[0], branching, dim)) * (scale / np.sqrt(dim))
        level = (level[:, None, :] + offsets).reshape(-1, dim)
        scale *= decay
    y = np.repeat(np.arange(level.shape[0]), per_leaf)
    X = level[y] + noise * rng.standard_normal((len(y), dim))
    return LabeledDataset(X, y)


def stratified_split(ds: LabeledDataset, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices (keep, held_out) with ``fraction`` of every class held out."""
    rng = np.random.default_rng(seed)
    keep, held = [], []
    for c in np.unique(ds.y):
        idx = np.flatnonzero(ds.y == c)
        idx = idx[rng.permutation(len(idx))]
        n_out = int(round(fraction * len(idx)))
        held.append(idx[:n_out])
        keep.append(idx[n_out:])
    return np.sort(np.concatenate(keep)), np.sort(np.concatenate(held))
