"""Deterministic toy datasets: 2-D densities with optional class labels.

A dataset file stores all samples plus the validation index set (a 10% split
recorded at generation time) so downstream stages agree on the partition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .io import read_blob, write_blob

Array = np.ndarray

KINDS = ("gaussian-mixture", "checkerboard", "conditional-mixture")


@dataclass(frozen=True)
class ToyDatasetSpec:
    kind: str
    d: int = 2
    n_classes: int = 0
    n_samples: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; choose from {KINDS}")
        if self.n_samples < 10:
            raise ValueError(f"need at least 10 samples, got {self.n_samples}")
        if self.d < 2:
            raise ValueError(f"dataset dimension must be >= 2, got {self.d}")
        if self.kind == "conditional-mixture" and self.n_classes < 1:
            raise ValueError("conditional-mixture requires n_classes >= 1")


@dataclass(frozen=True)
class ToyDataset:
    spec: ToyDatasetSpec
    x0: Array          # (n, d)
    labels: Array      # (n,) int, -1 when unlabeled
    val_indices: Array  # sorted int indices into x0

    @property
    def n_train(self) -> int:
        return len(self.x0) - len(self.val_indices)

    @property
    def n_val(self) -> int:
        return len(self.val_indices)

    @property
    def train_indices(self) -> Array:
        mask = np.ones(len(self.x0), dtype=bool)
        mask[self.val_indices] = False
        return np.nonzero(mask)[0]

    def train_arrays(self) -> tuple[Array, Array | None]:
        idx = self.train_indices
        labels = self.labels[idx] if self.spec.n_classes > 0 else None
        return self.x0[idx], labels

    def val_arrays(self) -> tuple[Array, Array | None]:
        idx = self.val_indices
        labels = self.labels[idx] if self.spec.n_classes > 0 else None
        return self.x0[idx], labels


def mixture_centers(n_components: int, d: int, radius: float = 4.0) -> Array:
    """Component means evenly spaced on a circle in the first two dims."""
    angles = 2.0 * np.pi * np.arange(n_components) / n_components
    centers = np.zeros((n_components, d))
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    return centers


def generate(spec: ToyDatasetSpec) -> ToyDataset:
    rng = np.random.default_rng(spec.seed)
    n, d = spec.n_samples, spec.d
    if spec.kind == "gaussian-mixture":
        centers = mixture_centers(8, d)
        comp = rng.integers(0, 8, size=n)
        x0 = centers[comp] + 0.5 * rng.standard_normal((n, d))
        labels = np.full(n, -1)
    elif spec.kind == "checkerboard":
        x1 = rng.uniform(-2.0, 2.0, size=n)
        x2 = rng.uniform(0.0, 1.0, size=n) - rng.integers(0, 2, size=n) * 2.0
        x2 = x2 + np.floor(x1) % 2
        x0 = np.zeros((n, d))
        x0[:, 0] = 2.0 * x1
        x0[:, 1] = 2.0 * x2
        if d > 2:
            x0[:, 2:] = 0.05 * rng.standard_normal((n, d - 2))
        labels = np.full(n, -1)
    else:  # conditional-mixture
        centers = mixture_centers(spec.n_classes, d)
        labels = rng.integers(0, spec.n_classes, size=n)
        x0 = centers[labels] + 0.5 * rng.standard_normal((n, d))
    n_val = int(np.floor(0.1 * n))
    perm = rng.permutation(n)
    val_indices = np.sort(perm[:n_val])
    return ToyDataset(spec=spec, x0=x0, labels=labels.astype(int), val_indices=val_indices)


def save_dataset(path, ds: ToyDataset) -> None:
    header = {
        "format": "dataset",
        "kind": ds.spec.kind,
        "d": ds.spec.d,
        "n_classes": ds.spec.n_classes,
        "n_samples": ds.spec.n_samples,
        "seed": ds.spec.seed,
        "n_train": ds.n_train,
        "n_val": ds.n_val,
        "val_indices": ds.val_indices.tolist(),
    }
    payload = np.concatenate([ds.x0.reshape(-1), ds.labels.astype(np.float64)])
    write_blob(path, header, payload)


def load_dataset(path) -> ToyDataset:
    header, payload = read_blob(path)
    if header.get("format") != "dataset":
        raise ValueError(f"{path}: not a dataset blob")
    n, d = header["n_samples"], header["d"]
    x0 = payload[:n * d].reshape(n, d)
    labels = payload[n * d:].astype(int)
    spec = ToyDatasetSpec(kind=header["kind"], d=d, n_classes=header["n_classes"],
                          n_samples=n, seed=header["seed"])
    return ToyDataset(spec=spec, x0=x0, labels=labels,
                      val_indices=np.asarray(header["val_indices"], dtype=int))


def gen_dataset(spec: ToyDatasetSpec, path) -> ToyDataset:
    """Generate and serialize; regeneration from the same spec is bitwise identical."""
    ds = generate(spec)
    save_dataset(path, ds)
    return ds
