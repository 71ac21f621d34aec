"""Synthetic multi-class data and class-wise forget/retain splits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import container
from .errors import InputError
from .numerics import matmul


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, d_in) float64
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split_tag: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise InputError(f"inputs {self.inputs.shape} and labels {self.labels.shape} do not line up")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, mask_or_index) -> "Dataset":
        return Dataset(self.inputs[mask_or_index], self.labels[mask_or_index], self.num_classes, self.split_tag)

    def of_class(self, c: int) -> "Dataset":
        return self.subset(self.labels == c)


@dataclass
class ForgetRetainSplit:
    forget_class: int
    forget: Dataset
    retain: Dataset


def generate_synthetic(
    num_classes: int = 10,
    samples_per_class: int = 500,
    d_in: int = 32,
    class_separation: float = 6.0,
    intra_noise: float = 1.0,
    rng: np.random.Generator | None = None,
    test_fraction: float = 0.2,
) -> tuple[Dataset, Dataset]:
    """Anisotropic Gaussian classes around orthonormal, equally spaced means.

    Means are ``s * q_c`` for orthonormal columns ``q_c`` with
    ``s = separation / sqrt(2)``, so every pair of means sits exactly
    ``class_separation`` apart. Each class gets its own random rotation and
    per-axis scales in ``[0.5, 1.5] * intra_noise``. Every class is split
    80/20 (by default) into train and test.
    """
    if num_classes < 2:
        raise InputError("need at least two classes")
    if d_in < num_classes:
        raise InputError(f"cannot place {num_classes} orthonormal class means in {d_in} dimensions")
    if not class_separation > 0 or not intra_noise > 0:
        raise InputError("class_separation and intra_noise must be positive")
    n_test = int(round(samples_per_class * test_fraction))
    if n_test < 1 or n_test >= samples_per_class:
        raise InputError("each class needs at least one train and one test sample")
    if rng is None:
        rng = np.random.default_rng(0)

    frame, _ = np.linalg.qr(rng.standard_normal((d_in, d_in)))
    means = (class_separation / np.sqrt(2.0)) * frame[:, :num_classes].T

    train_x, train_y, test_x, test_y = [], [], [], []
    for c in range(num_classes):
        rot, _ = np.linalg.qr(rng.standard_normal((d_in, d_in)))
        scales = intra_noise * rng.uniform(0.5, 1.5, size=d_in)
        z = rng.standard_normal((samples_per_class, d_in))
        x = means[c] + matmul(z * scales, rot.T)
        order = rng.permutation(samples_per_class)
        test_idx, train_idx = order[:n_test], order[n_test:]
        train_x.append(x[train_idx])
        test_x.append(x[test_idx])
        train_y.append(np.full(len(train_idx), c))
        test_y.append(np.full(len(test_idx), c))

    def assemble(xs, ys, tag):
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        perm = rng.permutation(len(y))
        return Dataset(x[perm], y[perm], num_classes, tag)

    return assemble(train_x, train_y, "train"), assemble(test_x, test_y, "test")


def split_forget_retain(ds: Dataset, forget_class: int) -> ForgetRetainSplit:
    mask = ds.labels == forget_class
    if not mask.any():
        raise InputError(f"class {forget_class} does not occur in the dataset")
    return ForgetRetainSplit(forget_class, ds.subset(mask), ds.subset(~mask))


def save_dataset(ds: Dataset, path) -> str:
    meta = {"num_classes": ds.num_classes, "split_tag": ds.split_tag}
    return container.write(path, "dataset", meta, {"inputs": ds.inputs, "labels": ds.labels.astype(np.int32)})


def load_dataset(path) -> Dataset:
    _, meta, arrays = container.read(path, "dataset")
    return Dataset(arrays["inputs"], arrays["labels"].astype(np.int64), meta["num_classes"], meta["split_tag"])


def save_splits(train: Dataset, test: Dataset, path) -> str:
    """Store a train/test pair in one container."""
    meta = {"num_classes": train.num_classes}
    return container.write(path, "dataset-pair", meta, {
        "train_inputs": train.inputs,
        "train_labels": train.labels.astype(np.int32),
        "test_inputs": test.inputs,
        "test_labels": test.labels.astype(np.int32),
    })


def load_splits(path) -> tuple[Dataset, Dataset]:
    _, meta, a = container.read(path, "dataset-pair")
    k = meta["num_classes"]
    return (
        Dataset(a["train_inputs"], a["train_labels"].astype(np.int64), k, "train"),
        Dataset(a["test_inputs"], a["test_labels"].astype(np.int64), k, "test"),
    )
