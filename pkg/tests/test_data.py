import numpy as np
import pytest

from unlearn_audit.data import (
    Dataset,
    generate_synthetic,
    load_dataset,
    load_splits,
    save_dataset,
    save_splits,
    split_forget_retain,
)
from unlearn_audit.errors import InputError
from unlearn_audit.numerics import make_rng


def test_default_shapes_and_split(default_data):
    train, test = default_data
    assert train.inputs.shape == (4000, 32)
    assert test.inputs.shape == (1000, 32)
    assert np.array_equal(train.class_counts(), np.full(10, 400))
    assert np.array_equal(test.class_counts(), np.full(10, 100))


def test_generation_is_deterministic():
    a, _ = generate_synthetic(4, 20, 5, rng=make_rng(3))
    b, _ = generate_synthetic(4, 20, 5, rng=make_rng(3))
    c, _ = generate_synthetic(4, 20, 5, rng=make_rng(4))
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.inputs, c.inputs)


def test_class_means_are_separated():
    train, _ = generate_synthetic(5, 400, 16, class_separation=6.0, intra_noise=1e-9, rng=make_rng(0))
    means = np.stack([train.of_class(c).inputs.mean(axis=0) for c in range(5)])
    dist = np.linalg.norm(means[:, None] - means[None], axis=2)
    off = dist[~np.eye(5, dtype=bool)]
    assert np.allclose(off, 6.0, atol=1e-6)


def test_forget_retain_partition(small_data):
    train, _ = small_data
    split = split_forget_retain(train, 1)
    assert (split.forget.labels == 1).all()
    assert (split.retain.labels != 1).all()
    assert len(split.forget) + len(split.retain) == len(train)
    with pytest.raises(InputError):
        split_forget_retain(train, 9)


def test_dataset_validation():
    with pytest.raises(InputError):
        Dataset(np.zeros((3, 2)), np.array([0, 1]), 2)
    with pytest.raises(InputError):
        Dataset(np.zeros((2, 2)), np.array([0, 5]), 2)


def test_round_trip(tmp_path, small_data):
    train, test = small_data
    save_dataset(train, tmp_path / "a.bin")
    back = load_dataset(tmp_path / "a.bin")
    assert np.array_equal(back.inputs, train.inputs) and np.array_equal(back.labels, train.labels)
    save_splits(train, test, tmp_path / "b.bin")
    tr, te = load_splits(tmp_path / "b.bin")
    assert np.array_equal(te.inputs, test.inputs) and tr.num_classes == train.num_classes
