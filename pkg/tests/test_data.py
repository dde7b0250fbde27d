import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from resprobe.data import (
    balanced_subset,
    load_cifar_binary,
    load_idx,
    read_cifar_records,
    read_idx,
    synthetic_clusters,
    write_cifar_records,
    write_idx,
)


@settings(max_examples=25, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 5), st.integers(1, 6), st.integers(1, 6))))
def test_idx_roundtrip(tmp_path_factory, imgs):
    path = tmp_path_factory.mktemp("idx") / "x-images-idx3-ubyte"
    write_idx(path, imgs)
    np.testing.assert_array_equal(read_idx(path), imgs)


def test_idx_gzip_and_label_pairing(tmp_path, rng):
    imgs = rng.integers(0, 256, size=(6, 4, 4), dtype=np.uint8)
    labels = np.array([0, 1, 2, 0, 1, 2], dtype=np.uint8)
    write_idx(tmp_path / "train-images-idx3-ubyte.gz", imgs)
    write_idx(tmp_path / "train-labels-idx1-ubyte.gz", labels)
    ds = load_idx(tmp_path / "train-images-idx3-ubyte.gz")
    assert ds.images.shape == (6, 1, 4, 4) and ds.class_count == 3
    np.testing.assert_array_equal(ds.labels, labels)
    np.testing.assert_allclose(ds.images.mean(), 0.0, atol=1e-12)


def test_idx_rejects_bad_magic_and_length(tmp_path):
    (tmp_path / "bad").write_bytes(b"\x00\x00\x09\x03" + b"\x00" * 12)
    with pytest.raises(ValueError, match="magic"):
        read_idx(tmp_path / "bad")
    write_idx(tmp_path / "ok", np.zeros((2, 2, 2), np.uint8))
    raw = (tmp_path / "ok").read_bytes()
    (tmp_path / "short").write_bytes(raw[:-1])
    with pytest.raises(ValueError, match="expected"):
        read_idx(tmp_path / "short")


def test_cifar_roundtrip_and_truncation(tmp_path, rng):
    imgs = rng.integers(0, 256, size=(7, 3, 32, 32), dtype=np.uint8)
    labels = rng.integers(10, size=7)
    write_cifar_records(tmp_path / "b.bin", imgs, labels)
    got_imgs, got_labels = read_cifar_records(tmp_path / "b.bin")
    np.testing.assert_array_equal(got_imgs, imgs)
    np.testing.assert_array_equal(got_labels, labels)
    raw = (tmp_path / "b.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-10])
    with pytest.raises(ValueError, match="offset 18438"):
        read_cifar_records(tmp_path / "t.bin")


def test_cifar100_fine_label(tmp_path, rng):
    imgs = rng.integers(0, 256, size=(3, 3, 32, 32), dtype=np.uint8)
    write_cifar_records(tmp_path / "train.bin", imgs, [5, 77, 99], coarse=[1, 2, 3])
    _, labels = read_cifar_records(tmp_path / "train.bin", label_bytes=2)
    assert labels.tolist() == [5, 77, 99]


def test_cifar_directory_split_and_held_out_stats(tmp_path, rng):
    for i in range(1, 6):
        write_cifar_records(tmp_path / f"data_batch_{i}.bin", rng.integers(0, 256, (20, 3, 32, 32)), np.arange(20) % 10)
    write_cifar_records(tmp_path / "test_batch.bin", rng.integers(0, 128, (10, 3, 32, 32)), np.arange(10))
    train = load_cifar_binary(tmp_path, subset_size=30, seed=1)
    assert len(train) == 30 and np.bincount(train.labels).tolist() == [3] * 10
    test = load_cifar_binary(tmp_path, split="test", stats=(train.mean, train.std))
    np.testing.assert_array_equal(test.mean, train.mean)
    assert test.images.mean() < -0.5  # darker images, normalised with train statistics


def test_cifar_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError, match="data_batch_1"):
        load_cifar_binary(tmp_path)


@settings(max_examples=30, deadline=None)
@given(size=st.integers(1, 40), seed=st.integers(0, 100))
def test_balanced_subset_properties(size, seed):
    labels = np.repeat(np.arange(4), 10)
    idx = balanced_subset(labels, size, 4, seed)
    counts = np.bincount(labels[idx], minlength=4)
    assert len(idx) == size and counts.max() - counts.min() <= 1
    assert len(set(idx.tolist())) == size
    np.testing.assert_array_equal(idx, balanced_subset(labels, size, 4, seed))


def test_synthetic_clusters_deterministic_and_shared_means():
    a = synthetic_clusters(5, 3, (1, 4, 4), 3.0, seed=2)
    b = synthetic_clusters(5, 3, (1, 4, 4), 3.0, seed=2)
    np.testing.assert_array_equal(a.images, b.images)
    held = synthetic_clusters(5, 3, (1, 4, 4), 3.0, seed=2, split="val", stats=(a.mean, a.std))
    assert not np.array_equal(held.images, a.images)
    # same class means: per-class centroids close
    for c in range(3):
        gap = np.linalg.norm(a.images[a.labels == c].mean(0) - held.images[held.labels == c].mean(0))
        assert gap < 3.0


def test_dataset_label_range_checked():
    with pytest.raises(ValueError):
        synthetic_clusters(2, 2).subset([0]).__class__(np.zeros((1, 1, 2, 2)), [5], "train", 2)
