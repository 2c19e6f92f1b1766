import gzip

import numpy as np
import pytest

from scripts.data_loader import (
    CIFAR_RECORD_BYTES,
    ImageDataLoader,
    LabeledImageSet,
    batch_iter,
    load_cifar10,
    load_mnist,
)
from scripts.exceptions import ConfigurationError, DatasetFormatError


def write_mnist(root, count=5, gz=False):
    rng = np.random.default_rng(0)
    root.mkdir(parents=True, exist_ok=True)
    for image_file, label_file in (
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ):
        images = rng.integers(0, 256, size=(count, 28, 28), dtype=np.uint8)
        labels = rng.integers(0, 10, size=count, dtype=np.uint8)
        for name, payload in (
            (image_file, ImageDataLoader.encode_idx_images(images)),
            (label_file, ImageDataLoader.encode_idx_labels(labels)),
        ):
            if gz:
                with gzip.open(root / f"{name}.gz", "wb") as handle:
                    handle.write(payload)
            else:
                (root / name).write_bytes(payload)


def write_cifar(root, per_batch=3):
    rng = np.random.default_rng(0)
    root.mkdir(parents=True, exist_ok=True)
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        images = rng.integers(0, 256, size=(per_batch, 3, 32, 32), dtype=np.uint8)
        labels = rng.integers(0, 10, size=per_batch, dtype=np.uint8)
        (root / name).write_bytes(ImageDataLoader.encode_cifar_records(images, labels))


def test_idx_round_trip():
    images = np.random.default_rng(1).integers(0, 256, size=(4, 28, 28), dtype=np.uint8)
    labels = np.array([3, 1, 4, 1], dtype=np.uint8)
    np.testing.assert_array_equal(ImageDataLoader.decode_idx_images(ImageDataLoader.encode_idx_images(images)), images)
    np.testing.assert_array_equal(ImageDataLoader.decode_idx_labels(ImageDataLoader.encode_idx_labels(labels)), labels)


def test_cifar_round_trip():
    images = np.random.default_rng(2).integers(0, 256, size=(3, 3, 32, 32), dtype=np.uint8)
    labels = np.array([9, 0, 5], dtype=np.uint8)
    raw = ImageDataLoader.encode_cifar_records(images, labels)
    assert len(raw) == 3 * CIFAR_RECORD_BYTES
    decoded_images, decoded_labels = ImageDataLoader.decode_cifar_records(raw)
    np.testing.assert_array_equal(decoded_images, images)
    np.testing.assert_array_equal(decoded_labels, labels)


def test_idx_bad_magic():
    raw = bytearray(ImageDataLoader.encode_idx_images(np.zeros((1, 2, 2), dtype=np.uint8)))
    raw[3] = 0x01
    with pytest.raises(DatasetFormatError, match="magic"):
        ImageDataLoader.decode_idx_images(bytes(raw))


def test_idx_truncated_pixels():
    raw = ImageDataLoader.encode_idx_images(np.zeros((2, 4, 4), dtype=np.uint8))
    with pytest.raises(DatasetFormatError, match="truncated"):
        ImageDataLoader.decode_idx_images(raw[:-1])


def test_cifar_partial_record():
    with pytest.raises(DatasetFormatError):
        ImageDataLoader.decode_cifar_records(b"\x00" * (CIFAR_RECORD_BYTES + 1))


def test_cifar_label_out_of_range():
    raw = bytes([10]) + b"\x00" * (CIFAR_RECORD_BYTES - 1)
    with pytest.raises(DatasetFormatError, match="label"):
        ImageDataLoader.decode_cifar_records(raw)


@pytest.mark.parametrize("gz", [False, True])
def test_load_mnist_scales_and_shapes(tmp_path, gz):
    write_mnist(tmp_path, count=5, gz=gz)
    train, test = load_mnist(tmp_path)
    assert train.images.shape == (5, 1, 28, 28)
    assert test.images.dtype == np.float32
    assert 0.0 <= train.images.min() and train.images.max() <= 1.0
    assert train.name == "mnist-train"


def test_load_mnist_count_mismatch(tmp_path):
    write_mnist(tmp_path, count=5)
    (tmp_path / "t10k-labels-idx1-ubyte").write_bytes(ImageDataLoader.encode_idx_labels(np.zeros(4, dtype=np.uint8)))
    with pytest.raises(DatasetFormatError, match="4 labels"):
        load_mnist(tmp_path)


def test_load_cifar_from_batches_subdirectory(tmp_path):
    write_cifar(tmp_path / "cifar-10-batches-bin", per_batch=2)
    train, test = load_cifar10(tmp_path)
    assert train.images.shape == (10, 3, 32, 32)
    assert len(test) == 2


def test_missing_dataset_directory(tmp_path):
    with pytest.raises(ConfigurationError):
        load_mnist(tmp_path)


def test_labeled_set_validates_range():
    with pytest.raises(DatasetFormatError):
        LabeledImageSet(np.full((1, 1, 2, 2), 1.5), [0], "bad")
    with pytest.raises(DatasetFormatError):
        LabeledImageSet(np.zeros((1, 1, 2, 2)), [10], "bad")


def test_batch_iter_covers_everything(digit_images):
    seen = []
    for batch, labels in batch_iter(digit_images, 4, shuffle=True, seed=3):
        assert batch.shape[1:] == (1, 28, 28)
        seen.extend(labels.tolist())
    assert sorted(seen) == list(range(6))


def test_batch_iter_rejects_zero_batch(digit_images):
    with pytest.raises(ConfigurationError):
        list(batch_iter(digit_images, 0))


def test_subset_is_seed_deterministic(digit_images):
    first = ImageDataLoader.subset(digit_images, 3, seed=7)
    second = ImageDataLoader.subset(digit_images, 3, seed=7)
    np.testing.assert_array_equal(first.labels, second.labels)
    assert list(first.labels) == sorted(first.labels)


def test_subset_larger_than_set(digit_images):
    with pytest.raises(ConfigurationError):
        ImageDataLoader.subset(digit_images, 7, seed=0)


def test_train_validation_split_partitions(digit_images):
    fit, val = ImageDataLoader.train_validation_split(digit_images, 0.34, seed=0)
    assert len(fit) + len(val) == 6
    assert set(fit.labels).isdisjoint(val.labels)
