import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.model_selection import train_test_split

from scripts.exceptions import ConfigurationError, DatasetFormatError
from scripts.tensor_autodiff import Tensor


# Configure logging
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_IMAGE_SHAPE = (3, 32, 32)
CIFAR_RECORD_BYTES = 1 + int(np.prod(CIFAR_IMAGE_SHAPE))
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class LabeledImageSet:
    """
    Images in [0, 1] with integer labels.

    Attributes:
        images (np.ndarray): float32 array [N, C, H, W].
        labels (np.ndarray): int64 array [N].
        name (str): Dataset identifier, e.g. "mnist-test".
        num_classes (int): Number of label values.
    """

    images: np.ndarray
    labels: np.ndarray
    name: str
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images.ndim != 4:
            raise DatasetFormatError(f"{self.name}: images must be [N,C,H,W], got {self.images.shape}")
        if self.labels.shape[0] != self.images.shape[0]:
            raise DatasetFormatError(
                f"{self.name}: {self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DatasetFormatError(f"{self.name}: pixel values outside [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetFormatError(f"{self.name}: labels outside [0, {self.num_classes})")

    def __len__(self):
        return self.images.shape[0]

    def take(self, indices, name=None):
        """Returns the examples at ``indices`` as a new set."""
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledImageSet(self.images[indices], self.labels[indices], name or self.name, self.num_classes)

    def as_tensor(self):
        return Tensor(self.images)


class ImageDataLoader:
    """
    Reads MNIST (IDX) and CIFAR-10 (binary batches) into LabeledImageSets.
    """

    def __init__(self, data_dir):
        """
        Initializes the ImageDataLoader class.

        Args:
            data_dir (str | Path): Root directory holding the dataset files.
        """
        self.data_dir = Path(data_dir)

    def load(self, dataset):
        if dataset == "mnist":
            return self.load_mnist()
        if dataset == "cifar10":
            return self.load_cifar10()
        raise ConfigurationError(f"Unknown dataset '{dataset}'")

    def load_mnist(self):
        """
        Loads the MNIST train and test splits.

        Returns:
            tuple[LabeledImageSet, LabeledImageSet]: (train, test), images [N, 1, 28, 28].
        """
        root = self._locate(MNIST_FILES["train"][0], ("mnist", "MNIST"))
        splits = []
        for split, (image_file, label_file) in MNIST_FILES.items():
            images = self.decode_idx_images(self._read(root / image_file))
            labels = self.decode_idx_labels(self._read(root / label_file))
            if images.shape[0] != labels.shape[0]:
                raise DatasetFormatError(
                    f"MNIST {split}: {images.shape[0]} images but {labels.shape[0]} labels"
                )
            scaled = images[:, None, :, :].astype(np.float32) / 255.0
            splits.append(LabeledImageSet(scaled, labels, f"mnist-{split}"))
            logging.info(f"Loaded MNIST {split} split with shape {scaled.shape}")
        return splits[0], splits[1]

    def load_cifar10(self):
        """
        Loads the CIFAR-10 train and test splits from the binary batches.

        Returns:
            tuple[LabeledImageSet, LabeledImageSet]: (train, test), images [N, 3, 32, 32].
        """
        root = self._locate(CIFAR_TEST_FILE, ("cifar-10-batches-bin", "cifar10", "cifar10/cifar-10-batches-bin"))
        train_parts = [self.decode_cifar_records(self._read(root / name)) for name in CIFAR_TRAIN_FILES]
        train_images = np.concatenate([images for images, _ in train_parts])
        train_labels = np.concatenate([labels for _, labels in train_parts])
        test_images, test_labels = self.decode_cifar_records(self._read(root / CIFAR_TEST_FILE))

        train = LabeledImageSet(train_images.astype(np.float32) / 255.0, train_labels, "cifar10-train")
        test = LabeledImageSet(test_images.astype(np.float32) / 255.0, test_labels, "cifar10-test")
        logging.info(f"Loaded CIFAR-10 with {len(train)} train and {len(test)} test images")
        return train, test

    def _locate(self, marker, subdirs):
        for candidate in (self.data_dir, *(self.data_dir / sub for sub in subdirs)):
            if (candidate / marker).exists() or (candidate / f"{marker}.gz").exists():
                return candidate
        raise ConfigurationError(f"Could not find {marker} under {self.data_dir}")

    @staticmethod
    def _read(path):
        path = Path(path)
        if path.exists():
            return path.read_bytes()
        gz_path = path.with_name(path.name + ".gz")
        if gz_path.exists():
            with gzip.open(gz_path, "rb") as handle:
                return handle.read()
        raise ConfigurationError(f"Missing dataset file {path}")

    @staticmethod
    def decode_idx_images(raw):
        """
        Decodes an IDX3 image file.

        Args:
            raw (bytes): File contents.

        Returns:
            np.ndarray: uint8 array [N, rows, cols].
        """
        if len(raw) < 16:
            raise DatasetFormatError("IDX image file truncated inside the header")
        magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
        if magic != IDX_IMAGES_MAGIC:
            raise DatasetFormatError(f"Bad IDX image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        expected = count * rows * cols
        if len(raw) - 16 < expected:
            raise DatasetFormatError(f"IDX image file truncated: need {expected} pixel bytes, found {len(raw) - 16}")
        return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=16).reshape(count, rows, cols)

    @staticmethod
    def decode_idx_labels(raw):
        """Decodes an IDX1 label file into a uint8 array [N]."""
        if len(raw) < 8:
            raise DatasetFormatError("IDX label file truncated inside the header")
        magic, count = struct.unpack(">II", raw[:8])
        if magic != IDX_LABELS_MAGIC:
            raise DatasetFormatError(f"Bad IDX label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
        if len(raw) - 8 < count:
            raise DatasetFormatError(f"IDX label file truncated: need {count} labels, found {len(raw) - 8}")
        return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8)

    @staticmethod
    def encode_idx_images(images):
        images = np.asarray(images, dtype=np.uint8)
        header = struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape)
        return header + images.tobytes()

    @staticmethod
    def encode_idx_labels(labels):
        labels = np.asarray(labels, dtype=np.uint8)
        return struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes()

    @staticmethod
    def decode_cifar_records(raw):
        """
        Decodes CIFAR-10 binary records (1 label byte + 3072 channel-planar pixel bytes).

        Returns:
            tuple[np.ndarray, np.ndarray]: uint8 images [N, 3, 32, 32] and uint8 labels [N].
        """
        if len(raw) % CIFAR_RECORD_BYTES:
            raise DatasetFormatError(
                f"CIFAR-10 batch of {len(raw)} bytes is not a multiple of {CIFAR_RECORD_BYTES}"
            )
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels = records[:, 0]
        if labels.size and labels.max() > 9:
            raise DatasetFormatError(f"CIFAR-10 label byte {labels.max()} exceeds 9")
        return records[:, 1:].reshape(-1, *CIFAR_IMAGE_SHAPE), labels

    @staticmethod
    def encode_cifar_records(images, labels):
        images = np.asarray(images, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES - 1)
        labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
        return np.concatenate([labels, images], axis=1).tobytes()

    @staticmethod
    def batch_iter(image_set, batch_size, shuffle=False, seed=0):
        """
        Yields (Tensor, labels) batches covering every example once.

        Args:
            image_set (LabeledImageSet): Source examples.
            batch_size (int): Examples per batch; the last batch may be smaller.
            shuffle (bool): Permute the order with ``seed``.
            seed (int): Seed for the permutation.
        """
        if batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
        count = len(image_set)
        order = np.random.default_rng(seed).permutation(count) if shuffle else np.arange(count)
        for start in range(0, count, batch_size):
            index = order[start:start + batch_size]
            yield Tensor(image_set.images[index]), image_set.labels[index]

    @staticmethod
    def subset(image_set, size, seed):
        """Seed-deterministic subset of ``size`` examples, kept in index order."""
        if size > len(image_set):
            raise ConfigurationError(f"Subset size {size} exceeds {len(image_set)} examples in {image_set.name}")
        if size == len(image_set):
            return image_set
        index = np.sort(np.random.default_rng(seed).choice(len(image_set), size=size, replace=False))
        return image_set.take(index, name=f"{image_set.name}[{size}]")

    @staticmethod
    def train_validation_split(image_set, fraction, seed):
        """Splits off a seeded validation fraction."""
        train_index, val_index = train_test_split(
            np.arange(len(image_set)), test_size=fraction, random_state=seed
        )
        return (
            image_set.take(np.sort(train_index), name=f"{image_set.name}-fit"),
            image_set.take(np.sort(val_index), name=f"{image_set.name}-val"),
        )


def load_mnist(dir_path):
    return ImageDataLoader(dir_path).load_mnist()


def load_cifar10(dir_path):
    return ImageDataLoader(dir_path).load_cifar10()


def batch_iter(image_set, batch_size, shuffle=False, seed=0):
    return ImageDataLoader.batch_iter(image_set, batch_size, shuffle, seed)
