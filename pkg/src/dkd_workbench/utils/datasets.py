"""Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches and synthetic blobs"""

import gzip
import logging
import os
import struct
from dataclasses import dataclass, replace
from math import isqrt
from pathlib import Path
from typing import BinaryIO, Optional, Tuple, Union
from warnings import warn

import numpy as np

from dkd_workbench.errors import DatasetFormatError
from dkd_workbench.models.models import (
    NUM_CLASSES,
    DatasetConfig,
    DatasetName,
    DatasetSplit,
)

logger = logging.getLogger(__name__)

DATA_DIR_ENV = "DKD_DATA_DIR"

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
MNIST_SIDE = 28

CIFAR_SIDE = 32
CIFAR_CHANNELS = 3
CIFAR_RECORD_BYTES = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE
CIFAR_BATCH_RECORDS = 10000

MNIST_FILES = {
    DatasetSplit.train.value: ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    DatasetSplit.test.value: ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    DatasetSplit.train.value: [f"data_batch_{i}.bin" for i in range(1, 6)],
    DatasetSplit.test.value: ["test_batch.bin"],
}


@dataclass
class DatasetHandle:
    """Images scaled to [0, 1] with their class labels

    Attributes:
        name (str): mnist, cifar10 or synthetic-blobs
        split (str): train or test
        images (np.ndarray): float32 array (N, C, H, W)
        labels (np.ndarray): int64 array (N,)
        num_classes (int): Number of label values
    """

    name: str
    split: str
    images: np.ndarray
    labels: np.ndarray
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    def head(self, count: int) -> "DatasetHandle":
        return replace(self, images=self.images[:count], labels=self.labels[:count])

    def subset(self, size: Optional[int], seed: int) -> "DatasetHandle":
        """A seeded random subset, kept in the original sample order"""
        if size is None or size >= len(self):
            return self
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.permutation(len(self))[:size])
        return replace(self, images=self.images[keep], labels=self.labels[keep])

    def split_validation(self, fraction: float) -> Tuple["DatasetHandle", Optional["DatasetHandle"]]:
        """Hold out the last fraction of the samples"""
        held = int(round(len(self) * fraction))
        if held == 0:
            return self, None
        cut = len(self) - held
        train = replace(self, images=self.images[:cut], labels=self.labels[:cut])
        val = replace(self, images=self.images[cut:], labels=self.labels[cut:])
        return train, val


def _open(path: Path) -> BinaryIO:
    if path.suffix == ".gz":
        return gzip.open(path, "rb")  # type: ignore[return-value]
    return open(path, "rb")


def _find(directory: Path, name: str) -> Path:
    for candidate in (directory / name, directory / f"{name}.gz"):
        if candidate.is_file():
            return candidate
    raise FileNotFoundError(f"{name} not found in {directory}")


def check_file_is_idx(file: Union[str, os.PathLike]) -> bool:
    """Validate that a file starts with an MNIST image or label magic

    Args:
        file (Union[str, os.PathLike]): The path for the file to check

    Returns:
        bool: The file is an IDX image or label file
    """
    try:
        with _open(Path(file)) as f:
            head = f.read(4)
    except OSError:
        return False
    if len(head) < 4:
        return False
    return struct.unpack(">I", head)[0] in (IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC)


def check_file_is_cifar_batch(file: Union[str, os.PathLike]) -> bool:
    """Validate that a file size is a whole number of CIFAR-10 records"""
    path = Path(file)
    if not path.is_file():
        return False
    size = path.stat().st_size
    return size > 0 and size % CIFAR_RECORD_BYTES == 0


def read_idx_images(file: Union[str, os.PathLike]) -> np.ndarray:
    """Read an IDX image file into uint8 (N, rows, cols)

    Raises:
        DatasetFormatError: On a bad magic number or a truncated file
    """
    with _open(Path(file)) as f:
        header = f.read(16)
        if len(header) < 16:
            raise DatasetFormatError(f"{file}: truncated IDX image header ({len(header)} bytes)")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGE_MAGIC:
            raise DatasetFormatError(f"{file}: image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}")
        payload = f.read()
    expected = count * rows * cols
    if len(payload) < expected:
        raise DatasetFormatError(
            f"{file}: truncated, {len(payload)} pixel bytes for {count} images of {rows}x{cols}"
        )
    return np.frombuffer(payload[:expected], dtype=np.uint8).reshape(count, rows, cols)


def read_idx_labels(file: Union[str, os.PathLike]) -> np.ndarray:
    """Read an IDX label file into uint8 (N,)

    Raises:
        DatasetFormatError: On a bad magic number or a truncated file
    """
    with _open(Path(file)) as f:
        header = f.read(8)
        if len(header) < 8:
            raise DatasetFormatError(f"{file}: truncated IDX label header ({len(header)} bytes)")
        magic, count = struct.unpack(">II", header)
        if magic != IDX_LABEL_MAGIC:
            raise DatasetFormatError(f"{file}: label magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}")
        payload = f.read()
    if len(payload) < count:
        raise DatasetFormatError(f"{file}: truncated, {len(payload)} labels of {count}")
    return np.frombuffer(payload[:count], dtype=np.uint8)


def load_mnist_idx(path: Union[str, os.PathLike], split: str = "train") -> DatasetHandle:
    """Load an MNIST split from a directory of IDX files (optionally gzipped)

    Args:
        path (Union[str, os.PathLike]): Directory holding the four MNIST files
        split (str): train or test

    Returns:
        DatasetHandle: Images (N, 1, 28, 28) in [0, 1]

    Raises:
        DatasetFormatError: On bad magic, truncation, wrong image size or an
            image/label count mismatch
    """
    split = DatasetSplit(split).value
    directory = Path(path)
    image_name, label_name = MNIST_FILES[split]
    images = read_idx_images(_find(directory, image_name))
    labels = read_idx_labels(_find(directory, label_name))
    if images.shape[1:] != (MNIST_SIDE, MNIST_SIDE):
        raise DatasetFormatError(f"MNIST images are {images.shape[1]}x{images.shape[2]}, expected 28x28")
    if len(images) != len(labels):
        raise DatasetFormatError(f"{len(images)} MNIST images but {len(labels)} labels")
    if labels.size and labels.max() >= NUM_CLASSES:
        raise DatasetFormatError(f"MNIST label {labels.max()} outside [0, {NUM_CLASSES})")
    logger.info(f"Loaded {len(images)} MNIST {split} images from {directory}")
    return DatasetHandle(
        name=DatasetName.mnist.value,
        split=split,
        images=(images.astype(np.float32) / 255.0)[:, None, :, :],
        labels=labels.astype(np.int64),
    )


def read_cifar10_batch(file: Union[str, os.PathLike]) -> Tuple[np.ndarray, np.ndarray]:
    """Read one CIFAR-10 binary batch into uint8 images (N, 3, 32, 32) and labels

    Raises:
        DatasetFormatError: On a partial record or a label above 9
    """
    raw = Path(file).read_bytes()
    if len(raw) % CIFAR_RECORD_BYTES:
        raise DatasetFormatError(
            f"{file}: truncated, {len(raw)} bytes is not a multiple of the {CIFAR_RECORD_BYTES} byte record"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    if len(records) != CIFAR_BATCH_RECORDS:
        warn(f"{file} holds {len(records)} records, official batches hold {CIFAR_BATCH_RECORDS}")
    labels = records[:, 0]
    if labels.size and labels.max() >= NUM_CLASSES:
        bad = int(np.argmax(labels >= NUM_CLASSES))
        raise DatasetFormatError(f"{file}: record {bad} has label {labels[bad]}, expected 0-9")
    images = records[:, 1:].reshape(-1, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE)
    return images, labels


def load_cifar10_binary(path: Union[str, os.PathLike], split: str = "train") -> DatasetHandle:
    """Load a CIFAR-10 split from the binary batch files

    Args:
        path (Union[str, os.PathLike]): Directory holding the batches, or
            its parent containing cifar-10-batches-bin, or a single batch file
        split (str): train or test

    Returns:
        DatasetHandle: Images (N, 3, 32, 32) in [0, 1]
    """
    split = DatasetSplit(split).value
    location = Path(path)
    if location.is_file():
        files = [location]
    else:
        if (location / "cifar-10-batches-bin").is_dir():
            location = location / "cifar-10-batches-bin"
        files = [location / name for name in CIFAR_FILES[split]]
        missing = [str(f) for f in files if not f.is_file()]
        if missing:
            raise FileNotFoundError(f"CIFAR-10 batches missing: {', '.join(missing)}")
    parts = [read_cifar10_batch(f) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    logger.info(f"Loaded {len(images)} CIFAR-10 {split} images from {location}")
    return DatasetHandle(
        name=DatasetName.cifar10.value,
        split=split,
        images=images.astype(np.float32) / 255.0,
        labels=labels.astype(np.int64),
    )


def _to_bytes(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)


def write_mnist_idx(handle: DatasetHandle, directory: Union[str, os.PathLike], split: str = "train") -> Tuple[Path, Path]:
    """Write a 1x28x28 dataset as an IDX image/label file pair"""
    if handle.image_shape != (1, MNIST_SIDE, MNIST_SIDE):
        raise ValueError(f"IDX export needs 1x28x28 images, got {handle.image_shape}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    image_name, label_name = MNIST_FILES[DatasetSplit(split).value]
    image_file, label_file = directory / image_name, directory / label_name
    count = len(handle)
    image_file.write_bytes(
        struct.pack(">IIII", IDX_IMAGE_MAGIC, count, MNIST_SIDE, MNIST_SIDE)
        + _to_bytes(handle.images[:, 0]).tobytes()
    )
    label_file.write_bytes(
        struct.pack(">II", IDX_LABEL_MAGIC, count) + handle.labels.astype(np.uint8).tobytes()
    )
    return image_file, label_file


def write_cifar10_binary(handle: DatasetHandle, file: Union[str, os.PathLike]) -> Path:
    """Write a 3x32x32 dataset as one CIFAR-10 binary batch"""
    if handle.image_shape != (CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE):
        raise ValueError(f"CIFAR-10 export needs 3x32x32 images, got {handle.image_shape}")
    records = np.empty((len(handle), CIFAR_RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = handle.labels.astype(np.uint8)
    records[:, 1:] = _to_bytes(handle.images).reshape(len(handle), -1)
    file = Path(file)
    file.parent.mkdir(parents=True, exist_ok=True)
    file.write_bytes(records.tobytes())
    return file


def make_synthetic_blobs(
    classes: int,
    dim: int,
    per_class: int,
    seed: int,
    separation: float = 6.0,
    sigma: float = 1.0,
    split: str = "train",
) -> DatasetHandle:
    """Gaussian blobs around random unit directions scaled by separation

    Features are min-max scaled into [0, 1] (an affine map, so separability is
    unchanged) and laid out as a square 1xSxS image when dim is a square,
    otherwise as a 1x1xdim strip.

    Args:
        classes (int): Number of blobs, at least 2
        dim (int): Feature dimension
        per_class (int): Samples per blob
        seed (int): Seed of centers, noise and sample order
        separation (float): Distance of each center from the origin
        sigma (float): Standard deviation of the noise

    Returns:
        DatasetHandle: The blobs, shuffled
    """
    if classes < 2:
        raise ValueError(f"synthetic blobs need at least 2 classes, got {classes}")
    if classes > NUM_CLASSES:
        raise ValueError(f"at most {NUM_CLASSES} classes fit the softmax head, got {classes}")
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(classes, dim))
    centers = separation * directions / np.linalg.norm(directions, axis=1, keepdims=True)
    points = np.concatenate([c + sigma * rng.normal(size=(per_class, dim)) for c in centers])
    labels = np.repeat(np.arange(classes), per_class)
    order = rng.permutation(len(labels))
    points, labels = points[order], labels[order]
    low, high = points.min(), points.max()
    points = (points - low) / (high - low)
    side = isqrt(dim)
    shape = (1, side, side) if side * side == dim else (1, 1, dim)
    return DatasetHandle(
        name=DatasetName.synthetic_blobs.value,
        split=DatasetSplit(split).value,
        images=points.reshape((-1,) + shape).astype(np.float32),
        labels=labels.astype(np.int64),
    )


def resolve_data_dir(configured: Optional[Path]) -> Path:
    """The configured dataset root or DKD_DATA_DIR"""
    if configured is not None:
        return Path(configured)
    env = os.environ.get(DATA_DIR_ENV)
    if not env:
        raise FileNotFoundError(f"no dataset directory configured and {DATA_DIR_ENV} is not set")
    return Path(env)


def load_dataset(cfg: DatasetConfig, split: str) -> DatasetHandle:
    """Load the configured dataset split and cut it to the configured subset"""
    split = DatasetSplit(split).value
    size = cfg.train_subset if split == DatasetSplit.train.value else cfg.test_subset
    if cfg.name == DatasetName.synthetic_blobs:
        # train and test blobs share centers, the test split takes fresh noise
        blobs = make_synthetic_blobs(
            cfg.blob_classes,
            cfg.blob_dim,
            2 * cfg.blob_per_class,
            cfg.seed,
            cfg.blob_separation,
            cfg.blob_sigma,
            split=split,
        )
        half = len(blobs) // 2
        part = blobs.head(half) if split == DatasetSplit.train.value else replace(
            blobs, images=blobs.images[half:], labels=blobs.labels[half:]
        )
        return part.subset(size, cfg.seed)
    root = resolve_data_dir(cfg.data_dir)
    if cfg.name == DatasetName.mnist:
        handle = load_mnist_idx(root / "mnist" if (root / "mnist").is_dir() else root, split)
    else:
        handle = load_cifar10_binary(root / "cifar10" if (root / "cifar10").is_dir() else root, split)
    return handle.subset(size, cfg.seed)
