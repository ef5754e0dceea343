"""MNIST (IDX) and CIFAR-10 (binary batch) ingestion, plus the MNIST fetcher."""
import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
import requests

from .errors import ConfigError, DatasetError
from .requests_config import download_file, download_session
from .util import ensure_dir

logger = logging.getLogger(__name__)

MNIST_IMAGE_MAGIC = 2051
MNIST_LABEL_MAGIC = 2049
MNIST_URL = 'https://storage.googleapis.com/cvdf-datasets/mnist/'
MNIST_FILES = {
    'train_images': 'train-images-idx3-ubyte',
    'train_labels': 'train-labels-idx1-ubyte',
    'test_images': 't10k-images-idx3-ubyte',
    'test_labels': 't10k-labels-idx1-ubyte',
}

CIFAR_RECORD_BYTES = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = 'test_batch.bin'


@dataclass(eq=False)
class Dataset:
    """Images as float32 (N, C, H, W) arrays and labels as int64 vectors."""
    name: str
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.train_images.shape[1:])

    def subset(self, train: int = None, test: int = None) -> 'Dataset':
        """The first ``train`` / ``test`` samples, for quick runs."""
        return Dataset(self.name, self.train_images[:train], self.train_labels[:train],
                       self.test_images[:test], self.test_labels[:test])


def _read_bytes(path: Path) -> bytes:
    opener = gzip.open if path.suffix == '.gz' else open
    try:
        with opener(path, 'rb') as f:
            return f.read()
    except (OSError, EOFError) as e:
        raise DatasetError(f"Cannot read {path.name}: {e}", path=path) from e


def _find(directory: Path, stem: str) -> Path:
    candidates = [stem, stem + '.gz', stem.replace('-idx', '.idx'), stem.replace('-idx', '.idx') + '.gz']
    for candidate in candidates:
        if (directory / candidate).is_file():
            return directory / candidate
    raise DatasetError(f"Missing dataset file {stem}", path=directory / stem)


def parse_idx(data: bytes, magic: int, path=None) -> np.ndarray:
    """Parse a big-endian IDX blob of unsigned bytes into an array of its declared shape."""
    dims = 3 if magic == MNIST_IMAGE_MAGIC else 1
    header = 4 * (1 + dims)
    if len(data) < header:
        raise DatasetError("Truncated IDX header", path=path, offset=len(data), expected=header, found=len(data))
    found_magic, *shape = struct.unpack(f">{1 + dims}I", data[:header])
    if found_magic != magic:
        raise DatasetError("IDX magic mismatch", path=path, offset=0, expected=magic, found=found_magic)

    expected = int(np.prod(shape))
    body = len(data) - header
    if body < expected:
        raise DatasetError("Truncated IDX body", path=path, offset=len(data),
                           expected=header + expected, found=len(data))
    if body > expected:
        logger.warning("Ignoring %s trailing bytes", body - expected)
    return np.frombuffer(data, dtype=np.uint8, count=expected, offset=header).reshape(shape)


def _mnist_split(directory: Path, images_stem: str, labels_stem: str) -> Tuple[np.ndarray, np.ndarray]:
    images_path, labels_path = _find(directory, images_stem), _find(directory, labels_stem)
    images = parse_idx(_read_bytes(images_path), MNIST_IMAGE_MAGIC, images_path)
    labels = parse_idx(_read_bytes(labels_path), MNIST_LABEL_MAGIC, labels_path)
    if len(images) != len(labels):
        raise DatasetError("Image and label counts differ", path=labels_path,
                           expected=len(images), found=len(labels))
    if labels.size and labels.max() > 9:
        raise DatasetError("Label out of range", path=labels_path, expected='0..9', found=int(labels.max()))
    scaled = images.astype(np.float32)[:, np.newaxis, :, :] / np.float32(255.0)
    return scaled, labels.astype(np.int64)


def load_mnist(directory: Union[str, Path]) -> Dataset:
    """Load the four MNIST IDX files (plain or gzipped) from ``directory``.

    Pixels are scaled to [0, 1]; images come back as (N, 1, 28, 28).
    """
    directory = Path(directory)
    train_images, train_labels = _mnist_split(directory, MNIST_FILES['train_images'], MNIST_FILES['train_labels'])
    test_images, test_labels = _mnist_split(directory, MNIST_FILES['test_images'], MNIST_FILES['test_labels'])
    logger.info({"message": "Loaded MNIST.", "path": str(directory),
                 "train": len(train_labels), "test": len(test_labels)})
    return Dataset('mnist', train_images, train_labels, test_images, test_labels)


def parse_cifar_batch(data: bytes, path=None) -> Tuple[np.ndarray, np.ndarray]:
    """Split a CIFAR-10 binary batch into (N, 3, 32, 32) uint8 images and labels."""
    if len(data) % CIFAR_RECORD_BYTES:
        whole = len(data) // CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES
        raise DatasetError("Truncated CIFAR-10 record", path=path, offset=whole,
                           expected=whole + CIFAR_RECORD_BYTES, found=len(data))
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DatasetError("Label out of range", path=path, offset=bad * CIFAR_RECORD_BYTES,
                           expected='0..9', found=int(labels[bad]))
    return records[:, 1:].reshape((-1,) + CIFAR_SHAPE), labels


def _cifar_dir(directory: Path) -> Path:
    nested = directory / 'cifar-10-batches-bin'
    return nested if nested.is_dir() else directory


def load_cifar10(directory: Union[str, Path]) -> Dataset:
    """Load CIFAR-10 binary batches, scale to [0, 1] and subtract the per-channel training mean."""
    directory = _cifar_dir(Path(directory))

    def read(names) -> Tuple[np.ndarray, np.ndarray]:
        parts = []
        for name in names:
            path = directory / name
            if not path.is_file():
                raise DatasetError(f"Missing dataset file {name}", path=path)
            parts.append(parse_cifar_batch(_read_bytes(path), path))
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    train_images, train_labels = read(CIFAR_TRAIN_FILES)
    test_images, test_labels = read([CIFAR_TEST_FILE])
    train = train_images.astype(np.float32) / np.float32(255.0)
    test = test_images.astype(np.float32) / np.float32(255.0)
    mean = train.mean(axis=(0, 2, 3), keepdims=True, dtype=np.float64).astype(np.float32)
    logger.info({"message": "Loaded CIFAR-10.", "path": str(directory),
                 "train": len(train_labels), "test": len(test_labels),
                 "channel_mean": mean.ravel().round(4).tolist()})
    return Dataset('cifar10', train - mean, train_labels, test - mean, test_labels)


def load_dataset(fmt: str, directory: Union[str, Path]) -> Dataset:
    loaders = {'mnist': load_mnist, 'cifar10': load_cifar10}
    try:
        loader = loaders[fmt]
    except KeyError:
        raise ConfigError(f"Unknown dataset format {fmt!r}; choose one of {sorted(loaders)}")
    return loader(directory)


def fetch_mnist(directory: Union[str, Path], base_url: str = MNIST_URL, session: requests.Session = None,
                overwrite: bool = False) -> List[Path]:
    """Download the gzipped MNIST IDX files into ``directory``; existing files are kept unless ``overwrite``."""
    directory = ensure_dir(directory)
    session = session or download_session()
    paths = []
    for stem in MNIST_FILES.values():
        path = directory / f"{stem}.gz"
        if path.exists() and not overwrite:
            logger.info({"message": "Skipping existing file.", "path": str(path)})
        else:
            download_file(base_url.rstrip('/') + f"/{stem}.gz", path, session)
        paths.append(path)
    return paths
