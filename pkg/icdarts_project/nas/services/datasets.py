"""Datasets: CIFAR binary batches, the synthetic gratings set, splits and augmentation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader, TensorDataset

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

CIFAR_IMAGE_BYTES = 3 * 32 * 32
CIFAR10_RECORDS_PER_FILE = 10000
CIFAR10_DIR = "cifar-10-batches-bin"
CIFAR100_DIR = "cifar-100-binary"
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILE = "test_batch.bin"

SYNTHETIC_CLASSES = 4
SYNTHETIC_SHAPE = (3, 16, 16)
SYNTHETIC_TRAIN = 2048
SYNTHETIC_TEST = 512

DATASET_NAMES = ("cifar10", "cifar100", "synthetic")


@dataclass(frozen=True)
class DatasetSpec:
    source: str
    root: Optional[Path]
    n_classes: int
    image_shape: Tuple[int, int, int]
    cutout: int = 16
    crop_padding: int = 4
    flip: bool = True
    normalize: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.source not in ("cifar10_binary", "cifar100_binary", "synthetic"):
            raise ConfigError(f"Unknown dataset source: {self.source}")
        if self.cutout < 0 or self.crop_padding < 0:
            raise ConfigError("cutout and crop_padding must be nonnegative")


def dataset_spec(name: str, root: Optional[Path] = None, seed: int = 0, cutout: Optional[int] = None) -> DatasetSpec:
    if name == "cifar10":
        return DatasetSpec("cifar10_binary", Path(root) if root else None, 10, (3, 32, 32), 16 if cutout is None else cutout)
    if name == "cifar100":
        return DatasetSpec("cifar100_binary", Path(root) if root else None, 100, (3, 32, 32), 16 if cutout is None else cutout)
    if name == "synthetic":
        return DatasetSpec("synthetic", None, SYNTHETIC_CLASSES, SYNTHETIC_SHAPE, 8 if cutout is None else cutout, seed=seed)
    raise ConfigError(f"Unknown dataset: {name} (expected one of {', '.join(DATASET_NAMES)})")


@dataclass
class ArrayDataset:
    """uint8 images ``(N, C, H, W)`` in [0, 255] with int64 labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, indices: Sequence[int]) -> "ArrayDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return ArrayDataset(self.images[idx], self.labels[idx])


# =============================================================================
# CIFAR BINARY FORMAT
# =============================================================================


def read_cifar_binary(path: Path, n_classes: int = 10, label_bytes: int = 1) -> ArrayDataset:
    """Parse one binary batch: label byte(s) then 3072 bytes, R plane, G plane, B plane.

    With two label bytes (CIFAR-100) the first is the coarse label and the fine
    label is used.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"Dataset file not found: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    record = label_bytes + CIFAR_IMAGE_BYTES
    if raw.size == 0 or raw.size % record:
        raise DataError(f"{path} is truncated: {raw.size} bytes is not a multiple of {record}")
    rows = raw.reshape(-1, record)
    labels = rows[:, label_bytes - 1].astype(np.int64)
    if labels.max(initial=0) >= n_classes:
        raise DataError(f"{path} has label {int(labels.max())} outside [0, {n_classes - 1}]")
    images = rows[:, label_bytes:].reshape(-1, 3, 32, 32).copy()
    return ArrayDataset(images, labels)


def write_cifar_binary(path: Path, dataset: ArrayDataset, coarse_labels: Optional[np.ndarray] = None) -> Path:
    path = Path(path)
    n = len(dataset)
    flat = dataset.images.reshape(n, -1).astype(np.uint8)
    if flat.shape[1] != CIFAR_IMAGE_BYTES:
        raise DataError(f"CIFAR records hold {CIFAR_IMAGE_BYTES} pixel bytes, got {flat.shape[1]}")
    columns: List[np.ndarray] = []
    if coarse_labels is not None:
        columns.append(np.asarray(coarse_labels, dtype=np.uint8).reshape(n, 1))
    columns.append(dataset.labels.astype(np.uint8).reshape(n, 1))
    columns.append(flat)
    np.concatenate(columns, axis=1).tofile(path)
    return path


def _concat(parts: Sequence[ArrayDataset]) -> ArrayDataset:
    return ArrayDataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))


def _cifar_dir(root: Path, name: str) -> Path:
    nested = root / name
    return nested if nested.is_dir() else root


def load_cifar10(root: Path) -> Tuple[ArrayDataset, ArrayDataset]:
    base = _cifar_dir(Path(root), CIFAR10_DIR)
    parts = []
    for name in CIFAR10_TRAIN_FILES + (CIFAR10_TEST_FILE,):
        part = read_cifar_binary(base / name, 10)
        if len(part) != CIFAR10_RECORDS_PER_FILE:
            raise DataError(f"{base / name} holds {len(part)} records, expected {CIFAR10_RECORDS_PER_FILE}")
        parts.append(part)
    return _concat(parts[:-1]), parts[-1]


def load_cifar100(root: Path) -> Tuple[ArrayDataset, ArrayDataset]:
    base = _cifar_dir(Path(root), CIFAR100_DIR)
    return read_cifar_binary(base / "train.bin", 100, 2), read_cifar_binary(base / "test.bin", 100, 2)


# =============================================================================
# SYNTHETIC GRATINGS
# =============================================================================


def _gratings(rng: np.random.Generator, n: int) -> ArrayDataset:
    """Four classes of oriented sinusoidal gratings (0, 45, 90, 135 degrees) with noise."""
    channels, height, width = SYNTHETIC_SHAPE
    labels = rng.integers(0, SYNTHETIC_CLASSES, size=n)
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    images = np.empty((n, channels, height, width), dtype=np.uint8)
    for i, label in enumerate(labels):
        theta = label * math.pi / SYNTHETIC_CLASSES
        freq = rng.uniform(0.15, 0.3)
        phase = rng.uniform(0, 2 * math.pi)
        wave = 0.5 + 0.5 * np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
        tint = rng.uniform(0.6, 1.0, size=(channels, 1, 1))
        pixels = wave[None] * tint + rng.normal(0.0, 0.1, size=(channels, height, width))
        images[i] = np.clip(pixels * 255.0, 0, 255).astype(np.uint8)
    return ArrayDataset(images, labels.astype(np.int64))


def load_synthetic(seed: int = 0, n_train: int = SYNTHETIC_TRAIN, n_test: int = SYNTHETIC_TEST) -> Tuple[ArrayDataset, ArrayDataset]:
    rng = np.random.default_rng(seed)
    return _gratings(rng, n_train), _gratings(rng, n_test)


def load_dataset(spec: DatasetSpec) -> Tuple[ArrayDataset, ArrayDataset]:
    if spec.source == "synthetic":
        train, test = load_synthetic(spec.seed)
    else:
        if spec.root is None:
            raise DataError(f"{spec.source} needs a dataset root (ICDARTS_DATA_ROOT)")
        loader = load_cifar10 if spec.source == "cifar10_binary" else load_cifar100
        train, test = loader(spec.root)
    logger.info("Loaded %s: %d train / %d test", spec.source, len(train), len(test))
    return train, test


def split_train_val(train: ArrayDataset, seed: int = 0) -> Tuple[ArrayDataset, ArrayDataset]:
    """Seeded class-stratified halves; an odd trailing sample is dropped."""
    n = len(train) - len(train) % 2
    labels = train.labels[:n]
    rng = np.random.default_rng(seed)
    order: List[int] = []
    for label in np.unique(labels):
        members = np.flatnonzero(labels == label)
        order.extend(rng.permutation(members).tolist())
    order_arr = np.asarray(order, dtype=np.int64)
    return train.subset(np.sort(order_arr[0::2])), train.subset(np.sort(order_arr[1::2]))


# =============================================================================
# AUGMENTATION AND LOADING
# =============================================================================


def channel_stats(dataset: ArrayDataset) -> Tuple[np.ndarray, np.ndarray]:
    pixels = dataset.images.astype(np.float64) / 255.0
    mean = pixels.mean(axis=(0, 2, 3))
    std = pixels.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


class Normalizer:
    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1)
        self.std = torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1)

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        return (images.float() / 255.0 - self.mean) / self.std


class Augmenter(Normalizer):
    """Random crop (zero pad), horizontal flip, normalization and cutout, seeded."""

    def __init__(self, mean, std, crop_padding: int = 4, flip: bool = True, cutout: int = 16, seed: int = 0):
        super().__init__(mean, std)
        self.crop_padding = crop_padding
        self.flip = flip
        self.cutout = cutout
        self.generator = torch.Generator().manual_seed(int(seed))

    def _randint(self, high: int, size: int) -> torch.Tensor:
        return torch.randint(0, high, (size,), generator=self.generator)

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        x = super().__call__(images)
        n, _, h, w = x.shape
        if self.crop_padding:
            p = self.crop_padding
            padded = torch.nn.functional.pad(x, (p, p, p, p))
            dy, dx = self._randint(2 * p + 1, n), self._randint(2 * p + 1, n)
            x = torch.stack([padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w] for i in range(n)])
        if self.flip:
            flips = torch.rand(n, generator=self.generator) < 0.5
            x = torch.where(flips.view(-1, 1, 1, 1), x.flip(-1), x)
        if self.cutout:
            x = apply_cutout(x, self.cutout, self.generator)
        return x


def apply_cutout(x: torch.Tensor, length: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Zero one ``length`` x ``length`` square per image, centred uniformly and clipped at borders."""
    n, _, h, w = x.shape
    cy = torch.randint(0, h, (n,), generator=generator)
    cx = torch.randint(0, w, (n,), generator=generator)
    rows = torch.arange(h).view(1, h, 1)
    cols = torch.arange(w).view(1, 1, w)
    half = length // 2
    y0, y1 = (cy - half).view(-1, 1, 1), (cy - half + length).view(-1, 1, 1)
    x0, x1 = (cx - half).view(-1, 1, 1), (cx - half + length).view(-1, 1, 1)
    inside = (rows >= y0) & (rows < y1) & (cols >= x0) & (cols < x1)
    return x.masked_fill(inside.unsqueeze(1), 0.0)


class BatchLoader:
    """Seeded mini-batches of transformed tensors; optionally capped per epoch."""

    def __init__(
        self,
        dataset: ArrayDataset,
        batch_size: int,
        transform: Callable[[torch.Tensor], torch.Tensor],
        *,
        shuffle: bool = True,
        seed: int = 0,
        max_batches: Optional[int] = None,
    ):
        if len(dataset) == 0:
            raise DataError("Cannot load batches from an empty split")
        self.dataset = dataset
        self.transform = transform
        self.max_batches = max_batches
        self.generator = torch.Generator().manual_seed(int(seed))
        tensors = TensorDataset(torch.from_numpy(dataset.images), torch.from_numpy(dataset.labels))
        self.loader = DataLoader(tensors, batch_size=batch_size, shuffle=shuffle, generator=self.generator)

    def __len__(self) -> int:
        n = len(self.loader)
        return min(n, self.max_batches) if self.max_batches else n

    def __iter__(self) -> Iterator[Tuple[torch.Tensor, torch.Tensor]]:
        for i, (images, labels) in enumerate(self.loader):
            if self.max_batches and i >= self.max_batches:
                break
            yield self.transform(images), labels


def make_loaders(
    spec: DatasetSpec,
    train: ArrayDataset,
    evaluation_sets: Sequence[ArrayDataset],
    batch_size: int,
    seed: int = 0,
    augment: bool = True,
    max_batches: Optional[int] = None,
) -> Tuple[BatchLoader, List[BatchLoader]]:
    """A shuffled augmented loader for ``train`` and plain loaders for the rest; stats come from ``train``."""
    mean, std = channel_stats(train)
    if augment:
        transform = Augmenter(mean, std, spec.crop_padding, spec.flip, spec.cutout, seed)
    else:
        transform = Normalizer(mean, std)
    plain = Normalizer(mean, std)
    train_loader = BatchLoader(train, batch_size, transform, shuffle=True, seed=seed, max_batches=max_batches)
    others = [BatchLoader(d, batch_size, plain, shuffle=False, seed=seed) for d in evaluation_sets]
    return train_loader, others
