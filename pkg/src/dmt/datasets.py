"""Dataset ingestion and desk-scale synthetic generators."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

CIFAR_TRAIN_FILES = [f"data_batch_{i}" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch"
_CIFAR_RECORD = 1 + 3072  # label byte + 32*32*3 pixels
_CIFAR_PER_FILE = 10000


class IngestionError(Exception):
    pass


@dataclass
class ClassificationDataset:
    inputs: np.ndarray  # (n, ...) train inputs
    labels: np.ndarray  # (n,) int64
    test_inputs: np.ndarray
    test_labels: np.ndarray
    n_classes: int


@dataclass
class SegmentationDataset:
    images: np.ndarray  # (n, H, W, 3) uint8
    masks: np.ndarray  # (n, H, W) uint8
    test_images: np.ndarray
    test_masks: np.ndarray
    n_classes: int


# ---------------------------------------------------------------------------
# two moons
# ---------------------------------------------------------------------------


def generate_two_moons(n: int, noise_std: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Two interleaving half-circles with Gaussian coordinate noise.

    Balanced labels (counts differ by at most one), shuffled, fully
    determined by the seed.
    """
    if n < 2:
        raise ValueError(f"need at least 2 points, got {n}")
    rng = np.random.default_rng(seed)
    n_outer = n - n // 2
    n_inner = n // 2
    t_outer = np.linspace(0.0, np.pi, n_outer)
    t_inner = np.linspace(0.0, np.pi, n_inner)
    x = np.concatenate(
        [
            np.stack([np.cos(t_outer), np.sin(t_outer)], axis=1),
            np.stack([1.0 - np.cos(t_inner), 0.5 - np.sin(t_inner)], axis=1),
        ]
    )
    y = np.concatenate([np.zeros(n_outer, dtype=np.int64), np.ones(n_inner, dtype=np.int64)])
    x += rng.normal(0.0, noise_std, size=x.shape)
    perm = rng.permutation(n)
    return x[perm], y[perm]


def two_moons_dataset(n: int, noise_std: float, seed: int, n_test: int | None = None) -> ClassificationDataset:
    x, y = generate_two_moons(n, noise_std, seed)
    xt, yt = generate_two_moons(n_test or n, noise_std, seed + 1)
    return ClassificationDataset(
        inputs=x.astype(np.float32), labels=y, test_inputs=xt.astype(np.float32),
        test_labels=yt, n_classes=2,
    )


# ---------------------------------------------------------------------------
# toy segmentation
# ---------------------------------------------------------------------------


def _draw_shape(mask: np.ndarray, kind: int, cx: int, cy: int, r: int) -> np.ndarray:
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == 0:  # disc
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
    if kind == 1:  # square
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    # upward triangle
    return (yy >= cy - r) & (yy <= cy + r) & (np.abs(xx - cx) <= (yy - (cy - r)) / 2)


def segmentation_palette(num_classes: int) -> np.ndarray:
    """Dark background plus phase-spread RGB base colors per shape class."""
    phases = 2.0 * np.pi * np.arange(num_classes - 1) / max(1, num_classes - 1)
    colors = 128.0 + 100.0 * np.stack(
        [np.cos(phases), np.cos(phases - 2.0 * np.pi / 3), np.cos(phases + 2.0 * np.pi / 3)],
        axis=1,
    )
    return np.concatenate([[[40.0, 40.0, 48.0]], colors])


def generate_toy_segmentation(
    n: int,
    grid_size: int,
    num_classes: int,
    seed: int,
    min_shapes: int = 1,
    max_shapes: int = 3,
) -> tuple[np.ndarray, np.ndarray]:
    """Images of randomly placed colored shapes with exact per-pixel masks.

    Class 0 is background; classes 1..C-1 are shape classes with
    distinct noisy base colors. The ignore value 255 is never produced
    here, only honored downstream.
    """
    if num_classes < 2:
        raise ValueError(f"need background plus at least one shape class, got {num_classes}")
    if grid_size < 8:
        raise ValueError(f"grid too small: {grid_size}")
    rng = np.random.default_rng(seed)
    palette = segmentation_palette(num_classes)
    images = np.zeros((n, grid_size, grid_size, 3), dtype=np.uint8)
    masks = np.zeros((n, grid_size, grid_size), dtype=np.uint8)
    for i in range(n):
        img = np.tile(palette[0], (grid_size, grid_size, 1))
        mask = np.zeros((grid_size, grid_size), dtype=np.uint8)
        for _ in range(rng.integers(min_shapes, max_shapes + 1)):
            cls = int(rng.integers(1, num_classes))
            shape_kind = (cls - 1) % 3
            placed = False
            r = int(rng.integers(grid_size // 8, grid_size // 3))
            while r >= 2:  # shrink until the shape fits
                lo, hi = r, grid_size - r
                if lo < hi:
                    cx = int(rng.integers(lo, hi))
                    cy = int(rng.integers(lo, hi))
                    sel = _draw_shape(mask, shape_kind, cx, cy, r)
                    img[sel] = palette[cls]
                    mask[sel] = cls
                    placed = True
                    break
                r //= 2
            if not placed:
                raise ValueError(f"cannot fit any shape on a {grid_size} grid")
        img += rng.normal(0.0, 18.0, size=img.shape)
        images[i] = np.clip(img, 0, 255).astype(np.uint8)
        masks[i] = mask
    return images, masks


def toy_segmentation_dataset(
    n: int, grid_size: int, num_classes: int, seed: int, n_test: int | None = None
) -> SegmentationDataset:
    imgs, masks = generate_toy_segmentation(n, grid_size, num_classes, seed)
    t_imgs, t_masks = generate_toy_segmentation(n_test or max(8, n // 4), grid_size, num_classes, seed + 1)
    return SegmentationDataset(
        images=imgs, masks=masks, test_images=t_imgs, test_masks=t_masks,
        n_classes=num_classes,
    )


# ---------------------------------------------------------------------------
# CIFAR-10 binary format
# ---------------------------------------------------------------------------


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.exists():
        raise IngestionError(f"{path}: missing batch file")
    raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    if raw.size != _CIFAR_RECORD * _CIFAR_PER_FILE:
        raise IngestionError(
            f"{path}: expected {_CIFAR_RECORD * _CIFAR_PER_FILE} bytes, got {raw.size}"
        )
    records = raw.reshape(_CIFAR_PER_FILE, _CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise IngestionError(f"{path}: label out of range [0, 9]")
    # channel-planar (3, 32, 32) per record -> (32, 32, 3)
    images = records[:, 1:].reshape(_CIFAR_PER_FILE, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def ingest_cifar10(directory: str | Path) -> ClassificationDataset:
    """Decode the standard binary batch files; verifies the 50k/10k counts."""
    directory = Path(directory)
    train_images, train_labels = [], []
    for name in CIFAR_TRAIN_FILES:
        imgs, labs = _read_cifar_file(directory / name)
        train_images.append(imgs)
        train_labels.append(labs)
    test_images, test_labels = _read_cifar_file(directory / CIFAR_TEST_FILE)
    train_images = np.concatenate(train_images)
    train_labels = np.concatenate(train_labels)
    if train_images.shape[0] != 50000 or test_images.shape[0] != 10000:
        raise IngestionError("unexpected record counts for a CIFAR-10 archive")
    return ClassificationDataset(
        inputs=train_images, labels=train_labels,
        test_inputs=test_images, test_labels=test_labels, n_classes=10,
    )


def write_cifar10_archive(
    directory: str | Path,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    test_images: np.ndarray,
    test_labels: np.ndarray,
) -> None:
    """Write images/labels in the CIFAR-10 binary batch layout (5 + 1 files)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if train_images.shape[0] != 5 * _CIFAR_PER_FILE or test_images.shape[0] != _CIFAR_PER_FILE:
        raise ValueError("archive layout requires 50000 train and 10000 test records")

    def encode(imgs: np.ndarray, labs: np.ndarray) -> bytes:
        planar = imgs.transpose(0, 3, 1, 2).reshape(imgs.shape[0], 3072)
        records = np.concatenate([labs.reshape(-1, 1).astype(np.uint8), planar], axis=1)
        return records.tobytes()

    for i, name in enumerate(CIFAR_TRAIN_FILES):
        sl = slice(i * _CIFAR_PER_FILE, (i + 1) * _CIFAR_PER_FILE)
        (directory / name).write_bytes(encode(train_images[sl], train_labels[sl]))
    (directory / CIFAR_TEST_FILE).write_bytes(encode(test_images, test_labels))


def generate_cifar_like(
    n_train: int, n_test: int, seed: int, n_classes: int = 10, side: int = 32
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Synthetic CIFAR-shaped image classes with controlled ambiguity.

    Each class is a smooth random color pattern; every sample blends its
    class pattern with a random other class (blend weight beta-skewed
    toward 0), then adds jitter and pixel noise. Heavily blended samples
    are genuinely ambiguous, so a classifier's confidence correlates
    with its error rate without errors vanishing at high confidence.
    """
    rng = np.random.default_rng(seed)
    patterns = rng.normal(0.0, 1.0, size=(n_classes, side, side, 3))
    patterns = gaussian_filter(patterns, sigma=(0, 3.0, 3.0, 0))
    patterns -= patterns.min(axis=(1, 2, 3), keepdims=True)
    patterns /= patterns.max(axis=(1, 2, 3), keepdims=True) + 1e-9
    patterns = 40.0 + 175.0 * patterns

    def sample(count: int) -> tuple[np.ndarray, np.ndarray]:
        images = np.empty((count, side, side, 3), dtype=np.uint8)
        labels = rng.integers(0, n_classes, size=count)
        chunk = 4096
        for start in range(0, count, chunk):
            idx = slice(start, min(start + chunk, count))
            y = labels[idx]
            z = (y + rng.integers(1, n_classes, size=y.size)) % n_classes
            blend = rng.beta(1.0, 3.0, size=(y.size, 1, 1, 1)) * 0.75
            x = (1.0 - blend) * patterns[y] + blend * patterns[z]
            x += rng.normal(0.0, 14.0, size=x.shape)
            x *= rng.uniform(0.8, 1.2, size=(y.size, 1, 1, 1))
            shifts = rng.integers(-3, 4, size=(y.size, 2))
            for j in range(y.size):
                x[j] = np.roll(x[j], tuple(shifts[j]), axis=(0, 1))
            images[idx] = np.clip(x, 0, 255).astype(np.uint8)
        return images, labels

    train_x, train_y = sample(n_train)
    test_x, test_y = sample(n_test)
    return train_x, train_y, test_x, test_y


def cifar_like_dataset(n_train: int, n_test: int, seed: int) -> ClassificationDataset:
    tx, ty, sx, sy = generate_cifar_like(n_train, n_test, seed)
    return ClassificationDataset(
        inputs=tx, labels=ty, test_inputs=sx, test_labels=sy, n_classes=10
    )
