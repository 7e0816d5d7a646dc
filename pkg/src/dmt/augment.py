"""Data augmentation: one random op + cutout for images, scale/crop/flip
applied consistently to image, label and confidence maps for segmentation."""

from __future__ import annotations

import numpy as np

IGNORE_INDEX = 255


def _brightness(img: np.ndarray, m: float) -> np.ndarray:
    return img * (0.5 + m)  # m in [0,1] -> factor in [0.5, 1.5]


def _contrast(img: np.ndarray, m: float) -> np.ndarray:
    mean = img.mean()
    return mean + (img - mean) * (0.5 + m)


def _color(img: np.ndarray, m: float) -> np.ndarray:
    scale = np.array([0.5 + m, 1.0, 1.5 - m])
    return img * scale


def _translate_x(img: np.ndarray, m: float) -> np.ndarray:
    d = int((m - 0.5) * 0.5 * img.shape[1])
    out = np.zeros_like(img)
    if d >= 0:
        out[:, d:] = img[:, : img.shape[1] - d]
    else:
        out[:, :d] = img[:, -d:]
    return out


def _translate_y(img: np.ndarray, m: float) -> np.ndarray:
    return _translate_x(img.swapaxes(0, 1), m).swapaxes(0, 1)


_CLASSIFY_OPS = [_brightness, _contrast, _color, _translate_x, _translate_y]


def cutout(img: np.ndarray, rng: np.random.Generator, hole: int | None = None) -> np.ndarray:
    """Zero a random square hole; hole side defaults to half the image side."""
    h, w = img.shape[:2]
    if hole is None:
        hole = h // 2
    cy = int(rng.integers(0, h))
    cx = int(rng.integers(0, w))
    y0, y1 = max(0, cy - hole // 2), min(h, cy + (hole + 1) // 2)
    x0, x1 = max(0, cx - hole // 2), min(w, cx + (hole + 1) // 2)
    out = img.copy()
    out[y0:y1, x0:x1] = 0
    return out


def augment_images(
    images: np.ndarray,
    rng: np.random.Generator,
    with_cutout: bool = True,
    hole: int | None = None,
) -> np.ndarray:
    """Per image: one operation from a fixed set at random intensity, plus cutout."""
    images = np.asarray(images)
    out = np.empty_like(images)
    is_uint8 = images.dtype == np.uint8
    for i in range(images.shape[0]):
        img = images[i].astype(np.float64)
        op = _CLASSIFY_OPS[int(rng.integers(len(_CLASSIFY_OPS)))]
        img = op(img, float(rng.random()))
        if with_cutout:
            img = cutout(img, rng, hole)
        out[i] = np.clip(img, 0, 255).astype(np.uint8) if is_uint8 else img
    return out


def jitter_points(points: np.ndarray, rng: np.random.Generator, std: float = 0.08) -> np.ndarray:
    """Gaussian coordinate jitter, the vector-input stand-in for image ops."""
    return points + rng.normal(0.0, std, size=points.shape).astype(points.dtype)


def _nearest_resize(arr: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    h, w = arr.shape[:2]
    rows = np.minimum((np.arange(new_h) * h / new_h).astype(int), h - 1)
    cols = np.minimum((np.arange(new_w) * w / new_w).astype(int), w - 1)
    return arr[rows][:, cols]


def augment_segmentation(
    image: np.ndarray,
    label: np.ndarray,
    confidence: np.ndarray | None,
    rng: np.random.Generator,
    scale_range: tuple[float, float] = (0.75, 1.25),
    crop: int | None = None,
    flip_prob: float = 0.5,
):
    """Random scale, random crop, random horizontal flip.

    All transforms hit image, label map and confidence map identically;
    padding uses 0 for images/confidences and the ignore value for
    labels. Nearest-neighbor resampling keeps labels exact.
    """
    h, w = label.shape
    crop = crop or h
    s = float(rng.uniform(*scale_range))
    nh, nw = max(2, round(h * s)), max(2, round(w * s))
    image = _nearest_resize(image, nh, nw)
    label = _nearest_resize(label, nh, nw)
    confidence = None if confidence is None else _nearest_resize(confidence, nh, nw)

    pad_h, pad_w = max(0, crop - nh), max(0, crop - nw)
    if pad_h or pad_w:
        image = np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)))
        label = np.pad(label, ((0, pad_h), (0, pad_w)), constant_values=IGNORE_INDEX)
        if confidence is not None:
            confidence = np.pad(confidence, ((0, pad_h), (0, pad_w)))
        nh, nw = max(nh, crop), max(nw, crop)

    y0 = int(rng.integers(0, nh - crop + 1))
    x0 = int(rng.integers(0, nw - crop + 1))
    image = image[y0 : y0 + crop, x0 : x0 + crop]
    label = label[y0 : y0 + crop, x0 : x0 + crop]
    if confidence is not None:
        confidence = confidence[y0 : y0 + crop, x0 : x0 + crop]

    if rng.random() < flip_prob:
        image = image[:, ::-1]
        label = label[:, ::-1]
        if confidence is not None:
            confidence = confidence[:, ::-1]
    if confidence is None:
        return np.ascontiguousarray(image), np.ascontiguousarray(label), None
    return (
        np.ascontiguousarray(image),
        np.ascontiguousarray(label),
        np.ascontiguousarray(confidence),
    )
