"""Generators and the CIFAR-10 binary reader/writer."""

import numpy as np
import pytest

from dmt.datasets import (
    IngestionError,
    generate_cifar_like,
    generate_toy_segmentation,
    generate_two_moons,
    ingest_cifar10,
    segmentation_palette,
    write_cifar10_archive,
)


class TestTwoMoons:
    def test_zero_noise_points_lie_on_half_circles(self):
        x, y = generate_two_moons(200, noise_std=0.0, seed=0)
        outer = x[y == 0]
        inner = x[y == 1]
        assert np.allclose(np.linalg.norm(outer, axis=1), 1.0, atol=1e-9)
        assert np.allclose(
            np.linalg.norm(inner - np.array([1.0, 0.5]), axis=1), 1.0, atol=1e-9
        )
        assert np.all(outer[:, 1] >= -1e-9)
        assert np.all(inner[:, 1] <= 0.5 + 1e-9)

    def test_balanced_labels(self):
        for n in (10, 11):
            _, y = generate_two_moons(n, 0.1, seed=1)
            counts = np.bincount(y)
            assert abs(int(counts[0]) - int(counts[1])) <= 1

    def test_deterministic(self):
        a = generate_two_moons(50, 0.2, seed=3)
        b = generate_two_moons(50, 0.2, seed=3)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            generate_two_moons(1, 0.1, seed=0)


class TestToySegmentation:
    def test_single_shape_mask_matches_colored_region(self):
        imgs, masks = generate_toy_segmentation(
            6, 32, num_classes=2, seed=0, min_shapes=1, max_shapes=1
        )
        palette = segmentation_palette(2)
        for img, mask in zip(imgs, masks):
            fg = mask == 1
            assert fg.sum() >= 4
            # foreground pixels sit near the class color, background near its own
            fg_err = np.abs(img[fg].astype(float) - palette[1]).mean()
            bg_err = np.abs(img[~fg].astype(float) - palette[0]).mean()
            assert fg_err < 40 and bg_err < 40

    def test_binary_masks_for_two_classes(self):
        _, masks = generate_toy_segmentation(4, 16, 2, seed=1)
        assert set(np.unique(masks)) <= {0, 1}

    def test_ignore_value_never_generated(self):
        _, masks = generate_toy_segmentation(8, 24, 4, seed=2)
        assert 255 not in np.unique(masks)

    def test_deterministic(self):
        a = generate_toy_segmentation(3, 16, 3, seed=5)
        b = generate_toy_segmentation(3, 16, 3, seed=5)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_too_small_grid(self):
        with pytest.raises(ValueError):
            generate_toy_segmentation(1, 4, 2, seed=0)

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            generate_toy_segmentation(1, 16, 1, seed=0)


@pytest.fixture(scope="module")
def cifar_archive(tmp_path_factory):
    rng = np.random.default_rng(0)
    train_x = rng.integers(0, 256, size=(50000, 32, 32, 3), dtype=np.uint8)
    train_y = rng.integers(0, 10, size=50000)
    test_x = rng.integers(0, 256, size=(10000, 32, 32, 3), dtype=np.uint8)
    test_y = rng.integers(0, 10, size=10000)
    root = tmp_path_factory.mktemp("cifar")
    write_cifar10_archive(root, train_x, train_y, test_x, test_y)
    return root, train_x, train_y, test_x, test_y


class TestCifarFormat:
    def test_round_trip_is_bitwise(self, cifar_archive):
        root, train_x, train_y, test_x, test_y = cifar_archive
        data = ingest_cifar10(root)
        assert data.inputs.shape == (50000, 32, 32, 3)
        assert data.test_inputs.shape == (10000, 32, 32, 3)
        assert np.array_equal(data.inputs, train_x)
        assert np.array_equal(data.labels, train_y)
        assert np.array_equal(data.test_inputs, test_x)
        assert np.array_equal(data.test_labels, test_y)

    def test_truncated_file_names_offender(self, cifar_archive, tmp_path):
        root = cifar_archive[0]
        for f in root.iterdir():
            (tmp_path / f.name).write_bytes(f.read_bytes())
        bad = tmp_path / "data_batch_3"
        bad.write_bytes(bad.read_bytes()[:-10])
        with pytest.raises(IngestionError, match="data_batch_3"):
            ingest_cifar10(tmp_path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IngestionError, match="data_batch_1"):
            ingest_cifar10(tmp_path)

    def test_label_out_of_range(self, cifar_archive, tmp_path):
        root = cifar_archive[0]
        for f in root.iterdir():
            (tmp_path / f.name).write_bytes(f.read_bytes())
        bad = tmp_path / "test_batch"
        raw = bytearray(bad.read_bytes())
        raw[0] = 11
        bad.write_bytes(bytes(raw))
        with pytest.raises(IngestionError, match="label out of range"):
            ingest_cifar10(tmp_path)


class TestCifarLike:
    def test_shapes_and_dtype(self):
        tx, ty, sx, sy = generate_cifar_like(300, 60, seed=0)
        assert tx.shape == (300, 32, 32, 3) and tx.dtype == np.uint8
        assert sx.shape == (60, 32, 32, 3)
        assert set(np.unique(ty)) <= set(range(10))

    def test_deterministic(self):
        a = generate_cifar_like(100, 20, seed=4)
        b = generate_cifar_like(100, 20, seed=4)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_classes_are_learnable_but_ambiguous(self):
        # nearest-pattern classification should beat chance by a lot yet
        # stay below perfect, the regime the audits rely on
        tx, ty, _, _ = generate_cifar_like(1200, 10, seed=1)
        flat = tx.reshape(len(tx), -1).astype(np.float64)
        centroids = np.stack([flat[ty == c].mean(axis=0) for c in range(10)])
        pred = np.argmin(
            ((flat[:, None, :] - centroids[None]) ** 2).sum(axis=2), axis=1
        )
        acc = (pred == ty).mean()
        assert 0.5 < acc < 0.999
