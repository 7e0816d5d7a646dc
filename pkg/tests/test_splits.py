"""Partitioning determinism and the minimal-overlap pair sampler."""

import numpy as np
import pytest

from dmt.models import make_backbone
from dmt.splits import (
    InitKind,
    InitPolicy,
    SeedCounter,
    SplitSpec,
    difference_maximized_sampling,
    init_model_pair,
    make_split,
)


class TestDifferenceMaximizedSampling:
    def test_disjoint_halves(self):
        a, b = difference_maximized_sampling(list(range(10)), 5, seed=0)
        assert len(a) == len(b) == 5
        assert not set(a) & set(b)

    def test_forced_overlap(self):
        a, b = difference_maximized_sampling(list(range(10)), 7, seed=1)
        assert len(set(a) & set(b)) == 4  # max(0, 2*7 - 10)

    def test_full_subsets_coincide(self):
        a, b = difference_maximized_sampling(list(range(4)), 4, seed=2)
        assert set(a) == set(b) == set(range(4))

    def test_overlap_formula_on_random_sizes(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            n = int(rng.integers(1, 60))
            k = int(rng.integers(1, n + 1))
            a, b = difference_maximized_sampling(list(range(n)), k, int(rng.integers(1 << 30)))
            assert len(set(a) & set(b)) == max(0, 2 * k - n)

    def test_deterministic(self):
        assert difference_maximized_sampling(list(range(20)), 8, 5) == (
            difference_maximized_sampling(list(range(20)), 8, 5)
        )

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            difference_maximized_sampling(list(range(5)), 6, 0)
        with pytest.raises(ValueError):
            difference_maximized_sampling(list(range(5)), 0, 0)


class TestMakeSplit:
    def test_full_ratio_no_valtiny(self):
        labels = np.repeat(np.arange(5), 4)
        split = make_split(labels, labeled_ratio=1.0, valtiny_size=0, seed=1)
        assert len(split.labeled_ids) == 20
        assert split.unlabeled_ids == ()
        assert split.valtiny_ids == ()

    def test_stratified_counts_cifar_shaped(self):
        labels = np.repeat(np.arange(10), 5000)
        split = make_split(labels, labeled_ratio=0.08, valtiny_size=200, seed=2)
        assert len(split.labeled_ids) == 4000
        assert len(split.valtiny_ids) == 200
        per_class = np.bincount(labels[list(split.labeled_ids)])
        assert np.all(per_class == 400)
        per_class_val = np.bincount(labels[list(split.valtiny_ids)])
        assert np.all(per_class_val == 20)

    def test_deterministic(self):
        labels = np.repeat(np.arange(4), 25)
        assert make_split(labels, 0.2, 8, seed=7) == make_split(labels, 0.2, 8, seed=7)

    def test_partition_is_disjoint_and_complete(self):
        labels = np.repeat(np.arange(3), 30)
        split = make_split(labels, 0.1, 9, seed=3)
        all_ids = set(split.labeled_ids) | set(split.unlabeled_ids) | set(split.valtiny_ids)
        assert all_ids == set(range(90))
        assert len(split.labeled_ids) + len(split.unlabeled_ids) + len(split.valtiny_ids) == 90

    def test_best_effort_warns_on_starved_class(self):
        labels = np.array([0] * 50 + [1] * 2)
        with pytest.warns(UserWarning, match="best-effort"):
            make_split(labels, 0.5, 0, seed=4)

    def test_oversized_request_rejected(self):
        with pytest.raises(ValueError):
            make_split(np.zeros(10, dtype=int), 1.0, 5, seed=0)

    def test_json_round_trip(self, tmp_path):
        labels = np.repeat(np.arange(2), 10)
        split = make_split(labels, 0.3, 4, seed=5)
        split.save(tmp_path / "split.json")
        assert SplitSpec.load(tmp_path / "split.json") == split

    def test_disjointness_enforced(self):
        with pytest.raises(ValueError):
            SplitSpec((1, 2), (2, 3), (), seed=0, labeled_ratio=0.5)


class TestInitPolicies:
    def test_distinct_seeds_disagree_on_probe(self):
        policy = InitPolicy(InitKind.DISTINCT_RANDOM_SEEDS, seeds=(1, 2))
        factory = lambda s: make_backbone("mlp", s, in_dim=2, n_classes=2)
        a, b, (ids_a, ids_b) = init_model_pair(policy, list(range(10)), factory)
        assert ids_a == ids_b == list(range(10))
        probe = np.random.default_rng(0).normal(size=(64, 2)).astype(np.float32)
        assert not np.allclose(a.predict_proba(probe), b.predict_proba(probe))

    def test_equal_seeds_rejected(self):
        with pytest.raises(ValueError):
            InitPolicy(InitKind.DISTINCT_RANDOM_SEEDS, seeds=(1, 1))

    def test_difference_maximized_subsets(self):
        policy = InitPolicy(InitKind.DIFFERENCE_MAXIMIZED_SUBSETS)
        factory = lambda s: make_backbone("mlp", s, in_dim=2, n_classes=2)
        a, b, (ids_a, ids_b) = init_model_pair(policy, list(range(100)), factory, seed=3)
        assert len(ids_a) == len(ids_b) == 50
        assert not set(ids_a) & set(ids_b)
        probe = np.random.default_rng(0).normal(size=(8, 2)).astype(np.float32)
        assert np.allclose(a.predict_proba(probe), b.predict_proba(probe))  # same init

    def test_pretrained_requires_loader(self):
        policy = InitPolicy(
            InitKind.DISTINCT_PRETRAINED_WEIGHTS, checkpoints=("ck_a", "ck_b")
        )
        with pytest.raises(ValueError, match="loader"):
            init_model_pair(policy, [1, 2], lambda s: None)

    def test_missing_checkpoint_surfaces(self):
        policy = InitPolicy(
            InitKind.DISTINCT_PRETRAINED_WEIGHTS, checkpoints=("nope_a", "nope_b")
        )

        def loader(name):
            raise FileNotFoundError(name)

        with pytest.raises(FileNotFoundError):
            init_model_pair(policy, [1], lambda s: None, checkpoint_loader=loader)


class TestSeedCounter:
    def test_monotone_and_distinct(self):
        counter = SeedCounter(42)
        seeds = [counter.next() for _ in range(50)]
        assert len(set(seeds)) == 50

    def test_reproducible_sequence(self):
        a = [SeedCounter(9).next() for _ in range(1)]
        b = [SeedCounter(9).next() for _ in range(1)]
        assert a == b
