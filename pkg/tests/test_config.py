"""Config parsing, validation, presets and hashing."""

import pytest

from dmt.config import (
    ConfigError,
    ExperimentConfig,
    config_hash,
    load_config,
    parse_config_text,
    preset_names,
)


class TestParsing:
    def test_flat_key_value_with_comments(self):
        cfg = parse_config_text(
            """
            # a comment
            dataset = two-moons
            gamma1 = 2.5   # trailing comment
            labeled_ratio = 1/50
            mixup = true
            """
        )
        assert cfg.dataset == "two-moons"
        assert cfg.gamma1 == 2.5
        assert cfg.labeled_ratio == pytest.approx(0.02)
        assert cfg.mixup is True

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config_text("dataset = two-moons\nnot_a_key = 1")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config_text("dataset = two-moons\ndataset = toy-seg")

    def test_missing_dataset(self):
        with pytest.raises(ConfigError, match="dataset"):
            parse_config_text("gamma1 = 1")

    def test_bad_value_reports_line(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config_text("dataset = two-moons\ngamma1 = lots")

    def test_negative_gamma_rejected(self):
        with pytest.raises(ConfigError, match="gamma"):
            parse_config_text("dataset = two-moons\ngamma1 = -1")

    def test_unknown_dataset_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("dataset = imagenet")


class TestAlphas:
    def test_schedule_must_end_at_one(self):
        with pytest.raises(ConfigError, match="last alpha"):
            ExperimentConfig(dataset="two-moons", alphas="0.2,0.5")

    def test_schedule_must_increase(self):
        with pytest.raises(ConfigError, match="increasing"):
            ExperimentConfig(dataset="two-moons", alphas="0.5,0.5,1.0")

    def test_default_schedule(self):
        cfg = ExperimentConfig(dataset="two-moons")
        assert cfg.alphas_list() == (0.2, 0.4, 0.6, 0.8, 1.0)


class TestBatchComposition:
    def test_seven_to_one(self):
        cfg = ExperimentConfig(dataset="two-moons", batch_size=8, batch_ratio="7:1")
        assert cfg.batch_composition() == (1, 7)

    def test_thirty_one_to_one(self):
        cfg = ExperimentConfig(dataset="two-moons", batch_size=512, batch_ratio="31:1")
        assert cfg.batch_composition() == (16, 496)

    def test_fully_supervised_ratio(self):
        cfg = ExperimentConfig(dataset="two-moons", batch_size=8, batch_ratio="0:1")
        assert cfg.batch_composition() == (8, 0)

    def test_malformed_ratio(self):
        with pytest.raises(ConfigError, match="batch_ratio"):
            ExperimentConfig(dataset="two-moons", batch_ratio="7")


class TestPresets:
    def test_all_presets_parse(self):
        for name in preset_names():
            load_config(name)

    def test_voc_row(self):
        cfg = load_config("voc-1_8")
        assert cfg.gamma1 == cfg.gamma2 == 5.0
        assert cfg.batch_composition() == (1, 7)
        assert cfg.learning_rate == pytest.approx(1e-3)
        assert cfg.training_mode == "fine-tune"
        assert cfg.labeled_ratio == pytest.approx(1 / 8)
        assert cfg.task() == "segmentation"

    def test_cifar_4k_row(self):
        cfg = load_config("cifar10-4k")
        assert cfg.gamma1 == 4.0
        assert cfg.batch_composition() == (64, 448)
        assert cfg.learning_rate == pytest.approx(0.1)
        assert cfg.training_mode == "re-train"
        assert cfg.epochs_per_iteration == 750
        assert cfg.gamma_schedule_enabled()

    def test_cityscapes_row(self):
        cfg = load_config("cityscapes-1_8")
        assert cfg.gamma1 == 3.0
        assert cfg.learning_rate == pytest.approx(4e-3)
        assert cfg.batch_composition() == (2, 6)
        assert not cfg.gamma_schedule_enabled()  # fine-tuning keeps constant gamma

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="presets"):
            load_config("not-a-preset")

    def test_override_seed(self):
        assert load_config("two-moons", {"seed": 9}).seed == 9


class TestHash:
    def test_stable(self):
        a = ExperimentConfig(dataset="two-moons")
        b = ExperimentConfig(dataset="two-moons")
        assert config_hash(a) == config_hash(b)

    def test_any_field_change_changes_hash(self):
        base = ExperimentConfig(dataset="two-moons")
        variants = [
            ExperimentConfig(dataset="two-moons", gamma1=5),
            ExperimentConfig(dataset="two-moons", seed=1),
            ExperimentConfig(dataset="two-moons", batch_ratio="3:1"),
            ExperimentConfig(dataset="toy-seg"),
        ]
        hashes = {config_hash(v) for v in variants}
        assert config_hash(base) not in hashes
        assert len(hashes) == len(variants)
