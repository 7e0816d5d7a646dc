"""Desk-scale experiment orchestration shared by the CLI, the scripts
and the acceptance suite."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .datasets import (
    ClassificationDataset,
    SegmentationDataset,
    cifar_like_dataset,
    ingest_cifar10,
    toy_segmentation_dataset,
    two_moons_dataset,
)
from .losses import GammaPair, dynamic_weight_map
from .metrics import IGNORE_INDEX
from .pseudo import pseudo_label_error_stats, threshold_pseudo_labels
from .splits import SplitSpec, make_split
from .trainer import (
    derive_seed,
    evaluate_classifier,
    label_segmentation_pool,
    run_ablation,
    run_dmt,
    run_supervised_baseline,
    train_segmenter,
    _build_backbone,
    _capped_unlabeled,
)

_dataset_cache: dict = {}


def make_dataset(cfg: ExperimentConfig, data_dir: str | Path | None = None):
    """Resolve the config's dataset id into in-memory arrays (cached)."""
    data_seed = derive_seed(cfg.seed, 5)
    key = (cfg.dataset, cfg.n_points, cfg.noise_std, cfg.grid_size,
           cfg.num_classes, cfg.n_train, cfg.n_test, data_seed, str(data_dir))
    if key in _dataset_cache:
        return _dataset_cache[key]
    if cfg.dataset == "two-moons":
        data = two_moons_dataset(cfg.n_points, cfg.noise_std, data_seed, n_test=cfg.n_points)
    elif cfg.dataset == "toy-seg":
        data = toy_segmentation_dataset(
            cfg.n_train, cfg.grid_size, cfg.num_classes, data_seed, n_test=cfg.n_test
        )
    elif cfg.dataset == "cifar10-like":
        data = cifar_like_dataset(cfg.n_train, cfg.n_test, data_seed)
    elif cfg.dataset == "cifar10":
        if data_dir is None:
            raise ConfigError("cifar10 needs --data-dir (or DMT_DATA_DIR)")
        data = ingest_cifar10(data_dir)
    else:
        raise ConfigError(f"no desk-scale loader for dataset {cfg.dataset!r}")
    _dataset_cache[key] = data
    return data


def stratification_labels(data) -> np.ndarray:
    """Per-sample class labels for stratified splitting.

    Segmentation images stratify by their dominant non-background class.
    """
    if isinstance(data, ClassificationDataset):
        return data.labels
    labels = np.zeros(data.images.shape[0], dtype=np.int64)
    for i, mask in enumerate(data.masks):
        fg = mask[(mask != 0) & (mask != IGNORE_INDEX)]
        labels[i] = np.bincount(fg).argmax() if fg.size else 0
    return labels


def make_experiment_split(cfg: ExperimentConfig, data) -> SplitSpec:
    return make_split(
        stratification_labels(data),
        labeled_ratio=cfg.labeled_ratio,
        valtiny_size=cfg.valtiny_size,
        seed=derive_seed(cfg.seed, 6),
    )


def _final_score(result: dict, task: str) -> float:
    key = "accuracy" if task == "classification" else "mean_iou"
    return result["metrics" if "metrics" in result else "final_metrics"][key]


def run_variant(
    variant: str,
    cfg: ExperimentConfig,
    out_dir: str | Path,
    data_dir: str | Path | None = None,
) -> dict:
    """Run one strategy end to end; returns {'score': ..., 'result': ...}."""
    data = make_dataset(cfg, data_dir)
    split = make_experiment_split(cfg, data)
    if variant == "baseline":
        result = run_supervised_baseline(cfg, data, split, out_dir)
    elif variant == "dmt":
        result = run_dmt(cfg, data, split, out_dir)
    else:
        result = run_ablation(variant, cfg, data, split, out_dir)
    return {"score": _final_score(result, cfg.task()), "result": result}


def compare_variants(
    preset: str,
    seeds: list[int],
    variants: list[str],
    out_root: str | Path,
    overrides: dict | None = None,
    data_dir: str | Path | None = None,
) -> dict[str, list[float]]:
    """Per-seed scores for several strategies under a shared config."""
    scores: dict[str, list[float]] = {v: [] for v in variants}
    for seed in seeds:
        cfg = load_config(preset, {**(overrides or {}), "seed": seed})
        for variant in variants:
            out = Path(out_root) / f"seed{seed}" / variant
            scores[variant].append(run_variant(variant, cfg, out, data_dir)["score"])
    return scores


# ---------------------------------------------------------------------------
# audits backing the figure-style reports
# ---------------------------------------------------------------------------


def pseudo_label_audit(
    cfg: ExperimentConfig, out_dir: str | Path, data_dir=None
) -> dict:
    """Train the round-0 model and report pool error rates by confidence quantile."""
    data = make_dataset(cfg, data_dir)
    if not isinstance(data, ClassificationDataset):
        raise ConfigError("the pseudo-label audit is defined for classification datasets")
    split = make_experiment_split(cfg, data)
    base = run_supervised_baseline(cfg, data, split, out_dir)
    from .models import Backbone

    model = Backbone.load(base["checkpoint"])
    pool = _capped_unlabeled(cfg, split)
    probs = model.predict_proba(data.inputs[pool])
    records = threshold_pseudo_labels(probs, 0.0, sample_ids=[int(i) for i in pool])
    gt = {int(i): int(data.labels[i]) for i in pool}
    return pseudo_label_error_stats(records, gt)


def corrupted_pixel_weight_medians(
    cfg: ExperimentConfig,
    out_dir: str | Path,
    corrupt_fraction: float = 0.2,
) -> dict:
    """Noise-suppression probe: corrupt a fraction of pseudo pixels, fine-tune
    one epoch with the dynamic loss, then compare weight medians on corrupted
    versus clean pixels."""
    data = make_dataset(cfg)
    split = make_experiment_split(cfg, data)
    lab_ids = np.asarray(split.labeled_ids)
    pool = _capped_unlabeled(cfg, split)
    out_dir = Path(out_dir)

    labeler = _build_backbone(cfg, data, derive_seed(cfg.seed, 100, 0))
    student = _build_backbone(cfg, data, derive_seed(cfg.seed, 100, 1))
    for model, tag in ((labeler, 0), (student, 1)):
        train_segmenter(
            model, cfg, data.images[lab_ids], data.masks[lab_ids],
            None, None, None, epochs=cfg.resolved_initial_epochs(),
            seed=derive_seed(cfg.seed, 0, 42 + tag),
        )

    maps = label_segmentation_pool(
        labeler, data.images, pool, 1.0, out_dir / "pseudo_corrupt",
        source_model="labeler", iteration=1,
    )
    rng = np.random.default_rng(derive_seed(cfg.seed, 77))
    label_maps = np.stack([m.labels for m in maps])
    conf_maps = np.stack([m.confidences for m in maps])
    scored = label_maps != IGNORE_INDEX
    corrupt = scored & (rng.random(label_maps.shape) < corrupt_fraction)
    bump = rng.integers(1, data.n_classes, size=label_maps.shape).astype(np.uint8)
    label_maps[corrupt] = (label_maps[corrupt] + bump[corrupt]) % data.n_classes

    ids = np.array([m.sample_id for m in maps], dtype=np.int64)
    train_segmenter(
        student, cfg, data.images[lab_ids], data.masks[lab_ids],
        data.images[ids], label_maps, conf_maps, epochs=1,
        seed=derive_seed(cfg.seed, 1, 42),
    )

    gammas = GammaPair(cfg.gamma1, cfg.gamma2)
    corrupt_w, clean_w = [], []
    probs = student.predict_proba(data.images[ids])
    for j in range(ids.size):
        wm = dynamic_weight_map(label_maps[j], conf_maps[j], probs[j], gammas)
        sj = scored[j]
        cj = corrupt[j]
        corrupt_w.append(wm.weights[cj])
        clean_w.append(wm.weights[sj & ~cj])
    corrupt_w = np.concatenate(corrupt_w)
    clean_w = np.concatenate(clean_w)
    return {
        "median_corrupted": float(np.median(corrupt_w)),
        "median_clean": float(np.median(clean_w)),
        "n_corrupted": int(corrupt_w.size),
        "n_clean": int(clean_w.size),
    }
