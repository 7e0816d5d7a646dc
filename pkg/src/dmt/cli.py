"""Command-line harness: splits, training runs, labelling, audits, plots."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, config_hash, load_config, preset_names
from .trainer import CLASSIFICATION_VARIANTS, SEGMENTATION_VARIANTS


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="config file path or preset name")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default="runs/out", help="output directory")
    p.add_argument(
        "--data-dir",
        default=os.environ.get("DMT_DATA_DIR"),
        help="dataset directory (defaults to $DMT_DATA_DIR)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dmt",
        description="Dynamic mutual training harness "
        f"(presets: {', '.join(preset_names())})",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="emit the deterministic dataset split as JSON")
    _common_flags(p)

    p = sub.add_parser("baseline", help="supervised training on the labeled subset")
    _common_flags(p)

    p = sub.add_parser("label", help="offline pseudo-label generation and selection")
    _common_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument(
        "--policy",
        default="top-fraction",
        choices=["fixed-threshold", "top-fraction", "class-balanced", "cbst-renormalized"],
    )
    p.add_argument("--param", type=float, default=0.2, help="threshold T or fraction alpha")

    p = sub.add_parser("dmt", help="run the iterative mutual-training loop")
    _common_flags(p)

    p = sub.add_parser("ablate", help="run an ablation strategy")
    p.add_argument(
        "variant",
        choices=sorted(set(CLASSIFICATION_VARIANTS + SEGMENTATION_VARIANTS) - {"dmt"}),
    )
    _common_flags(p)

    p = sub.add_parser("eval", help="metrics for a checkpoint")
    _common_flags(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("stats", help="pseudo-label error report by confidence quantile")
    _common_flags(p)
    p.add_argument("--labels", default=None, help="existing records store to audit")

    p = sub.add_parser("plot", help="emit static plot images")
    _common_flags(p)
    p.add_argument("--kind", choices=["curves", "quantiles", "weights"], default="curves")
    p.add_argument("--checkpoint", default=None, help="checkpoint for weight maps")
    p.add_argument("--labels", default=None, help="pseudo-label store for weight maps")
    p.add_argument("--index", type=int, default=0, help="sample index for weight maps")
    return parser


def _load(args) -> tuple:
    overrides = {} if args.seed is None else {"seed": args.seed}
    cfg = load_config(args.config, overrides)
    return cfg, Path(args.out)


def _cmd_split(args) -> int:
    from .experiments import make_dataset, make_experiment_split

    cfg, out = _load(args)
    data = make_dataset(cfg, args.data_dir)
    split = make_experiment_split(cfg, data)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "split.json"
    split.save(path)
    print(
        f"split: {len(split.labeled_ids)} labeled, {len(split.unlabeled_ids)} "
        f"unlabeled, {len(split.valtiny_ids)} valtiny -> {path}"
    )
    return 0


def _cmd_baseline(args) -> int:
    from .experiments import make_dataset, make_experiment_split
    from .trainer import run_supervised_baseline

    cfg, out = _load(args)
    data = make_dataset(cfg, args.data_dir)
    split = make_experiment_split(cfg, data)
    result = run_supervised_baseline(cfg, data, split, out)
    print(f"baseline ({result['epochs']} epochs): {result['metrics']}")
    return 0


def _cmd_label(args) -> int:
    from .experiments import make_dataset, make_experiment_split
    from .models import Backbone
    from .pseudo import save_pseudo_labels, threshold_pseudo_labels
    from .trainer import (
        _capped_unlabeled,
        label_classification_pool,
        label_segmentation_pool,
    )

    cfg, out = _load(args)
    data = make_dataset(cfg, args.data_dir)
    split = make_experiment_split(cfg, data)
    pool = _capped_unlabeled(cfg, split)
    model = Backbone.load(args.checkpoint)
    if cfg.task() == "classification":
        if args.policy == "fixed-threshold":
            probs = model.predict_proba(data.inputs[pool])
            records = threshold_pseudo_labels(
                probs, args.param, sample_ids=[int(i) for i in pool],
                source_model=Path(args.checkpoint).stem,
            )
            save_pseudo_labels(records, out)
            kept = sum(r.label >= 0 for r in records)
        else:
            records = label_classification_pool(
                model, data.inputs, pool, args.param, out,
                source_model=Path(args.checkpoint).stem, iteration=1,
                selection=args.policy,
            )
            kept = len(records)
        print(f"labeled {kept}/{pool.size} samples -> {out}")
    else:
        if args.policy in ("fixed-threshold", "top-fraction"):
            raise ConfigError(f"policy {args.policy!r} is sample-level; segmentation "
                              "uses class-balanced or cbst-renormalized")
        maps = label_segmentation_pool(
            model, data.images, pool, args.param, out,
            source_model=Path(args.checkpoint).stem, iteration=1,
            selection=args.policy,
        )
        print(f"labeled {len(maps)} maps -> {out}")
    return 0


def _cmd_dmt(args) -> int:
    from .experiments import run_variant

    cfg, out = _load(args)
    result = run_variant("dmt", cfg, out, args.data_dir)
    print(f"dmt final: {result['result']['final_metrics']}")
    return 0


def _cmd_ablate(args) -> int:
    from .experiments import run_variant

    cfg, out = _load(args)
    result = run_variant(args.variant, cfg, out, args.data_dir)
    print(f"{args.variant} final: {result['result']['final_metrics']}")
    return 0


def _cmd_eval(args) -> int:
    from .experiments import make_dataset, make_experiment_split
    from .models import Backbone
    from .trainer import evaluate_classifier, evaluate_segmenter

    cfg, out = _load(args)
    data = make_dataset(cfg, args.data_dir)
    split = make_experiment_split(cfg, data)
    model = Backbone.load(args.checkpoint)
    rows = []
    if cfg.task() == "classification":
        m = evaluate_classifier(model, data.test_inputs, data.test_labels)
        rows.append(("test", m["accuracy"], m["fine_grained"]))
        val_ids = np.asarray(split.valtiny_ids)
        if val_ids.size:
            mv = evaluate_classifier(model, data.inputs[val_ids], data.labels[val_ids])
            rows.append(("valtiny", mv["accuracy"], mv["fine_grained"]))
        print(f"{'subset':<10}{'accuracy':>12}{'fine_grained':>14}")
        for name, acc, fg in rows:
            print(f"{name:<10}{acc:>12.4f}{fg:>14.4f}")
    else:
        m = evaluate_segmenter(model, data.test_images, data.test_masks, data.n_classes)
        print(f"{'subset':<10}{'mean_iou':>12}")
        print(f"{'test':<10}{m['mean_iou']:>12.4f}")
    return 0


def _cmd_stats(args) -> int:
    from .experiments import make_dataset, pseudo_label_audit
    from .pseudo import load_pseudo_labels, pseudo_label_error_stats

    cfg, out = _load(args)
    if args.labels:
        data = make_dataset(cfg, args.data_dir)
        records = load_pseudo_labels(args.labels)
        gt = {int(i): int(lab) for i, lab in enumerate(data.labels)}
        stats = pseudo_label_error_stats(records, gt)
    else:
        stats = pseudo_label_audit(cfg, out, args.data_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "stats.json").write_text(json.dumps(stats, indent=2))
    print(f"{'slice':<12}{'error rate':>12}")
    print(f"{'overall':<12}{stats['overall']:>12.4f}")
    for name, rate in stats["quantiles"].items():
        print(f"{name:<12}{rate:>12.4f}")
    return 0


def _cmd_plot(args) -> int:
    from .plots import plot_error_quantiles, plot_metric_curves, plot_weight_heatmap
    from .runlog import read_events

    cfg, out = _load(args)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "curves":
        events = read_events(out)
        if not events:
            raise ConfigError(f"no run log under {out}")
        path = plot_metric_curves(events, out / "curves.png")
    elif args.kind == "quantiles":
        stats_path = out / "stats.json"
        if not stats_path.exists():
            raise ConfigError(f"{stats_path} not found; run the stats command first")
        path = plot_error_quantiles(json.loads(stats_path.read_text()), out / "quantiles.png")
    else:
        if not (args.checkpoint and args.labels):
            raise ConfigError("weight maps need --checkpoint and --labels")
        from .experiments import make_dataset
        from .losses import dynamic_weight_map
        from .models import Backbone
        from .pseudo import load_pseudo_labels

        data = make_dataset(cfg, args.data_dir)
        maps = load_pseudo_labels(args.labels)
        pmap = maps[args.index]
        model = Backbone.load(args.checkpoint)
        image = data.images[int(pmap.sample_id)]
        probs = model.predict_proba(image[None])[0]
        wm = dynamic_weight_map(pmap.labels, pmap.confidences, probs, cfg.gammas())
        path = plot_weight_heatmap(wm.weights, out / "weights.png", image=image)
    print(f"wrote {path}")
    return 0


_COMMANDS = {
    "split": _cmd_split,
    "baseline": _cmd_baseline,
    "label": _cmd_label,
    "dmt": _cmd_dmt,
    "ablate": _cmd_ablate,
    "eval": _cmd_eval,
    "stats": _cmd_stats,
    "plot": _cmd_plot,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as e:  # one-line machine-parsable failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
