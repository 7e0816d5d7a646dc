"""Static plot emission for audits, run curves and weight maps."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def plot_error_quantiles(stats: dict, path: str | Path) -> Path:
    """Bar chart of pool error rate by top-confidence quantile."""
    path = Path(path)
    names = ["overall"] + list(stats["quantiles"])
    values = [stats["overall"]] + [stats["quantiles"][k] for k in stats["quantiles"]]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(names, [100 * v for v in values], color="steelblue")
    ax.set_ylabel("pseudo-label error rate (%)")
    ax.set_title(f"errors by confidence quantile (n={stats['count']})")
    for i, v in enumerate(values):
        ax.text(i, 100 * v, f"{100 * v:.2f}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_metric_curves(events: list[dict], path: str | Path, metric_keys=None) -> Path:
    """Per-iteration metric curves from a run log."""
    path = Path(path)
    rows = [e for e in events if e.get("event") == "iteration_completed"]
    fig, ax = plt.subplots(figsize=(6, 4))
    by_run: dict[str, list] = {}
    for e in rows:
        by_run.setdefault(e.get("run", "run"), []).append(e)
    for run, entries in by_run.items():
        entries.sort(key=lambda e: e["iteration"])
        xs = [e["iteration"] for e in entries]
        metrics = entries[0]["metrics"]
        flat = metrics if not any(isinstance(v, dict) for v in metrics.values()) else None
        keys = metric_keys or (
            [k for k, v in metrics.items() if isinstance(v, float)]
            if flat is not None
            else ["mean_iou"]
        )
        for key in keys:
            ys = []
            for e in entries:
                m = e["metrics"]
                if any(isinstance(v, dict) for v in m.values()):  # per-role metrics
                    ys.append(np.mean([v[key] for v in m.values() if isinstance(v, dict)]))
                else:
                    ys.append(m.get(key))
            ax.plot(xs, ys, marker="o", label=f"{run}:{key}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("metric")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_weight_heatmap(
    weights: np.ndarray, path: str | Path, image: np.ndarray | None = None
) -> Path:
    """Dynamic-weight map rendered next to its image, when given."""
    path = Path(path)
    ncols = 2 if image is not None else 1
    fig, axes = plt.subplots(1, ncols, figsize=(4 * ncols, 4))
    axes = np.atleast_1d(axes)
    if image is not None:
        axes[0].imshow(image)
        axes[0].set_title("input")
        axes[0].axis("off")
    im = axes[-1].imshow(weights, vmin=0.0, vmax=1.0, cmap="viridis")
    axes[-1].set_title("dynamic weight")
    axes[-1].axis("off")
    fig.colorbar(im, ax=axes[-1], fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
