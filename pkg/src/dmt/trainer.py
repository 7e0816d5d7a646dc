"""Iterative mutual-training loops for classification and segmentation,
plus the ablation variants and batch composition machinery."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .augment import augment_images, augment_segmentation, jitter_points
from .config import ConfigError, ExperimentConfig, config_hash
from .datasets import ClassificationDataset, SegmentationDataset
from .losses import gamma_schedule
from .metrics import (
    EmaState,
    accuracy,
    baseline_epochs,
    confusion_matrix,
    ema_update,
    fine_grained_score,
    mean_iou,
)
from .models import Backbone, make_backbone
from .pseudo import (
    IGNORE_INDEX,
    class_balanced_select,
    cbst_renormalized_select,
    load_pseudo_labels,
    save_pseudo_labels,
    top_fraction_select,
)
from .runlog import append_event, completed_iterations, read_events
from .splits import SplitSpec

CLASSIFICATION_VARIANTS = ("dmt", "online-st", "cbst", "unit-weight", "dmt-naive", "dmt-flip")
SEGMENTATION_VARIANTS = ("dmt", "online-st", "cbst", "dst", "dmt-naive", "dmt-flip")
_WEIGHT_MODE = {
    "dmt": "dynamic",
    "dst": "dynamic",
    "cbst": "unit",
    "unit-weight": "unit",
    "dmt-naive": "naive",
    "dmt-flip": "flip",
}


def derive_seed(base: int, *indices: int) -> int:
    """Previously-unused deterministic seed for (iteration, role, ...) keys."""
    return int(np.random.SeedSequence([base, *indices]).generate_state(1)[0])


@dataclass(frozen=True)
class BatchComposition:
    labeled_per_batch: int
    unlabeled_per_batch: int

    def __post_init__(self):
        if self.labeled_per_batch < 0 or self.unlabeled_per_batch < 0:
            raise ValueError("batch quotas must be non-negative")
        if self.labeled_per_batch + self.unlabeled_per_batch == 0:
            raise ValueError("batch composition must request at least one sample")


class _PoolCycler:
    """Without-replacement draws; reshuffles when the pool runs out."""

    def __init__(self, ids: np.ndarray, rng: np.random.Generator):
        self.ids = np.asarray(ids)
        self.rng = rng
        self._order = rng.permutation(self.ids.size)
        self._pos = 0

    def draw(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            take = min(k, self._order.size - self._pos)
            out.append(self._order[self._pos : self._pos + take])
            self._pos += take
            k -= take
            if self._pos == self._order.size:
                self._order = self.rng.permutation(self.ids.size)
                self._pos = 0
        return self.ids[np.concatenate(out)] if out else self.ids[:0]


class MixedBatchSampler:
    """Composes labeled/pseudo-labeled batches at a fixed ratio.

    An epoch covers the pool that lasts longest at its quota; the other
    pool cycles with reshuffling.
    """

    def __init__(
        self,
        labeled_ids,
        pseudo_ids,
        composition: BatchComposition,
        rng: np.random.Generator,
    ):
        labeled_ids = np.asarray(labeled_ids)
        pseudo_ids = np.asarray(pseudo_ids)
        if composition.labeled_per_batch > 0 and labeled_ids.size == 0:
            raise ConfigError("labeled quota requested but the labeled pool is empty")
        if composition.unlabeled_per_batch > 0 and pseudo_ids.size == 0:
            raise ConfigError("unlabeled quota requested but the pseudo pool is empty")
        self.composition = composition
        self._labeled = _PoolCycler(labeled_ids, rng)
        self._pseudo = _PoolCycler(pseudo_ids, rng)
        lengths = []
        if composition.labeled_per_batch > 0:
            lengths.append(math.ceil(labeled_ids.size / composition.labeled_per_batch))
        if composition.unlabeled_per_batch > 0:
            lengths.append(math.ceil(pseudo_ids.size / composition.unlabeled_per_batch))
        self.batches_per_epoch = max(lengths)

    def draw(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            self._labeled.draw(self.composition.labeled_per_batch),
            self._pseudo.draw(self.composition.unlabeled_per_batch),
        )

    def epoch(self):
        for _ in range(self.batches_per_epoch):
            yield self.draw()


def compose_batch(labeled_pool, pseudo_pool, composition: BatchComposition, rng):
    """One mixed batch of ids, tagged by position (labeled first)."""
    return MixedBatchSampler(labeled_pool, pseudo_pool, composition, rng).draw()


# ---------------------------------------------------------------------------
# torch-side dynamic weights (single precision, mirrors dmt.losses)
# ---------------------------------------------------------------------------


def pseudo_weights_torch(
    probs_b: torch.Tensor,
    y_a: torch.Tensor,
    c_a: torch.Tensor,
    gamma1: float,
    gamma2: float,
    mode: str = "dynamic",
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-sample (weights, targets, cases) for flat (n, C) probabilities.

    ``mode``: dynamic = three-case weighting; unit = all ones;
    naive = probability of the pseudo class, no case split; flip =
    dynamic, except positive disagreement flips the target to the live
    prediction with weight (1 - c_a) ** gamma2.
    """
    y_b = probs_b.argmax(dim=1)
    c_b = probs_b.gather(1, y_b[:, None]).squeeze(1)
    p_at = probs_b.gather(1, y_a[:, None]).squeeze(1)
    agree = y_b == y_a
    negative = ~agree & (c_a >= c_b)
    positive = ~agree & (c_a < c_b)
    cases = torch.zeros_like(y_a)
    cases[negative] = 1
    cases[positive] = 2
    targets = y_a.clone()
    if mode == "unit":
        return torch.ones_like(p_at), targets, cases
    if mode == "naive":
        return p_at, targets, cases
    weights = torch.zeros_like(p_at)
    weights[agree] = p_at[agree] ** gamma1
    weights[negative] = p_at[negative] ** gamma2
    if mode == "flip":
        weights[positive] = (1.0 - c_a[positive]) ** gamma2
        targets[positive] = y_b[positive]
    elif mode != "dynamic":
        raise ValueError(f"unknown weight mode {mode!r}")
    return weights, targets, cases


def online_st_mask(probs: torch.Tensor, threshold: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Live argmax pseudo labels with a strict-threshold keep mask."""
    conf, pred = probs.max(dim=1)
    return pred, (conf > threshold).float()


def _make_optimizer(net, cfg: ExperimentConfig, lr: float, total_steps: int):
    opt = torch.optim.SGD(
        net.parameters(), lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    if cfg.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, total_steps))
    elif cfg.lr_schedule == "poly":
        sched = torch.optim.lr_scheduler.LambdaLR(
            opt, lambda t: (1.0 - t / max(1, total_steps)) ** cfg.poly_power
        )
    else:
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda t: 1.0)
    return opt, sched


def _augment_classification(inputs: np.ndarray, cfg: ExperimentConfig, rng) -> np.ndarray:
    if inputs.size == 0 or cfg.augmentation == "none":
        return inputs
    if cfg.augmentation == "jitter":
        return jitter_points(inputs, rng, std=cfg.jitter_std)
    if cfg.augmentation == "randaug-cutout":
        return augment_images(inputs, rng)
    raise ConfigError(f"augmentation {cfg.augmentation!r} not usable for classification")


# ---------------------------------------------------------------------------
# classification engine
# ---------------------------------------------------------------------------


def train_classifier(
    backbone: Backbone,
    cfg: ExperimentConfig,
    labeled_inputs: np.ndarray,
    labeled_targets: np.ndarray,
    pseudo_inputs: np.ndarray | None,
    pseudo_targets: np.ndarray | None,
    pseudo_conf: np.ndarray | None,
    epochs: int,
    seed: int,
    weight_mode: str = "dynamic",
    use_gamma_schedule: bool = False,
    online_st: bool = False,
    lr: float | None = None,
    trace: list | None = None,
) -> tuple[EmaState, dict]:
    """Train in place on a labeled pool plus an optional pseudo pool.

    Dynamic weights come from the live model's detached predictions each
    step; the frozen labeller only contributes (pseudo label,
    confidence) pairs. Returns the EMA shadow and summary stats.
    """
    n_classes = backbone.arch_kwargs.get("n_classes")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    torch.manual_seed(derive_seed(seed, 11))

    has_pseudo = pseudo_inputs is not None and len(pseudo_inputs) > 0
    lab_quota, unl_quota = cfg.batch_composition()
    if not has_pseudo and not online_st:
        lab_quota, unl_quota = cfg.batch_size, 0
    n_pseudo = len(pseudo_inputs) if pseudo_inputs is not None else 0
    sampler = MixedBatchSampler(
        np.arange(len(labeled_inputs)),
        np.arange(n_pseudo),
        BatchComposition(lab_quota, unl_quota),
        rng,
    )
    total_steps = epochs * sampler.batches_per_epoch
    opt, sched = _make_optimizer(
        backbone.net, cfg, lr if lr is not None else cfg.learning_rate, total_steps
    )
    ema = EmaState.from_parameters(backbone.parameter_snapshot(), cfg.ema_decay)

    net = backbone.net
    net.train()
    step = 0
    loss_sum, loss_count = 0.0, 0
    for _ in range(epochs):
        for lab_idx, unl_idx in sampler.epoch():
            if use_gamma_schedule:
                g = gamma_schedule(
                    step, max(1, total_steps - 1), cfg.gamma1,
                    sign=1 if cfg.gamma_schedule_sign == "positive" else -1,
                )
                g1 = g2 = g
            else:
                g1, g2 = cfg.gamma1, cfg.gamma2

            x_lab = _augment_classification(labeled_inputs[lab_idx], cfg, rng)
            y_lab = labeled_targets[lab_idx]
            n_lab = len(lab_idx)
            n_unl = len(unl_idx)
            n_total = n_lab + n_unl

            if n_unl:
                x_unl = _augment_classification(pseudo_inputs[unl_idx], cfg, rng)
                xt_unl = _to_tensor(x_unl)
                with torch.no_grad():
                    probs_b = torch.softmax(net(xt_unl), dim=1)
                if online_st:
                    t_unl, w_unl = online_st_mask(probs_b, cfg.online_st_threshold)
                    cases = torch.full_like(t_unl, 3)
                else:
                    y_a = torch.from_numpy(pseudo_targets[unl_idx]).long()
                    c_a = torch.from_numpy(pseudo_conf[unl_idx]).float()
                    w_unl, t_unl, cases = pseudo_weights_torch(
                        probs_b, y_a, c_a, g1, g2, mode=weight_mode
                    )
            else:
                xt_unl = None

            q_lab = F.one_hot(torch.from_numpy(y_lab).long(), n_classes).float()
            w_lab = torch.ones(n_lab)
            if n_unl:
                q_unl = F.one_hot(t_unl, n_classes).float()
                x_all = torch.cat([_to_tensor(x_lab), xt_unl]) if n_lab else xt_unl
                q_all = torch.cat([q_lab, q_unl]) if n_lab else q_unl
                w_all = torch.cat([w_lab, w_unl]) if n_lab else w_unl
            else:
                x_all, q_all, w_all = _to_tensor(x_lab), q_lab, w_lab

            if cfg.mixup:
                lam = float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
                perm = torch.from_numpy(rng.permutation(n_total))
                x_all = lam * x_all + (1.0 - lam) * x_all[perm]
                q_all = lam * q_all + (1.0 - lam) * q_all[perm]
                w_all = lam * w_all + (1.0 - lam) * w_all[perm]

            logits = net(x_all)
            ce = -(q_all * F.log_softmax(logits, dim=1)).sum(dim=1)
            loss = (w_all * ce).sum() / n_total
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            ema_update(ema, backbone.parameter_snapshot())

            if trace is not None and n_unl and not cfg.mixup:
                ce_unl = ce[n_lab:]
                trace.append(
                    {
                        "step": step,
                        "unlabeled_loss": float((w_unl * ce_unl).sum() / n_total),
                        "case3_ce": float(ce_unl[cases == 2].sum()),
                        "n_total": n_total,
                    }
                )
            loss_sum += float(loss.detach())
            loss_count += 1
            step += 1
    return ema, {"steps": step, "mean_loss": loss_sum / max(1, loss_count)}


def _to_tensor(arr: np.ndarray) -> torch.Tensor:
    from .models import to_input_tensor

    return to_input_tensor(arr)


def evaluate_classifier(
    backbone: Backbone,
    inputs: np.ndarray,
    labels: np.ndarray,
    ema: EmaState | None = None,
) -> dict:
    probs = backbone.predict_proba(inputs)
    out = {
        "accuracy": accuracy(np.argmax(probs, axis=1), labels),
        "fine_grained": fine_grained_score(probs, labels),
    }
    if ema is not None:
        with backbone.using_parameters(ema.shadow):
            probs_ema = backbone.predict_proba(inputs)
        out["ema_accuracy"] = accuracy(np.argmax(probs_ema, axis=1), labels)
    return out


# ---------------------------------------------------------------------------
# segmentation engine
# ---------------------------------------------------------------------------


def train_segmenter(
    backbone: Backbone,
    cfg: ExperimentConfig,
    labeled_images: np.ndarray,
    labeled_masks: np.ndarray,
    pseudo_images: np.ndarray | None,
    pseudo_label_maps: np.ndarray | None,
    pseudo_conf_maps: np.ndarray | None,
    epochs: int,
    seed: int,
    weight_mode: str = "dynamic",
    online_st: bool = False,
    lr: float | None = None,
    trace: list | None = None,
) -> tuple[EmaState, dict]:
    """Per-pixel dynamically-weighted fine-tuning; mirrors train_classifier.

    The loss denominator counts all scored pixels (labeled plus
    non-ignored pseudo pixels) in the batch.
    """
    n_classes = backbone.arch_kwargs.get("n_classes")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    torch.manual_seed(derive_seed(seed, 11))

    has_pseudo = pseudo_images is not None and len(pseudo_images) > 0
    lab_quota, unl_quota = cfg.batch_composition()
    if not has_pseudo and not online_st:
        lab_quota, unl_quota = cfg.batch_size, 0
    sampler = MixedBatchSampler(
        np.arange(len(labeled_images)),
        np.arange(len(pseudo_images) if has_pseudo or online_st else 0),
        BatchComposition(lab_quota, unl_quota),
        rng,
    )
    total_steps = epochs * sampler.batches_per_epoch
    opt, sched = _make_optimizer(backbone.net, cfg, lr if lr is not None else cfg.learning_rate, total_steps)
    ema = EmaState.from_parameters(backbone.parameter_snapshot(), cfg.ema_decay)

    crop = cfg.crop_size or labeled_masks.shape[1]
    net = backbone.net
    net.train()
    step = 0
    loss_sum, loss_count = 0.0, 0
    for _ in range(epochs):
        for lab_idx, unl_idx in sampler.epoch():
            imgs, labels, confs, is_pseudo = [], [], [], []
            for i in lab_idx:
                im, lb, _ = _augment_seg(cfg, labeled_images[i], labeled_masks[i], None, rng, crop)
                imgs.append(im)
                labels.append(lb)
                confs.append(np.ones_like(lb, dtype=np.float32))
                is_pseudo.append(False)
            for i in unl_idx:
                lb_src = (
                    pseudo_label_maps[i]
                    if not online_st
                    else np.zeros_like(pseudo_images[i][..., 0], dtype=np.uint8)
                )
                cf_src = (
                    pseudo_conf_maps[i]
                    if not online_st
                    else np.ones_like(pseudo_images[i][..., 0], dtype=np.float32)
                )
                im, lb, cf = _augment_seg(cfg, pseudo_images[i], lb_src, cf_src, rng, crop)
                imgs.append(im)
                labels.append(lb)
                confs.append(cf)
                is_pseudo.append(True)

            x = _to_tensor(np.stack(imgs))
            lab_t = torch.from_numpy(np.stack(labels)).long()
            conf_t = torch.from_numpy(np.stack(confs)).float()
            pseudo_mask = torch.tensor(is_pseudo)

            n_lab = int(len(lab_idx))
            if len(unl_idx):
                with torch.no_grad():
                    probs_b = torch.softmax(net(x[pseudo_mask]), dim=1)
                if online_st:
                    conf_live, pred_live = probs_b.max(dim=1)
                    not_padding = conf_t[pseudo_mask] > 0
                    live_labels = torch.where(
                        (conf_live > cfg.online_st_threshold) & not_padding,
                        pred_live,
                        torch.full_like(pred_live, IGNORE_INDEX),
                    )
                    lab_t[pseudo_mask] = live_labels
                    conf_t[pseudo_mask] = conf_live.clamp(min=1e-6)

            scored = lab_t != IGNORE_INDEX
            weights = torch.zeros_like(conf_t)
            weights[~pseudo_mask] = scored[~pseudo_mask].float()
            cases = None
            if len(unl_idx):
                sub_labels = lab_t[pseudo_mask]
                sub_scored = scored[pseudo_mask]
                flat_idx = sub_scored.reshape(sub_scored.shape[0], -1)
                p_flat = probs_b.permute(0, 2, 3, 1).reshape(-1, n_classes)
                sel = flat_idx.reshape(-1)
                y_a = sub_labels.reshape(-1)[sel]
                c_a = conf_t[pseudo_mask].reshape(-1)[sel]
                if online_st:
                    w_flat = torch.ones_like(c_a)
                    t_flat = y_a
                    case_flat = torch.full_like(y_a, 3)
                else:
                    w_flat, t_flat, case_flat = pseudo_weights_torch(
                        p_flat[sel], y_a, c_a, cfg.gamma1, cfg.gamma2, mode=weight_mode
                    )
                w_full = torch.zeros(sub_scored.numel())
                w_full[sel] = w_flat
                weights[pseudo_mask] = w_full.reshape(sub_scored.shape)
                new_labels = sub_labels.reshape(-1).clone()
                new_labels[sel] = t_flat
                lab_t[pseudo_mask] = new_labels.reshape(sub_labels.shape)
                case_full = torch.full((sub_scored.numel(),), 3, dtype=torch.long)
                case_full[sel] = case_flat
                cases = case_full.reshape(sub_scored.shape)

            logits = net(x)
            logp = F.log_softmax(logits, dim=1)
            safe_labels = lab_t.clamp(0, n_classes - 1)
            ce = -logp.gather(1, safe_labels[:, None]).squeeze(1)
            n_scored = int(scored.sum())
            loss = (weights * ce * scored).sum() / max(1, n_scored)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            ema_update(ema, backbone.parameter_snapshot())

            if trace is not None and len(unl_idx):
                ce_pseudo = (ce * scored)[pseudo_mask]
                w_pseudo = weights[pseudo_mask]
                case3 = (cases == 2) if cases is not None else torch.zeros_like(ce_pseudo, dtype=torch.bool)
                trace.append(
                    {
                        "step": step,
                        "unlabeled_loss": float((w_pseudo * ce_pseudo).sum() / max(1, n_scored)),
                        "case3_ce": float(ce_pseudo[case3].sum()),
                        "n_scored": n_scored,
                    }
                )
            loss_sum += float(loss.detach())
            loss_count += 1
            step += 1
    return ema, {"steps": step, "mean_loss": loss_sum / max(1, loss_count)}


def _augment_seg(cfg, image, label, conf, rng, crop):
    if cfg.augmentation == "seg-basic":
        return augment_segmentation(image, label, conf, rng, crop=crop)
    return image, label, conf


def evaluate_segmenter(
    backbone: Backbone, images: np.ndarray, masks: np.ndarray, n_classes: int
) -> dict:
    preds = backbone.predict_classes(images)
    cm = confusion_matrix(preds, masks, n_classes)
    return {"mean_iou": mean_iou(cm)}


# ---------------------------------------------------------------------------
# pseudo-labelling glue
# ---------------------------------------------------------------------------


def label_classification_pool(
    labeler: Backbone,
    inputs: np.ndarray,
    pool_ids: np.ndarray,
    alpha: float,
    store_dir: Path,
    source_model: str,
    iteration: int,
    selection: str = "top-fraction",
):
    """Predict a pool, select records, persist them, and reload the store."""
    probs = labeler.predict_proba(inputs[pool_ids])
    if selection == "top-fraction":
        records = top_fraction_select(
            probs, alpha, sample_ids=[int(i) for i in pool_ids],
            source_model=source_model, iteration=iteration,
        )
    elif selection in ("class-balanced", "cbst-renormalized"):
        maps = [p[None, None, :] for p in probs]  # 1x1 "maps": per-sample pixels
        chooser = class_balanced_select if selection == "class-balanced" else cbst_renormalized_select
        chosen = chooser(maps, alpha, sample_ids=[int(i) for i in pool_ids],
                         source_model=source_model, iteration=iteration)
        records = [
            _map_to_record(m)
            for m in chosen
            if m.labels[0, 0] != IGNORE_INDEX
        ]
    else:
        raise ConfigError(f"unknown selection {selection!r}")
    if not records:
        return []
    save_pseudo_labels(records, store_dir, alpha=alpha)
    return load_pseudo_labels(store_dir)


def _map_to_record(m):
    from .pseudo import PseudoLabelRecord

    return PseudoLabelRecord(
        sample_id=m.sample_id,
        label=int(m.labels[0, 0]),
        confidence=float(m.confidences[0, 0]),
        source_model=m.source_model,
        iteration=m.iteration,
    )


def label_segmentation_pool(
    labeler: Backbone,
    images: np.ndarray,
    pool_ids: np.ndarray,
    alpha: float,
    store_dir: Path,
    source_model: str,
    iteration: int,
    selection: str = "class-balanced",
):
    probs = labeler.predict_proba(images[pool_ids])
    maps = [probs[i] for i in range(probs.shape[0])]
    chooser = class_balanced_select if selection == "class-balanced" else cbst_renormalized_select
    chosen = chooser(
        maps, alpha, sample_ids=[int(i) for i in pool_ids],
        source_model=source_model, iteration=iteration,
    )
    save_pseudo_labels(chosen, store_dir, alpha=alpha)
    return load_pseudo_labels(store_dir)


# ---------------------------------------------------------------------------
# experiment runners (resumable)
# ---------------------------------------------------------------------------


def _checkpoint_dir(out_dir) -> Path:
    p = Path(out_dir) / "checkpoints"
    p.mkdir(parents=True, exist_ok=True)
    return p


def _build_backbone(cfg: ExperimentConfig, data, seed: int) -> Backbone:
    arch = cfg.resolved_arch()
    kwargs: dict = {"n_classes": data.n_classes}
    if arch in ("mlp", "rbf"):
        kwargs["in_dim"] = int(np.prod(data.inputs.shape[1:]))
    if cfg.arch_width:
        size_key = {"mlp": "hidden", "rbf": "n_features"}.get(arch, "width")
        kwargs[size_key] = cfg.arch_width
    if arch == "rbf":
        kwargs["lengthscale"] = cfg.rbf_lengthscale
    return make_backbone(arch, seed, **kwargs)


def _capped_unlabeled(cfg: ExperimentConfig, split: SplitSpec) -> np.ndarray:
    pool = np.asarray(split.unlabeled_ids)
    if cfg.unlabeled_cap and pool.size > cfg.unlabeled_cap:
        keep = np.random.default_rng(derive_seed(cfg.seed, 23)).permutation(pool.size)
        pool = np.sort(pool[keep[: cfg.unlabeled_cap]])
    return pool


def run_supervised_baseline(
    cfg: ExperimentConfig, data, split: SplitSpec, out_dir, epochs: int | None = None
) -> dict:
    """Labeled-subset-only training for sqrt(1/ratio) * oracle epochs."""
    chash = config_hash(cfg)
    ckpt = _checkpoint_dir(out_dir) / "baseline.pt"
    epochs = epochs or baseline_epochs(cfg.labeled_ratio, cfg.oracle_epochs)
    lab_ids = np.asarray(split.labeled_ids)
    t0 = time.time()
    model = _build_backbone(cfg, data, derive_seed(cfg.seed, 0, 0))
    if cfg.task() == "classification":
        ema, _ = train_classifier(
            model, cfg, data.inputs[lab_ids], data.labels[lab_ids],
            None, None, None, epochs=epochs, seed=derive_seed(cfg.seed, 0, 1),
        )
        metrics = evaluate_classifier(
            model, data.test_inputs, data.test_labels,
            ema=ema if cfg.eval_with_ema else None,
        )
    else:
        ema, _ = train_segmenter(
            model, cfg, data.images[lab_ids], data.masks[lab_ids],
            None, None, None, epochs=epochs, seed=derive_seed(cfg.seed, 0, 1),
        )
        metrics = evaluate_segmenter(model, data.test_images, data.test_masks, data.n_classes)
    model.save(ckpt, meta={"config_hash": chash, "run": "baseline"})
    event = append_event(
        out_dir,
        {"event": "baseline_completed", "run": "baseline", "epochs": epochs,
         "metrics": metrics, "seconds": round(time.time() - t0, 3)},
        chash,
    )
    return {"metrics": metrics, "checkpoint": str(ckpt), "epochs": epochs, "event": event}


def run_dmt(cfg: ExperimentConfig, data, split: SplitSpec, out_dir, variant: str = "dmt",
            trace: list | None = None) -> dict:
    """Dispatch to the classification or segmentation iterative loop."""
    if cfg.task() == "classification":
        if variant not in CLASSIFICATION_VARIANTS:
            raise ConfigError(
                f"variant {variant!r} is not available for classification "
                f"(choose from {CLASSIFICATION_VARIANTS})"
            )
        return run_dmt_classification(cfg, data, split, out_dir, variant, trace)
    if variant not in SEGMENTATION_VARIANTS:
        raise ConfigError(
            f"variant {variant!r} is not available for segmentation "
            f"(choose from {SEGMENTATION_VARIANTS})"
        )
    return run_dmt_segmentation(cfg, data, split, out_dir, variant, trace)


def run_ablation(variant: str, cfg: ExperimentConfig, data, split: SplitSpec, out_dir,
                 trace: list | None = None) -> dict:
    if variant == "dmt":
        raise ConfigError("'dmt' is the main method; use run_dmt")
    return run_dmt(cfg, data, split, out_dir, variant=variant, trace=trace)


def run_dmt_classification(
    cfg: ExperimentConfig, data: ClassificationDataset, split: SplitSpec, out_dir,
    variant: str = "dmt", trace: list | None = None,
) -> dict:
    """The iterative re-training loop: label the top fraction with the
    frozen previous model, re-initialize, train under the dynamic loss."""
    chash = config_hash(cfg)
    out_dir = Path(out_dir)
    ckpts = _checkpoint_dir(out_dir)
    alphas = cfg.alphas_list()
    lab_ids = np.asarray(split.labeled_ids)
    val_ids = np.asarray(split.valtiny_ids)
    pool = _capped_unlabeled(cfg, split)

    if variant == "online-st":
        return _run_online_st_classification(cfg, data, split, out_dir, chash)

    run_kind = f"{variant}"
    done = completed_iterations(read_events(out_dir), run_kind)
    history = [e for e in read_events(out_dir)
               if e.get("event") == "iteration_completed" and e.get("run") == run_kind]

    weight_mode = _WEIGHT_MODE[variant]
    selection = "top-fraction"
    if variant == "cbst":
        selection = "class-balanced" if cfg.cbst_selection == "direct" else "cbst-renormalized"

    for i in range(done + 1, len(alphas) + 1):
        t0 = time.time()
        if i == 0:
            model = _build_backbone(cfg, data, derive_seed(cfg.seed, 100, 0))
            ema, _ = train_classifier(
                model, cfg, data.inputs[lab_ids], data.labels[lab_ids],
                None, None, None, epochs=cfg.resolved_initial_epochs(),
                seed=derive_seed(cfg.seed, 0, 42),
            )
        else:
            alpha = alphas[i - 1]
            labeler = Backbone.load(ckpts / f"F_{i - 1}.pt")
            records = label_classification_pool(
                labeler, data.inputs, pool, alpha,
                out_dir / "pseudo" / f"iter_{i}", source_model=f"F_{i - 1}",
                iteration=i, selection=selection,
            )
            ids = np.array([r.sample_id for r in records], dtype=np.int64)
            y_a = np.array([r.label for r in records], dtype=np.int64)
            c_a = np.array([r.confidence for r in records], dtype=np.float64)
            if cfg.training_mode == "re-train":
                model = _build_backbone(cfg, data, derive_seed(cfg.seed, 100, i))
            else:
                model = labeler.clone()
            ema, _ = train_classifier(
                model, cfg, data.inputs[lab_ids], data.labels[lab_ids],
                data.inputs[ids], y_a, c_a, epochs=cfg.epochs_per_iteration,
                seed=derive_seed(cfg.seed, i, 42), weight_mode=weight_mode,
                use_gamma_schedule=cfg.gamma_schedule_enabled() and variant == "dmt",
                trace=trace,
            )
        model.save(ckpts / f"F_{i}.pt", meta={"config_hash": chash, "iteration": i})
        metrics = evaluate_classifier(
            model, data.test_inputs, data.test_labels,
            ema=ema if cfg.eval_with_ema else None,
        )
        if val_ids.size:
            val = evaluate_classifier(model, data.inputs[val_ids], data.labels[val_ids])
            metrics["valtiny_accuracy"] = val["accuracy"]
            metrics["valtiny_fine_grained"] = val["fine_grained"]
        event = append_event(
            out_dir,
            {"event": "iteration_completed", "run": run_kind, "iteration": i,
             "alpha": None if i == 0 else alphas[i - 1], "metrics": metrics,
             "seconds": round(time.time() - t0, 3)},
            chash,
        )
        history.append(event)
    final = history[-1]["metrics"]
    return {"history": history, "final_metrics": final,
            "final_checkpoint": str(ckpts / f"F_{len(alphas)}.pt")}


def _run_online_st_classification(cfg, data, split, out_dir, chash) -> dict:
    ckpts = _checkpoint_dir(out_dir)
    previous = [e for e in read_events(out_dir)
                if e.get("event") == "iteration_completed" and e.get("run") == "online-st"]
    if previous:
        return {"history": previous, "final_metrics": previous[-1]["metrics"],
                "final_checkpoint": str(ckpts / "online_st.pt")}
    lab_ids = np.asarray(split.labeled_ids)
    pool = _capped_unlabeled(cfg, split)
    t0 = time.time()
    model = _build_backbone(cfg, data, derive_seed(cfg.seed, 100, 0))
    train_classifier(
        model, cfg, data.inputs[lab_ids], data.labels[lab_ids],
        None, None, None, epochs=cfg.resolved_initial_epochs(),
        seed=derive_seed(cfg.seed, 0, 42),
    )
    ema, _ = train_classifier(
        model, cfg, data.inputs[lab_ids], data.labels[lab_ids],
        data.inputs[pool], np.zeros(pool.size, dtype=np.int64),
        np.ones(pool.size), epochs=cfg.online_st_epochs,
        seed=derive_seed(cfg.seed, 1, 42), online_st=True,
    )
    model.save(ckpts / "online_st.pt", meta={"config_hash": chash})
    metrics = evaluate_classifier(
        model, data.test_inputs, data.test_labels,
        ema=ema if cfg.eval_with_ema else None,
    )
    event = append_event(
        out_dir,
        {"event": "iteration_completed", "run": "online-st", "iteration": 0,
         "metrics": metrics, "seconds": round(time.time() - t0, 3)},
        chash,
    )
    return {"history": [event], "final_metrics": metrics,
            "final_checkpoint": str(ckpts / "online_st.pt")}


def run_dmt_segmentation(
    cfg: ExperimentConfig, data: SegmentationDataset, split: SplitSpec, out_dir,
    variant: str = "dmt", trace: list | None = None, lr_override: float | None = None,
) -> dict:
    """The mutual fine-tuning loop: each iteration, frozen previous-round
    checkpoints label the unlabeled pool class-balanced, and each live
    model fine-tunes from its own previous state."""
    chash = config_hash(cfg)
    out_dir = Path(out_dir)
    ckpts = _checkpoint_dir(out_dir)
    alphas = cfg.alphas_list()
    lab_ids = np.asarray(split.labeled_ids)
    val_ids = np.asarray(split.valtiny_ids)
    pool = _capped_unlabeled(cfg, split)

    single_model = variant in ("dst", "cbst", "online-st")
    roles = ("A",) if single_model else ("A", "B")
    pairing = "self" if single_model else cfg.pairing
    weight_mode = _WEIGHT_MODE.get(variant, "dynamic")
    selection = "class-balanced"
    if variant == "cbst" and cfg.cbst_selection == "renormalized":
        selection = "cbst-renormalized"

    run_kind = variant
    done = completed_iterations(read_events(out_dir), run_kind)
    history = [e for e in read_events(out_dir)
               if e.get("event") == "iteration_completed" and e.get("run") == run_kind]

    if variant == "online-st":
        return _run_online_st_segmentation(cfg, data, split, out_dir, chash)

    subsets = {r: lab_ids for r in roles}
    if cfg.init_policy == "dms" and not single_model:
        from .splits import difference_maximized_sampling

        k = math.ceil(lab_ids.size / 2)
        ids_a, ids_b = difference_maximized_sampling(
            lab_ids.tolist(), k, derive_seed(cfg.seed, 31)
        )
        subsets = {"A": np.asarray(ids_a), "B": np.asarray(ids_b)}
    elif cfg.init_policy == "pretrained":
        raise ConfigError("pretrained init needs explicit checkpoints; use init_model_pair")

    for i in range(done + 1, len(alphas) + 1):
        t0 = time.time()
        iter_metrics = {}
        for ri, role in enumerate(roles):
            if i == 0:
                if cfg.init_policy == "dms" and not single_model:
                    seed = derive_seed(cfg.seed, 100, 0)  # same init, different subsets
                else:
                    seed = derive_seed(cfg.seed, 100, ri)
                model = _build_backbone(cfg, data, seed)
                ids = subsets[role]
                ema, _ = train_segmenter(
                    model, cfg, data.images[ids], data.masks[ids],
                    None, None, None, epochs=cfg.resolved_initial_epochs(),
                    seed=derive_seed(cfg.seed, 0, 42 + ri), lr=lr_override,
                )
            else:
                alpha = alphas[i - 1]
                other = "B" if role == "A" else "A"
                labeler_role = other if pairing == "cross" else role
                labeler = Backbone.load(ckpts / f"F_{labeler_role}_{i - 1}.pt")
                maps = label_segmentation_pool(
                    labeler, data.images, pool, alpha,
                    out_dir / "pseudo" / f"iter_{i}_{role}",
                    source_model=f"F_{labeler_role}_{i - 1}", iteration=i,
                    selection=selection,
                )
                ids = np.array([m.sample_id for m in maps], dtype=np.int64)
                label_maps = np.stack([m.labels for m in maps])
                conf_maps = np.stack([m.confidences for m in maps])
                if cfg.training_mode == "re-train":
                    model = _build_backbone(cfg, data, derive_seed(cfg.seed, 100 + i, ri))
                else:
                    model = Backbone.load(ckpts / f"F_{role}_{i - 1}.pt")
                ema, _ = train_segmenter(
                    model, cfg, data.images[lab_ids], data.masks[lab_ids],
                    data.images[ids], label_maps, conf_maps,
                    epochs=cfg.epochs_per_iteration,
                    seed=derive_seed(cfg.seed, i, 42 + ri),
                    weight_mode=weight_mode, trace=trace, lr=lr_override,
                )
            model.save(ckpts / f"F_{role}_{i}.pt", meta={"config_hash": chash, "iteration": i})
            m = evaluate_segmenter(model, data.test_images, data.test_masks, data.n_classes)
            if val_ids.size:
                m["valtiny_mean_iou"] = evaluate_segmenter(
                    model, data.images[val_ids], data.masks[val_ids], data.n_classes
                )["mean_iou"]
            iter_metrics[role] = m
        event = append_event(
            out_dir,
            {"event": "iteration_completed", "run": run_kind, "iteration": i,
             "alpha": None if i == 0 else alphas[i - 1], "metrics": iter_metrics,
             "seconds": round(time.time() - t0, 3)},
            chash,
        )
        history.append(event)

    last = len(alphas)
    finals = {}
    for role in roles:
        model = Backbone.load(ckpts / f"F_{role}_{last}.pt")
        key = "valtiny_mean_iou" if val_ids.size else "mean_iou"
        finals[role] = history[-1]["metrics"][role][key]
    best_role = max(finals, key=finals.get)
    final_ckpt = ckpts / f"F_{best_role}_{last}.pt"
    final_metrics = history[-1]["metrics"][best_role]
    append_event(
        out_dir,
        {"event": "final_selected", "run": run_kind, "role": best_role,
         "metrics": final_metrics},
        chash,
    )
    return {"history": history, "final_metrics": final_metrics,
            "final_checkpoint": str(final_ckpt), "best_role": best_role}


def _run_online_st_segmentation(cfg, data, split, out_dir, chash) -> dict:
    ckpts = _checkpoint_dir(out_dir)
    previous = [e for e in read_events(out_dir)
                if e.get("event") == "iteration_completed" and e.get("run") == "online-st"]
    if previous:
        return {"history": previous, "final_metrics": previous[-1]["metrics"],
                "final_checkpoint": str(ckpts / "online_st.pt")}
    lab_ids = np.asarray(split.labeled_ids)
    pool = _capped_unlabeled(cfg, split)
    t0 = time.time()
    model = _build_backbone(cfg, data, derive_seed(cfg.seed, 100, 0))
    train_segmenter(
        model, cfg, data.images[lab_ids], data.masks[lab_ids],
        None, None, None, epochs=cfg.resolved_initial_epochs(),
        seed=derive_seed(cfg.seed, 0, 42),
    )
    ema, _ = train_segmenter(
        model, cfg, data.images[lab_ids], data.masks[lab_ids],
        data.images[pool], None, None, epochs=cfg.online_st_epochs,
        seed=derive_seed(cfg.seed, 1, 42), online_st=True,
    )
    model.save(ckpts / "online_st.pt", meta={"config_hash": chash})
    metrics = evaluate_segmenter(model, data.test_images, data.test_masks, data.n_classes)
    event = append_event(
        out_dir,
        {"event": "iteration_completed", "run": "online-st", "iteration": 0,
         "metrics": metrics, "seconds": round(time.time() - t0, 3)},
        chash,
    )
    return {"history": [event], "final_metrics": metrics,
            "final_checkpoint": str(ckpts / "online_st.pt")}
