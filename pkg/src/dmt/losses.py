"""Disagreement-weighted losses for mutual training.

Reference path: pure numpy, float64. The torch training path in
``dmt.trainer`` mirrors these definitions in single precision.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

PROB_SUM_TOL = 1e-5
LOG_FLOOR = 1e-12  # probability clamp before log


class WeightCase(enum.IntEnum):
    AGREEMENT = 0
    NEGATIVE_DISAGREEMENT = 1
    POSITIVE_DISAGREEMENT = 2
    IGNORED = 3  # only in pixel maps, for ignore-labelled pixels


@dataclass(frozen=True)
class GammaPair:
    """Exponents re-scaling the agreement / negative-disagreement weights."""

    gamma1: float
    gamma2: float | None = None

    def __post_init__(self):
        if self.gamma2 is None:
            object.__setattr__(self, "gamma2", float(self.gamma1))
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError(f"gammas must be non-negative, got {self}")


@dataclass(frozen=True)
class DynamicWeightResult:
    weight: float
    case: WeightCase


@dataclass(frozen=True)
class WeightMap:
    """Per-pixel dynamic weights with their case codes (IGNORED where masked)."""

    weights: np.ndarray  # (H, W) float64
    cases: np.ndarray  # (H, W) uint8, WeightCase values


@dataclass(frozen=True)
class LossBreakdown:
    labeled: float
    unlabeled: float

    @property
    def combined(self) -> float:
        return self.labeled + self.unlabeled


class MixupResult(NamedTuple):
    inputs: np.ndarray
    targets: np.ndarray
    weights: np.ndarray
    pairing: np.ndarray  # permutation used for the partner batch


def validate_probability_vector(p: np.ndarray) -> np.ndarray:
    """Check entries in [0, 1] and unit sum; returns the float64 array."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"probability vector must be 1-D non-empty, got shape {p.shape}")
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("probability entries must lie in [0, 1]")
    s = float(p.sum())
    if abs(s - 1.0) > PROB_SUM_TOL:
        raise ValueError(f"probabilities must sum to 1 within {PROB_SUM_TOL}, got {s}")
    return p


def entropy(p: np.ndarray) -> float:
    """Shannon entropy -sum(p log p) in nats, with 0 log 0 := 0."""
    p = validate_probability_vector(p)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def cross_entropy(label: int, p: np.ndarray) -> float:
    """-log p[label], clamping the probability at LOG_FLOOR."""
    p = np.asarray(p, dtype=np.float64)
    label = int(label)
    if label < 0 or label >= p.shape[-1]:
        raise IndexError(f"class index {label} out of range for {p.shape[-1]} classes")
    return float(-np.log(max(p[label], LOG_FLOOR)))


def dynamic_weight(
    y_a: int, c_a: float, p_b_vec: np.ndarray, gammas: GammaPair
) -> DynamicWeightResult:
    """Disagreement-based loss weight for one pseudo-labelled sample.

    ``y_a``/``c_a`` come from the frozen labeller; ``p_b_vec`` is the
    live model's predicted distribution. Three cases:
    agreement -> p_b**gamma1; disagreement with c_a >= c_b ->
    p_b**gamma2; disagreement with higher live confidence -> 0.
    """
    p_b_vec = validate_probability_vector(p_b_vec)
    if y_a < 0 or y_a >= p_b_vec.size:
        raise IndexError(f"pseudo label {y_a} out of range for {p_b_vec.size} classes")
    if not 0.0 < c_a <= 1.0:
        raise ValueError(f"confidence must be in (0, 1], got {c_a}")
    y_b = int(np.argmax(p_b_vec))  # ties resolve to the lowest index
    c_b = float(p_b_vec[y_b])
    p_b = float(p_b_vec[y_a])
    if y_a == y_b:
        return DynamicWeightResult(p_b ** gammas.gamma1, WeightCase.AGREEMENT)
    if c_a >= c_b:
        return DynamicWeightResult(p_b ** gammas.gamma2, WeightCase.NEGATIVE_DISAGREEMENT)
    return DynamicWeightResult(0.0, WeightCase.POSITIVE_DISAGREEMENT)


def dynamic_weight_array(
    y_a: np.ndarray, c_a: np.ndarray, p_b: np.ndarray, gammas: GammaPair
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised dynamic_weight over n samples; returns (weights, cases)."""
    y_a = np.asarray(y_a, dtype=np.int64)
    c_a = np.asarray(c_a, dtype=np.float64)
    p_b = np.asarray(p_b, dtype=np.float64)
    n, n_classes = p_b.shape
    if y_a.shape != (n,) or c_a.shape != (n,):
        raise ValueError("y_a, c_a and p_b must agree on the sample dimension")
    if np.any(y_a < 0) or np.any(y_a >= n_classes):
        raise IndexError("pseudo label out of class range")
    y_b = np.argmax(p_b, axis=1)
    c_b = p_b[np.arange(n), y_b]
    p_at_pseudo = p_b[np.arange(n), y_a]
    agree = y_b == y_a
    negative = ~agree & (c_a >= c_b)
    cases = np.full(n, WeightCase.POSITIVE_DISAGREEMENT, dtype=np.uint8)
    cases[agree] = WeightCase.AGREEMENT
    cases[negative] = WeightCase.NEGATIVE_DISAGREEMENT
    weights = np.zeros(n, dtype=np.float64)
    weights[agree] = p_at_pseudo[agree] ** gammas.gamma1
    weights[negative] = p_at_pseudo[negative] ** gammas.gamma2
    return weights, cases


def dynamic_weight_map(
    labels: np.ndarray,
    confidences: np.ndarray,
    p_b_map: np.ndarray,
    gammas: GammaPair,
    ignore_index: int = 255,
) -> WeightMap:
    """Apply dynamic_weight per pixel; ignore-labelled pixels get weight 0."""
    labels = np.asarray(labels)
    confidences = np.asarray(confidences, dtype=np.float64)
    p_b_map = np.asarray(p_b_map, dtype=np.float64)
    if p_b_map.ndim != 3:
        raise ValueError(f"probability map must be (H, W, C), got {p_b_map.shape}")
    h, w, _ = p_b_map.shape
    if labels.shape != (h, w) or confidences.shape != (h, w):
        raise ValueError(
            f"shape mismatch: labels {labels.shape}, confidences "
            f"{confidences.shape}, map {p_b_map.shape[:2]}"
        )
    scored = labels != ignore_index
    weights = np.zeros((h, w), dtype=np.float64)
    cases = np.full((h, w), WeightCase.IGNORED, dtype=np.uint8)
    if scored.any():
        w_flat, c_flat = dynamic_weight_array(
            labels[scored].astype(np.int64),
            confidences[scored],
            p_b_map[scored],
            gammas,
        )
        weights[scored] = w_flat
        cases[scored] = c_flat
    return WeightMap(weights=weights, cases=cases)


def unlabeled_loss(
    batch: Sequence[tuple[int, float, np.ndarray]],
    gammas: GammaPair,
    n_total: int,
) -> float:
    """Weighted pseudo-label cross-entropy, averaged by the full batch size.

    ``batch`` holds (pseudo label, labeller confidence, live model
    distribution) triplets; ``n_total`` counts labelled and unlabelled
    samples together.
    """
    if n_total <= 0:
        raise ValueError(f"batch size must be positive, got {n_total}")
    total = 0.0
    for y_a, c_a, p_b_vec in batch:
        res = dynamic_weight(y_a, c_a, p_b_vec, gammas)
        if res.weight > 0.0:
            total += res.weight * cross_entropy(y_a, p_b_vec)
    return total / n_total


def labeled_loss(
    batch: Sequence[tuple[int, np.ndarray]], n_total: int
) -> float:
    """Plain cross-entropy over ground-truth pairs, averaged by n_total."""
    if n_total <= 0:
        raise ValueError(f"batch size must be positive, got {n_total}")
    total = 0.0
    for gt, p_vec in batch:
        total += cross_entropy(gt, validate_probability_vector(p_vec))
    return total / n_total


def combined_loss(
    labeled_batch: Sequence[tuple[int, np.ndarray]],
    unlabeled_batch: Sequence[tuple[int, float, np.ndarray]],
    gammas: GammaPair,
    n_total: int | None = None,
) -> LossBreakdown:
    """Sum of labelled and unlabelled losses with a shared denominator."""
    n = len(labeled_batch) + len(unlabeled_batch)
    if n_total is None:
        n_total = n
    elif n_total != n:
        raise ValueError(f"n_total={n_total} does not match batch of {n} samples")
    return LossBreakdown(
        labeled=labeled_loss(labeled_batch, n_total),
        unlabeled=unlabeled_loss(unlabeled_batch, gammas, n_total),
    )


def gamma_schedule(
    t: int | float, t_max: int | float, gamma_max: float, sign: int = 1
) -> float:
    """Step-dependent gamma: gamma_max * exp(sign * 5 * (1 - t/t_max)^2).

    The default positive sign starts huge (gamma_max * e^5 at t=0) and
    decays to gamma_max, suppressing pseudo-label gradients while the
    freshly initialised model is still uninformative. ``sign=-1`` gives
    the ramp-up alternative.
    """
    if t_max <= 0:
        raise ValueError(f"t_max must be positive, got {t_max}")
    if t < 0:
        raise ValueError(f"step index must be non-negative, got {t}")
    if t > t_max:
        warnings.warn(f"step {t} beyond t_max={t_max}; clamping", stacklevel=2)
        t = t_max
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    return float(gamma_max * np.exp(sign * 5.0 * (1.0 - t / t_max) ** 2))


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise IndexError("label out of class range")
    out = np.zeros((labels.size, n_classes), dtype=np.float64)
    out[np.arange(labels.size), labels] = 1.0
    return out.reshape(*labels.shape, n_classes)


def mixup_batch(
    inputs: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
    lam: float,
    rng: np.random.Generator,
) -> MixupResult:
    """Convex-combine a batch with a shuffled pairing of itself.

    Interpolates inputs, one-hot targets and the per-sample dynamic
    weights by the same lambda, so weighting survives mixup.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    n = inputs.shape[0]
    if targets.shape[0] != n or weights.shape[0] != n:
        raise ValueError("inputs, targets and weights must align on the batch axis")
    perm = rng.permutation(n)
    mixed_inputs = lam * inputs + (1.0 - lam) * inputs[perm]
    mixed_targets = lam * targets + (1.0 - lam) * targets[perm]
    mixed_weights = lam * weights + (1.0 - lam) * weights[perm]
    return MixupResult(mixed_inputs, mixed_targets, mixed_weights, perm)


# ---------------------------------------------------------------------------
# logit-space evaluation, used by the finite-difference gradient checks
# ---------------------------------------------------------------------------


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def combined_loss_from_logits(
    labeled_logits: np.ndarray,
    labels: np.ndarray,
    unlabeled_logits: np.ndarray,
    pseudo_labels: np.ndarray,
    pseudo_confidences: np.ndarray,
    gammas: GammaPair,
) -> LossBreakdown:
    """combined_loss evaluated on raw live-model logits (softmax inside)."""
    lab = [(int(y), p) for y, p in zip(labels, softmax(labeled_logits))]
    unl = [
        (int(y), float(c), p)
        for y, c, p in zip(pseudo_labels, pseudo_confidences, softmax(unlabeled_logits))
    ]
    return combined_loss(lab, unl, gammas)


def combined_loss_logit_grad(
    labeled_logits: np.ndarray,
    labels: np.ndarray,
    unlabeled_logits: np.ndarray,
    pseudo_labels: np.ndarray,
    pseudo_confidences: np.ndarray,
    gammas: GammaPair,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradient of combined_loss_from_logits w.r.t. both logit blocks.

    The unlabelled term differentiates through the weight itself: with
    s = softmax(z)[y_a] and weight s**g, d/dz_k of -s**g * log(s) is
    -s**g * (g*log(s) + 1) * (1[k=y_a] - p_k). Case membership is
    locally constant away from decision boundaries.
    """
    labeled_logits = np.asarray(labeled_logits, dtype=np.float64)
    unlabeled_logits = np.asarray(unlabeled_logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pseudo_labels = np.asarray(pseudo_labels, dtype=np.int64)
    n_total = labeled_logits.shape[0] + unlabeled_logits.shape[0]

    p_lab = softmax(labeled_logits)
    grad_lab = p_lab - one_hot(labels, p_lab.shape[1])
    grad_lab /= n_total

    p_unl = softmax(unlabeled_logits)
    grad_unl = np.zeros_like(p_unl)
    if unlabeled_logits.shape[0]:
        _, cases = dynamic_weight_array(
            pseudo_labels, np.asarray(pseudo_confidences, dtype=np.float64), p_unl, gammas
        )
        idx = np.arange(p_unl.shape[0])
        s = p_unl[idx, pseudo_labels]
        g = np.where(cases == WeightCase.AGREEMENT, gammas.gamma1, gammas.gamma2)
        coef = -(s**g) * (g * np.log(np.maximum(s, LOG_FLOOR)) + 1.0)
        direction = one_hot(pseudo_labels, p_unl.shape[1]) - p_unl
        grad_unl = coef[:, None] * direction
        grad_unl[cases == WeightCase.POSITIVE_DISAGREEMENT] = 0.0
        grad_unl /= n_total
    return grad_lab, grad_unl
