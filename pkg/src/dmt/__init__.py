"""Dynamic mutual training: semi-supervised learning where two models'
disagreement re-weights the pseudo-label loss, run as an iterative
curriculum over growing pseudo-label fractions."""

from .losses import (
    DynamicWeightResult,
    GammaPair,
    LossBreakdown,
    WeightCase,
    combined_loss,
    dynamic_weight,
    dynamic_weight_map,
    entropy,
    gamma_schedule,
    labeled_loss,
    mixup_batch,
    unlabeled_loss,
)
from .metrics import accuracy, baseline_epochs, fine_grained_score, mean_iou
from .pseudo import (
    PseudoLabelMap,
    PseudoLabelRecord,
    class_balanced_select,
    cbst_renormalized_select,
    load_pseudo_labels,
    pseudo_label_error_stats,
    save_pseudo_labels,
    threshold_pseudo_labels,
    top_fraction_select,
)
from .splits import SplitSpec, difference_maximized_sampling, make_split

__version__ = "0.1.0"
