"""Experiment configuration: flat key=value files with typed validation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

from .losses import GammaPair


class ConfigError(Exception):
    pass


DATASETS = ("two-moons", "toy-seg", "cifar10", "cifar10-like", "pascal-voc", "cityscapes")
SEGMENTATION_DATASETS = ("toy-seg", "pascal-voc", "cityscapes")
_DEFAULT_ARCH = {
    "two-moons": "mlp",
    "cifar10": "small-conv",
    "cifar10-like": "small-conv",
    "toy-seg": "tiny-seg",
    "pascal-voc": "tiny-seg",
    "cityscapes": "tiny-seg",
}


def _parse_float(text: str) -> float:
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def _parse_bool(text: str) -> bool:
    if text.lower() in ("true", "on", "yes", "1"):
        return True
    if text.lower() in ("false", "off", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str
    labeled_ratio: float = 0.1
    valtiny_size: int = 200
    gamma1: float = 4.0
    gamma2: float = 4.0
    learning_rate: float = 0.1
    training_mode: str = "re-train"
    epochs_per_iteration: int = 10
    initial_epochs: int = 0  # 0 -> epochs_per_iteration
    oracle_epochs: int = 300
    batch_size: int = 64
    batch_ratio: str = "7:1"
    augmentation: str = "none"
    alphas: str = "0.2,0.4,0.6,0.8,1.0"
    init_policy: str = "distinct-seeds"
    pairing: str = "cross"
    seed: int = 0
    ema_decay: float = 0.999
    eval_with_ema: bool = False
    mixup: bool = False
    mixup_alpha: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: str = "cosine"
    poly_power: float = 0.9
    gamma_schedule: str = "auto"
    gamma_schedule_sign: str = "positive"
    arch: str = ""  # empty -> dataset default
    arch_width: int = 0  # 0 -> architecture default
    n_points: int = 1000
    noise_std: float = 0.2
    jitter_std: float = 0.1
    rbf_lengthscale: float = 0.35
    grid_size: int = 64
    num_classes: int = 4
    n_train: int = 50000
    n_test: int = 10000
    unlabeled_cap: int = 0  # 0 -> use the whole unlabeled subset
    crop_size: int = 0  # 0 -> native resolution
    online_st_threshold: float = 0.9
    online_st_epochs: int = 20
    cbst_selection: str = "renormalized"

    def __post_init__(self):
        checks = [
            (self.dataset in DATASETS, f"dataset must be one of {DATASETS}"),
            (0.0 < self.labeled_ratio <= 1.0, "labeled_ratio must be in (0, 1]"),
            (self.valtiny_size >= 0, "valtiny_size must be non-negative"),
            (self.gamma1 >= 0 and self.gamma2 >= 0, "gammas must be non-negative"),
            (self.learning_rate > 0, "learning_rate must be positive"),
            (self.training_mode in ("fine-tune", "re-train"), "training_mode must be fine-tune or re-train"),
            (self.epochs_per_iteration > 0, "epochs_per_iteration must be positive"),
            (self.initial_epochs >= 0, "initial_epochs must be non-negative"),
            (self.oracle_epochs > 0, "oracle_epochs must be positive"),
            (self.batch_size > 0, "batch_size must be positive"),
            (self.augmentation in ("none", "jitter", "randaug-cutout", "seg-basic"), "unknown augmentation pipeline"),
            (self.init_policy in ("distinct-seeds", "dms", "pretrained"), "unknown init_policy"),
            (self.pairing in ("cross", "self"), "pairing must be cross or self"),
            (0.0 <= self.ema_decay <= 1.0, "ema_decay must be in [0, 1]"),
            (self.mixup_alpha > 0, "mixup_alpha must be positive"),
            (0.0 <= self.momentum < 1.0, "momentum must be in [0, 1)"),
            (self.weight_decay >= 0, "weight_decay must be non-negative"),
            (self.lr_schedule in ("cosine", "poly", "constant"), "unknown lr_schedule"),
            (self.gamma_schedule in ("auto", "on", "off"), "gamma_schedule must be auto/on/off"),
            (self.gamma_schedule_sign in ("positive", "negative"), "gamma_schedule_sign must be positive or negative"),
            (0.0 <= self.online_st_threshold < 1.0, "online_st_threshold must be in [0, 1)"),
            (self.cbst_selection in ("renormalized", "direct"), "cbst_selection must be renormalized or direct"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        self.alphas_list()  # validates the schedule
        self.batch_composition()

    # -- derived views -----------------------------------------------------

    def alphas_list(self) -> tuple[float, ...]:
        try:
            values = tuple(float(a) for a in self.alphas.split(","))
        except ValueError as e:
            raise ConfigError(f"bad alphas: {e}") from None
        if not values or any(not 0 < a <= 1 for a in values):
            raise ConfigError("alphas must lie in (0, 1]")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ConfigError("alphas must be strictly increasing")
        if values[-1] != 1.0:
            raise ConfigError("the last alpha must be 1.0")
        return values

    def batch_composition(self) -> tuple[int, int]:
        """(labeled, unlabeled) per batch from the unlabeled:labeled ratio."""
        try:
            unl_part, lab_part = (int(p) for p in self.batch_ratio.split(":"))
        except ValueError:
            raise ConfigError(f"bad batch_ratio {self.batch_ratio!r}, want e.g. 7:1") from None
        if unl_part < 0 or lab_part <= 0:
            raise ConfigError("batch_ratio parts must be positive (labeled part > 0)")
        labeled = max(1, round(self.batch_size * lab_part / (unl_part + lab_part)))
        return labeled, self.batch_size - labeled

    def gammas(self) -> GammaPair:
        return GammaPair(self.gamma1, self.gamma2)

    def task(self) -> str:
        return "segmentation" if self.dataset in SEGMENTATION_DATASETS else "classification"

    def resolved_arch(self) -> str:
        return self.arch or _DEFAULT_ARCH[self.dataset]

    def resolved_initial_epochs(self) -> int:
        return self.initial_epochs or self.epochs_per_iteration

    def gamma_schedule_enabled(self) -> bool:
        if self.gamma_schedule == "auto":
            return self.task() == "classification" and self.training_mode == "re-train"
        return self.gamma_schedule == "on"

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_FIELD_PARSERS = {
    str: str,
    float: _parse_float,
    int: int,
    bool: _parse_bool,
}


def parse_config_text(text: str, overrides: dict | None = None) -> ExperimentConfig:
    known = {f.name: f.type for f in fields(ExperimentConfig)}
    kwargs: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in kwargs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        ftype = known[key]
        base = str if ftype == "str" else float if ftype == "float" else int if ftype == "int" else bool if ftype == "bool" else ftype
        try:
            kwargs[key] = _FIELD_PARSERS[base](value)
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {e}") from None
    kwargs.update(overrides or {})
    if "dataset" not in kwargs:
        raise ConfigError("missing required key 'dataset'")
    return ExperimentConfig(**kwargs)


def preset_names() -> list[str]:
    root = resources.files("dmt") / "presets"
    return sorted(p.name[: -len(".cfg")] for p in root.iterdir() if p.name.endswith(".cfg"))


def load_config(path_or_preset: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    """Load a config file, or a shipped preset when given a bare name."""
    path = Path(path_or_preset)
    if path.exists():
        return parse_config_text(path.read_text(), overrides)
    preset = resources.files("dmt") / "presets" / f"{path_or_preset}.cfg"
    if preset.is_file():
        return parse_config_text(preset.read_text(), overrides)
    raise ConfigError(
        f"no such config file or preset: {path_or_preset!r} (presets: {', '.join(preset_names())})"
    )


def config_hash(config: ExperimentConfig) -> str:
    canonical = "\n".join(f"{k}={config.to_dict()[k]!r}" for k in sorted(config.to_dict()))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]
