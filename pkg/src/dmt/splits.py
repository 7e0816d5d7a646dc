"""Dataset partitioning and paired-model initialization policies."""

from __future__ import annotations

import enum
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class SplitSpec:
    """Deterministic partition into labeled / unlabeled / valtiny subsets."""

    labeled_ids: tuple[int, ...]
    unlabeled_ids: tuple[int, ...]
    valtiny_ids: tuple[int, ...]
    seed: int
    labeled_ratio: float

    def __post_init__(self):
        a, b, c = set(self.labeled_ids), set(self.unlabeled_ids), set(self.valtiny_ids)
        if a & b or a & c or b & c:
            raise ValueError("labeled, unlabeled and valtiny ids must be pairwise disjoint")

    def to_json(self) -> str:
        return json.dumps(
            {
                "labeled_ids": list(self.labeled_ids),
                "unlabeled_ids": list(self.unlabeled_ids),
                "valtiny_ids": list(self.valtiny_ids),
                "seed": self.seed,
                "labeled_ratio": self.labeled_ratio,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        d = json.loads(text)
        return cls(
            labeled_ids=tuple(d["labeled_ids"]),
            unlabeled_ids=tuple(d["unlabeled_ids"]),
            valtiny_ids=tuple(d["valtiny_ids"]),
            seed=d["seed"],
            labeled_ratio=d["labeled_ratio"],
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "SplitSpec":
        return cls.from_json(Path(path).read_text())


class InitKind(enum.Enum):
    DISTINCT_RANDOM_SEEDS = "distinct-random-seeds"
    DISTINCT_PRETRAINED_WEIGHTS = "distinct-pretrained-weights"
    DIFFERENCE_MAXIMIZED_SUBSETS = "difference-maximized-subsets"


@dataclass(frozen=True)
class InitPolicy:
    kind: InitKind
    seeds: tuple[int, int] | None = None
    checkpoints: tuple[str, str] | None = None
    subset_size: int | None = None  # difference-maximized k; default ceil(n/2)

    def __post_init__(self):
        if self.kind is InitKind.DISTINCT_RANDOM_SEEDS:
            if self.seeds is None or self.seeds[0] == self.seeds[1]:
                raise ValueError("distinct-random-seeds requires two unequal seeds")
        if self.kind is InitKind.DISTINCT_PRETRAINED_WEIGHTS and self.checkpoints is None:
            raise ValueError("distinct-pretrained-weights requires two checkpoint ids")


def difference_maximized_sampling(
    ids: Sequence, k: int, seed: int
) -> tuple[list, list]:
    """Draw two size-k subsets with the fewest overlapping samples.

    Shuffles once with the seed, then takes the first k and the last k
    elements, so the overlap is exactly max(0, 2k - n).
    """
    ids = list(ids)
    n = len(ids)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= {n}, got k={k}")
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in perm]
    return shuffled[:k], shuffled[n - k :]


def make_split(
    labels: Sequence[int] | np.ndarray,
    labeled_ratio: float,
    valtiny_size: int,
    seed: int,
    ids: Sequence[int] | None = None,
) -> SplitSpec:
    """Class-stratified labeled/valtiny draw; the remainder is unlabeled.

    The labeled target is round(ratio * n) samples spread evenly over
    classes (remainder to the lowest class indices). Falls back to
    best-effort with a warning when a class cannot fill its quota.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    if ids is None:
        ids = np.arange(n)
    else:
        ids = np.asarray(ids)
        if ids.size != n:
            raise ValueError("ids and labels must align")
    if not 0.0 < labeled_ratio <= 1.0:
        raise ValueError(f"labeled_ratio must be in (0, 1], got {labeled_ratio}")
    if valtiny_size < 0 or valtiny_size + round(labeled_ratio * n) > n:
        raise ValueError("valtiny plus labeled subset exceeds the dataset")

    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    per_class = {c: rng.permutation(np.flatnonzero(labels == c)) for c in classes}

    def stratified_draw(total: int) -> list[int]:
        base, extra = divmod(total, len(classes))
        taken = []
        shortfall = 0
        for rank, c in enumerate(sorted(classes)):
            want = base + (1 if rank < extra else 0)
            pool = per_class[c]
            got = pool[: min(want, len(pool))]
            shortfall += want - len(got)
            per_class[c] = pool[len(got) :]
            taken.extend(got.tolist())
        if shortfall:
            warnings.warn(
                f"stratification short by {shortfall} samples; proceeding best-effort",
                stacklevel=3,
            )
        return taken

    valtiny = stratified_draw(valtiny_size) if valtiny_size else []
    labeled = stratified_draw(round(labeled_ratio * n))
    used = set(valtiny) | set(labeled)
    unlabeled = [i for i in range(n) if i not in used]
    return SplitSpec(
        labeled_ids=tuple(int(ids[i]) for i in sorted(labeled)),
        unlabeled_ids=tuple(int(ids[i]) for i in unlabeled),
        valtiny_ids=tuple(int(ids[i]) for i in sorted(valtiny)),
        seed=seed,
        labeled_ratio=labeled_ratio,
    )


class SeedCounter:
    """Monotone source of previously-unused seeds, derived from a base seed."""

    def __init__(self, base_seed: int):
        self.base_seed = base_seed
        self._count = 0

    def next(self) -> int:
        seed = int(np.random.SeedSequence([self.base_seed, self._count]).generate_state(1)[0])
        self._count += 1
        return seed


def init_model_pair(
    policy: InitPolicy,
    labeled_ids: Sequence,
    model_factory: Callable[[int], object],
    checkpoint_loader: Callable[[str], object] | None = None,
    seed: int = 0,
):
    """Build the two sufficiently-different models and their training subsets.

    Returns (model_a, model_b, (ids_a, ids_b)). Distinct seeds and
    distinct pretrained weights assign the full labeled subset to both
    models; difference-maximized subsets share one initialization but
    train on minimally-overlapping halves.
    """
    labeled_ids = list(labeled_ids)
    if policy.kind is InitKind.DISTINCT_RANDOM_SEEDS:
        s_a, s_b = policy.seeds
        return model_factory(s_a), model_factory(s_b), (labeled_ids, labeled_ids)
    if policy.kind is InitKind.DISTINCT_PRETRAINED_WEIGHTS:
        if checkpoint_loader is None:
            raise ValueError("a checkpoint loader is required for pretrained-weight pairs")
        ck_a, ck_b = policy.checkpoints
        return checkpoint_loader(ck_a), checkpoint_loader(ck_b), (labeled_ids, labeled_ids)
    k = policy.subset_size or math.ceil(len(labeled_ids) / 2)
    ids_a, ids_b = difference_maximized_sampling(labeled_ids, k, seed)
    return model_factory(seed), model_factory(seed), (ids_a, ids_b)
