"""Pseudo-label generation, selection, serialization and auditing.

Classification records serialize as JSON-lines; segmentation maps use
the "DMTL" binary layout (magic, u32 H, u32 W, H*W label bytes, H*W
little-endian f32 confidences) with a JSON manifest carrying sha256
checksums per file.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

IGNORED = -1  # classification records without a retained label
IGNORE_INDEX = 255  # segmentation ignore value
_MAGIC = b"DMTL"
_SAFE_ID = re.compile(r"^[A-Za-z0-9._-]+$")


class FormatError(Exception):
    """Raised when a pseudo-label store fails structural validation."""


class SelectionKind(enum.Enum):
    FIXED_THRESHOLD = "fixed-threshold"
    TOP_FRACTION = "top-fraction"
    CLASS_BALANCED = "class-balanced"
    CBST_RENORMALIZED = "cbst-renormalized"


@dataclass(frozen=True)
class SelectionPolicy:
    kind: SelectionKind
    parameter: float

    def __post_init__(self):
        if self.kind is SelectionKind.FIXED_THRESHOLD:
            if not 0.0 <= self.parameter < 1.0:
                raise ValueError(f"threshold must be in [0, 1), got {self.parameter}")
        elif not 0.0 < self.parameter <= 1.0:
            raise ValueError(f"fraction must be in (0, 1], got {self.parameter}")


@dataclass(frozen=True)
class PseudoLabelRecord:
    sample_id: int | str
    label: int
    confidence: float
    source_model: str = ""
    iteration: int = 1

    def __post_init__(self):
        if not 0.0 < self.confidence <= 1.0:
            raise ValueError(f"confidence must be in (0, 1], got {self.confidence}")
        if self.label < 0 and self.label != IGNORED:
            raise ValueError(f"label must be a class index or IGNORED, got {self.label}")


@dataclass(frozen=True)
class PseudoLabelMap:
    sample_id: int | str
    labels: np.ndarray  # (H, W) uint8, IGNORE_INDEX where unselected
    confidences: np.ndarray  # (H, W) float32
    source_model: str = ""
    iteration: int = 1

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        confs = np.ascontiguousarray(self.confidences, dtype=np.float32)
        if labels.ndim != 2 or labels.shape != confs.shape:
            raise ValueError(
                f"labels {labels.shape} and confidences {confs.shape} must be "
                "matching 2-D grids"
            )
        scored = labels != IGNORE_INDEX
        if np.any(confs[scored] <= 0.0):
            raise ValueError("non-ignored pixels must carry confidence > 0")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "confidences", confs)


def _as_prob_matrix(predictions: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    probs = np.asarray(predictions, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError(f"expected (n, C) probabilities, got shape {probs.shape}")
    return probs


def _default_ids(n: int, sample_ids) -> list:
    if sample_ids is None:
        return list(range(n))
    sample_ids = list(sample_ids)
    if len(sample_ids) != n:
        raise ValueError(f"{len(sample_ids)} ids for {n} predictions")
    return sample_ids


def threshold_pseudo_labels(
    predictions: Sequence[np.ndarray] | np.ndarray,
    threshold: float,
    sample_ids: Sequence | None = None,
    source_model: str = "",
    iteration: int = 1,
) -> list[PseudoLabelRecord]:
    """Keep the argmax class only where max probability strictly exceeds T.

    Every input sample produces a record; below-threshold samples get
    label IGNORED with their confidence still recorded.
    """
    if not 0.0 <= threshold < 1.0:
        raise ValueError(f"threshold must be in [0, 1), got {threshold}")
    probs = _as_prob_matrix(predictions)
    ids = _default_ids(probs.shape[0], sample_ids)
    labels = np.argmax(probs, axis=1)
    confidences = probs[np.arange(probs.shape[0]), labels]
    out = []
    for sid, lab, conf in zip(ids, labels, confidences):
        kept = conf > threshold
        out.append(
            PseudoLabelRecord(
                sample_id=sid,
                label=int(lab) if kept else IGNORED,
                confidence=float(conf),
                source_model=source_model,
                iteration=iteration,
            )
        )
    return out


def top_fraction_select(
    predictions: Sequence[np.ndarray] | np.ndarray,
    alpha: float,
    sample_ids: Sequence | None = None,
    source_model: str = "",
    iteration: int = 1,
) -> list[PseudoLabelRecord]:
    """Keep the floor(alpha * n) most-confident samples; drop the rest.

    Confidence ties break by ascending sample position for determinism.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    probs = _as_prob_matrix(predictions)
    n = probs.shape[0]
    ids = _default_ids(n, sample_ids)
    if n == 0:
        return []
    labels = np.argmax(probs, axis=1)
    confidences = probs[np.arange(n), labels]
    n_keep = math.floor(alpha * n)
    # stable sort on -confidence keeps ascending input order among ties
    order = np.argsort(-confidences, kind="stable")[:n_keep]
    order = np.sort(order)  # emit in input order
    return [
        PseudoLabelRecord(
            sample_id=ids[i],
            label=int(labels[i]),
            confidence=float(confidences[i]),
            source_model=source_model,
            iteration=iteration,
        )
        for i in order
    ]


def _stack_maps(prediction_maps: Sequence[np.ndarray]) -> list[np.ndarray]:
    maps = [np.asarray(m, dtype=np.float64) for m in prediction_maps]
    for m in maps:
        if m.ndim != 3:
            raise ValueError(f"expected (H, W, C) probability maps, got {m.shape}")
    return maps


def class_balanced_select(
    prediction_maps: Sequence[np.ndarray],
    alpha: float,
    sample_ids: Sequence | None = None,
    source_model: str = "",
    iteration: int = 1,
) -> list[PseudoLabelMap]:
    """Per class, keep the floor(alpha * n_c) most-confident pixels.

    Pixels pool across the whole set; n_c counts pixels whose argmax is
    class c. Selection is direct ranking on max probability, ties
    breaking by (map, pixel) position. Unselected pixels are ignored.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    maps = _stack_maps(prediction_maps)
    ids = _default_ids(len(maps), sample_ids)
    if not maps:
        return []
    n_classes = maps[0].shape[2]

    flat_conf, flat_cls, flat_pos = [], [], []
    for mi, m in enumerate(maps):
        cls = np.argmax(m.reshape(-1, n_classes), axis=1)
        conf = m.reshape(-1, n_classes)[np.arange(cls.size), cls]
        flat_cls.append(cls)
        flat_conf.append(conf)
        flat_pos.append(np.stack([np.full(cls.size, mi), np.arange(cls.size)], axis=1))
    conf = np.concatenate(flat_conf)
    cls = np.concatenate(flat_cls)
    pos = np.concatenate(flat_pos)

    keep = np.zeros(conf.size, dtype=bool)
    for c in range(n_classes):
        members = np.flatnonzero(cls == c)
        if members.size == 0:
            continue
        n_keep = math.floor(alpha * members.size)
        order = members[np.argsort(-conf[members], kind="stable")[:n_keep]]
        keep[order] = True

    out = []
    offset = 0
    for mi, m in enumerate(maps):
        h, w, _ = m.shape
        sel = keep[offset : offset + h * w].reshape(h, w)
        labels = np.full((h, w), IGNORE_INDEX, dtype=np.uint8)
        labels[sel] = cls[offset : offset + h * w].reshape(h, w)[sel]
        confs = np.zeros((h, w), dtype=np.float32)
        confs[sel] = conf[offset : offset + h * w].reshape(h, w)[sel].astype(np.float32)
        offset += h * w
        out.append(
            PseudoLabelMap(
                sample_id=ids[mi],
                labels=labels,
                confidences=confs,
                source_model=source_model,
                iteration=iteration,
            )
        )
    return out


def cbst_class_thresholds(
    prediction_maps: Sequence[np.ndarray], alpha: float
) -> np.ndarray:
    """Per-class confidence at rank floor(alpha * n_c), 1-indexed from the top.

    Classes with no predicted pixels (or an empty rank) get threshold 1,
    which selects nothing after re-normalization.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    maps = _stack_maps(prediction_maps)
    n_classes = maps[0].shape[2]
    per_class: list[list[float]] = [[] for _ in range(n_classes)]
    for m in maps:
        flat = m.reshape(-1, n_classes)
        cls = np.argmax(flat, axis=1)
        conf = flat[np.arange(cls.size), cls]
        for c in range(n_classes):
            per_class[c].extend(conf[cls == c])
    thresholds = np.ones(n_classes, dtype=np.float64)
    for c in range(n_classes):
        n_c = len(per_class[c])
        rank = math.floor(alpha * n_c)
        if rank >= 1:
            thresholds[c] = np.sort(per_class[c])[::-1][rank - 1]
    return thresholds


def cbst_renormalize(probs: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Divide probabilities class-wise by the ranked thresholds."""
    probs = np.asarray(probs, dtype=np.float64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if np.any(thresholds <= 0):
        raise ValueError("thresholds must be positive")
    return probs / thresholds


def cbst_renormalized_select(
    prediction_maps: Sequence[np.ndarray],
    alpha: float,
    sample_ids: Sequence | None = None,
    thresholds: np.ndarray | None = None,
    source_model: str = "",
    iteration: int = 1,
) -> list[PseudoLabelMap]:
    """Threshold-re-normalized selection (the ablation variant).

    Softmax vectors divide class-wise by ranked thresholds; the argmax
    of the re-normalized vector becomes the label, and a pixel is kept
    when that re-normalized maximum exceeds 1. The label may therefore
    differ from the plain argmax.
    """
    maps = _stack_maps(prediction_maps)
    ids = _default_ids(len(maps), sample_ids)
    if thresholds is None:
        thresholds = cbst_class_thresholds(maps, alpha)
    out = []
    for sid, m in zip(ids, maps):
        renorm = cbst_renormalize(m, thresholds)
        cls = np.argmax(renorm, axis=2)
        peak = np.take_along_axis(renorm, cls[..., None], axis=2)[..., 0]
        sel = peak > 1.0
        labels = np.full(m.shape[:2], IGNORE_INDEX, dtype=np.uint8)
        labels[sel] = cls[sel]
        confs = np.zeros(m.shape[:2], dtype=np.float32)
        orig = np.take_along_axis(m, cls[..., None], axis=2)[..., 0]
        confs[sel] = orig[sel].astype(np.float32)
        out.append(
            PseudoLabelMap(
                sample_id=sid,
                labels=labels,
                confidences=confs,
                source_model=source_model,
                iteration=iteration,
            )
        )
    return out


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _map_filename(sample_id) -> str:
    name = str(sample_id)
    if not _SAFE_ID.match(name):
        raise ValueError(f"sample id {name!r} is not filesystem-safe")
    return f"{name}.dmtl"


def encode_map(pmap: PseudoLabelMap) -> bytes:
    h, w = pmap.labels.shape
    return (
        _MAGIC
        + struct.pack("<II", h, w)
        + pmap.labels.tobytes()
        + pmap.confidences.astype("<f4").tobytes()
    )


def decode_map(payload: bytes, name: str, sample_id, source_model="", iteration=1) -> PseudoLabelMap:
    if len(payload) < 12 or payload[:4] != _MAGIC:
        raise FormatError(f"{name}: bad magic bytes")
    h, w = struct.unpack("<II", payload[4:12])
    expected = 12 + h * w + 4 * h * w
    if len(payload) != expected:
        raise FormatError(f"{name}: truncated ({len(payload)} bytes, expected {expected})")
    labels = np.frombuffer(payload, dtype=np.uint8, count=h * w, offset=12).reshape(h, w)
    confs = np.frombuffer(payload, dtype="<f4", count=h * w, offset=12 + h * w).reshape(h, w)
    return PseudoLabelMap(
        sample_id=sample_id,
        labels=labels.copy(),
        confidences=confs.copy(),
        source_model=source_model,
        iteration=iteration,
    )


def save_pseudo_labels(
    items: Sequence[PseudoLabelRecord] | Sequence[PseudoLabelMap],
    path: str | Path,
    alpha: float | None = None,
) -> dict:
    """Write records or maps plus a manifest to a directory; returns the manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if not items:
        raise ValueError("nothing to save")
    first = items[0]
    manifest: dict = {
        "iteration": first.iteration,
        "alpha": alpha,
        "source_model": first.source_model,
        "files": {},
    }
    if isinstance(first, PseudoLabelRecord):
        manifest["kind"] = "records"
        rec_path = path / "records.jsonl"
        with rec_path.open("w", encoding="utf-8") as f:
            for r in items:
                f.write(
                    json.dumps(
                        {
                            "sample_id": r.sample_id,
                            "label": r.label,
                            "confidence": r.confidence,
                            "source_model": r.source_model,
                            "iteration": r.iteration,
                        }
                    )
                    + "\n"
                )
        manifest["files"]["records.jsonl"] = _sha256(rec_path)
    else:
        manifest["kind"] = "maps"
        map_dir = path / "maps"
        map_dir.mkdir(exist_ok=True)
        manifest["samples"] = {}
        for m in items:
            fname = _map_filename(m.sample_id)
            fpath = map_dir / fname
            fpath.write_bytes(encode_map(m))
            manifest["files"][f"maps/{fname}"] = _sha256(fpath)
            manifest["samples"][fname] = {
                "sample_id": m.sample_id,
                "source_model": m.source_model,
                "iteration": m.iteration,
            }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_pseudo_labels(
    path: str | Path,
) -> list[PseudoLabelRecord] | list[PseudoLabelMap]:
    """Load a pseudo-label store, verifying checksums before returning anything."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{manifest_path}: missing manifest")
    manifest = json.loads(manifest_path.read_text())
    for rel, digest in manifest["files"].items():
        fpath = path / rel
        if not fpath.exists():
            raise FormatError(f"{fpath}: listed in manifest but missing")
        if _sha256(fpath) != digest:
            raise FormatError(f"{fpath}: checksum mismatch")
    if manifest["kind"] == "records":
        records = []
        with (path / "records.jsonl").open(encoding="utf-8") as f:
            for line in f:
                d = json.loads(line)
                records.append(PseudoLabelRecord(**d))
        return records
    maps = []
    for rel in manifest["files"]:
        fname = Path(rel).name
        meta = manifest["samples"][fname]
        payload = (path / rel).read_bytes()
        maps.append(
            decode_map(
                payload,
                name=str(path / rel),
                sample_id=meta["sample_id"],
                source_model=meta["source_model"],
                iteration=meta["iteration"],
            )
        )
    return maps


def store_checksums(path: str | Path) -> dict[str, str]:
    """Current sha256 of every payload file in a store (immutability audits)."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    return {rel: _sha256(path / rel) for rel in manifest["files"]}


# ---------------------------------------------------------------------------
# auditing
# ---------------------------------------------------------------------------


def pseudo_label_error_stats(
    records: Sequence[PseudoLabelRecord],
    ground_truth: Mapping,
    quantiles: Sequence[float] = (0.2, 0.4, 0.6, 0.8),
) -> dict:
    """Error rate overall and within top-confidence quantiles.

    Only records carrying a label are scored; every scored record must
    have ground truth available.
    """
    scored = [r for r in records if r.label != IGNORED]
    if not scored:
        raise ValueError("no labelled records to audit")
    missing = [r.sample_id for r in scored if r.sample_id not in ground_truth]
    if missing:
        raise ValueError(f"missing ground truth for {len(missing)} records, e.g. {missing[0]!r}")
    conf = np.array([r.confidence for r in scored])
    err = np.array([r.label != ground_truth[r.sample_id] for r in scored], dtype=bool)
    order = np.argsort(-conf, kind="stable")
    report = {
        "count": len(scored),
        "overall": float(err.mean()),
        "quantiles": {},
    }
    for q in quantiles:
        k = math.floor(q * len(scored))
        top = order[:k]
        report["quantiles"][f"top_{int(round(q * 100))}"] = (
            float(err[top].mean()) if k else float("nan")
        )
    return report
