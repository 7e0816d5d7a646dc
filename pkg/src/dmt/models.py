"""Toy torch backbones behind a uniform predict/train/checkpoint contract."""

from __future__ import annotations

from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

CHECKPOINT_FORMAT = "dmt-checkpoint-v1"


class MlpNet(nn.Module):
    def __init__(self, in_dim: int, n_classes: int, hidden: int = 64):
        super().__init__()
        self.body = nn.Sequential(
            nn.Linear(in_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, n_classes),
        )

    def forward(self, x):
        return self.body(x)


class RandomFourierNet(nn.Module):
    """Linear head over fixed random Fourier features.

    The cosine features give locally-supported confidence (kernel-style
    smoothness), so prediction confidence tracks distance to observed
    data rather than distance to the decision boundary. That locality is
    what lets confidence-ranked pseudo labels propagate along cluster
    structure on low-dimensional point sets.
    """

    def __init__(self, in_dim: int, n_classes: int, n_features: int = 256, lengthscale: float = 0.35):
        super().__init__()
        w = torch.randn(in_dim, n_features) / lengthscale
        b = torch.rand(n_features) * 2.0 * torch.pi
        self.register_buffer("proj", w)
        self.register_buffer("phase", b)
        self.scale = (2.0 / n_features) ** 0.5
        self.head = nn.Linear(n_features, n_classes)

    def forward(self, x):
        feats = self.scale * torch.cos(x @ self.proj + self.phase)
        return self.head(feats)


class SmallConvNet(nn.Module):
    """Strided conv classifier sized for 32x32 inputs on a laptop CPU."""

    def __init__(self, n_classes: int, width: int = 24):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Flatten(),
            nn.Linear(2 * width * 4 * 4, n_classes),
        )

    def forward(self, x):
        return self.body(x)


class TinySegNet(nn.Module):
    """Two-level encoder/decoder emitting per-pixel class logits."""

    def __init__(self, n_classes: int, width: int = 16):
        super().__init__()
        self.encode = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1), nn.ReLU(),
        )
        self.decode = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * width, width, 3, padding=1), nn.ReLU(),
            nn.Conv2d(width, n_classes, 1),
        )

    def forward(self, x):
        return self.decode(self.encode(x))


_ARCHS = {"mlp": MlpNet, "rbf": RandomFourierNet, "small-conv": SmallConvNet, "tiny-seg": TinySegNet}


def to_input_tensor(inputs: np.ndarray) -> torch.Tensor:
    """Dataset arrays to model tensors: images to normalized NCHW floats."""
    arr = np.asarray(inputs)
    if arr.ndim == 4:  # (n, H, W, 3) images
        x = torch.from_numpy(np.ascontiguousarray(arr)).float()
        if arr.dtype == np.uint8:
            x = x / 255.0
        return x.permute(0, 3, 1, 2) * 2.0 - 1.0
    return torch.from_numpy(np.ascontiguousarray(arr)).float()


class Backbone:
    """A torch net plus the prediction/checkpoint/EMA-snapshot surface."""

    def __init__(self, arch: str, arch_kwargs: dict, seed: int | None = None):
        if arch not in _ARCHS:
            raise ValueError(f"unknown architecture {arch!r}")
        self.arch = arch
        self.arch_kwargs = dict(arch_kwargs)
        if seed is not None:
            torch.manual_seed(seed)
        self.net = _ARCHS[arch](**arch_kwargs)
        self.kind = "segmenter" if arch == "tiny-seg" else "classifier"

    def predict_proba(self, inputs: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Softmax predictions; (n, C) for classifiers, (n, H, W, C) for segmenters."""
        self.net.eval()
        outs = []
        with torch.no_grad():
            x = to_input_tensor(inputs)
            for start in range(0, x.shape[0], batch_size):
                logits = self.net(x[start : start + batch_size])
                if self.kind == "segmenter":
                    probs = torch.softmax(logits, dim=1).permute(0, 2, 3, 1)
                else:
                    probs = torch.softmax(logits, dim=1)
                outs.append(probs.numpy())
        return np.concatenate(outs)

    def predict_classes(self, inputs: np.ndarray, batch_size: int = 512) -> np.ndarray:
        return np.argmax(self.predict_proba(inputs, batch_size), axis=-1)

    def parameter_snapshot(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.net.state_dict().items()}

    def load_parameters(self, params: dict[str, torch.Tensor]) -> None:
        self.net.load_state_dict(params)

    @contextmanager
    def using_parameters(self, params: dict[str, torch.Tensor]):
        """Temporarily swap in other parameters (e.g. an EMA shadow)."""
        backup = self.parameter_snapshot()
        self.load_parameters(params)
        try:
            yield self
        finally:
            self.load_parameters(backup)

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        torch.save(
            {
                "format": CHECKPOINT_FORMAT,
                "arch": self.arch,
                "arch_kwargs": self.arch_kwargs,
                "state_dict": self.net.state_dict(),
                "meta": meta or {},
            },
            path,
        )

    @classmethod
    def load(cls, path: str | Path) -> "Backbone":
        payload = torch.load(path, map_location="cpu", weights_only=True)
        if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
        bb = cls(payload["arch"], payload["arch_kwargs"])
        bb.net.load_state_dict(payload["state_dict"])
        return bb

    def clone(self) -> "Backbone":
        bb = Backbone(self.arch, self.arch_kwargs)
        bb.net.load_state_dict(self.parameter_snapshot())
        return bb


def make_backbone(arch: str, seed: int, **arch_kwargs) -> Backbone:
    return Backbone(arch, arch_kwargs, seed=seed)
