"""Frozen normality prototypes and prototype-distance (vision) prediction maps.

All distances here are squared Euclidean. The nearest-anchor assignment is a
hard argmin and is never differentiated; gradients flow through the distance to
the chosen anchor only.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch

from . import kernels
from .backbone import MultiLevelFeatures


@dataclass(frozen=True)
class PrototypeSet:
    anchors: torch.Tensor  # (N, D)
    frozen: bool = True
    source: dict = field(default_factory=dict)

    def __len__(self):
        return self.anchors.shape[0]

    @property
    def dim(self) -> int:
        return self.anchors.shape[1]

    def digest(self) -> str:
        return hashlib.sha256(self.anchors.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


def _stack(features):
    if isinstance(features, MultiLevelFeatures):
        return features.stacked
    if isinstance(features, (list, tuple)):
        parts = [f.stacked if isinstance(f, MultiLevelFeatures) else torch.as_tensor(f) for f in features]
        if not parts:
            raise ValueError("cannot build prototypes from an empty batch")
        if any(p.shape[-3:] != parts[0].shape[-3:] for p in parts):
            raise ValueError("all feature maps must share (h, w, D)")
        return torch.cat([p if p.ndim == 4 else p[None] for p in parts])
    return torch.as_tensor(features)


def init_prototypes(normal_features, source: dict | None = None) -> PrototypeSet:
    """Position-wise batch mean of stacked normal features; one anchor per spatial slot.

    ``normal_features`` is a :class:`MultiLevelFeatures`, a list of them, or a
    stacked ``(B, h, w, D)`` tensor/array.
    """
    stacked = _stack(normal_features)
    if stacked.ndim == 3:
        stacked = stacked[None]
    if stacked.ndim != 4 or stacked.shape[0] == 0:
        raise ValueError(f"expected a non-empty (B, h, w, D) batch, got shape {tuple(stacked.shape)}")
    stacked = stacked.detach()
    # mean as first sample plus mean deviation: exact when all maps are equal
    ref = stacked[0]
    mean = ref + (stacked - ref).mean(dim=0)
    anchors = mean.reshape(-1, mean.shape[-1]).clone()
    return PrototypeSet(anchors=anchors, frozen=True, source=dict(source or {}))


def nearest_prototype(f, prototypes: PrototypeSet) -> tuple[int, float]:
    """(index, squared distance) of the anchor closest to vector ``f``; ties go to the lowest index."""
    f = np.asarray(torch.as_tensor(f).detach().cpu(), dtype=np.float64).reshape(1, -1)
    anchors = prototypes.anchors.detach().cpu().numpy()
    if f.shape[1] != anchors.shape[1]:
        raise ValueError(f"feature dim {f.shape[1]} != prototype dim {anchors.shape[1]}")
    idx, dist = kernels.nearest_sq_dist(f, anchors)
    return int(idx[0]), float(dist[0])


def nearest_sq_distance(flat: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Differentiable squared distance of each row of ``flat`` to its nearest anchor.

    The argmin is computed without gradient; the returned distance is recomputed
    exactly against the selected anchor so it carries gradient w.r.t. ``flat``.
    """
    anchors = anchors.detach().to(flat.dtype)
    with torch.no_grad():
        d2 = (flat * flat).sum(-1, keepdim=True) + (anchors * anchors).sum(-1)[None, :] - 2.0 * flat @ anchors.T
        idx = torch.argmin(d2, dim=1)
    diff = flat - anchors[idx]
    return (diff * diff).sum(-1)


def vision_prediction(features, prototypes: PrototypeSet):
    """Map of squared distance from each stacked feature to its nearest anchor.

    Torch input (``MultiLevelFeatures`` or ``(..., h, w, D)`` tensor) returns a
    differentiable ``(..., h, w)`` tensor. NumPy input goes through the compiled
    exact-search kernel and returns an array.
    """
    if isinstance(features, np.ndarray):
        if features.shape[-1] != prototypes.dim:
            raise ValueError("feature dim does not match prototypes")
        flat = features.reshape(-1, features.shape[-1])
        _, dist = kernels.nearest_sq_dist(flat, prototypes.anchors.detach().cpu().numpy())
        return dist.reshape(features.shape[:-1])
    stacked = features.stacked if isinstance(features, MultiLevelFeatures) else features
    if stacked.shape[-1] != prototypes.dim:
        raise ValueError(f"feature dim {stacked.shape[-1]} != prototype dim {prototypes.dim}")
    flat = stacked.reshape(-1, stacked.shape[-1])
    return nearest_sq_distance(flat, prototypes.anchors).reshape(stacked.shape[:-1])
