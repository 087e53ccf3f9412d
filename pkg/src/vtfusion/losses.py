"""Training objectives: normal-feature compactness, abnormal-feature separation,
pixel segmentation error, and their weighted sum."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .backbone import MultiLevelFeatures
from .errors import ConfigError, TrainingAborted
from .prototypes import PrototypeSet, nearest_sq_distance


@dataclass(frozen=True)
class LossConfig:
    r: float = 1e-5
    alpha: float = 0.1
    lam: float = 1.0  # weight of the segmentation term

    def __post_init__(self):
        if not self.r >= 0:
            raise ConfigError("loss.r must be >= 0")
        if not self.alpha > 0:
            raise ConfigError("loss.alpha must be > 0")
        if not self.lam > 0:
            raise ConfigError("loss.lam must be > 0")


def _slot_distances(features, prototypes: PrototypeSet):
    stacked = features.stacked if isinstance(features, MultiLevelFeatures) else features
    if stacked.shape[-1] != prototypes.dim:
        raise ValueError(f"feature dim {stacked.shape[-1]} != prototype dim {prototypes.dim}")
    return nearest_sq_distance(stacked.reshape(-1, stacked.shape[-1]), prototypes.anchors)


def nfc_loss(normal_features, prototypes: PrototypeSet, cfg: LossConfig) -> torch.Tensor:
    """Mean over slots of max(0, D - r^2): pull normal features inside radius r."""
    d = _slot_distances(normal_features, prototypes)
    return torch.clamp(d - cfg.r**2, min=0.0).mean()


def afs_loss(abnormal_features, prototypes: PrototypeSet, cfg: LossConfig) -> torch.Tensor:
    """Mean over slots of max(0, (r + alpha)^2 - D): push abnormal features past the margin."""
    d = _slot_distances(abnormal_features, prototypes)
    return torch.clamp((cfg.r + cfg.alpha) ** 2 - d, min=0.0).mean()


def seg_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error between the predicted map and the binary ground-truth mask."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(pred.shape)} vs mask {tuple(target.shape)}")
    return ((pred - target.to(pred.dtype)) ** 2).mean()


def total_loss(nfc, afs, seg, cfg: LossConfig, step: int | None = None):
    for name, value in (("nfc", nfc), ("afs", afs), ("seg", seg)):
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            where = f" at step {step}" if step is not None else ""
            raise TrainingAborted(f"non-finite {name} loss ({v}){where}")
    return nfc + afs + cfg.lam * seg
