"""Image AUROC, pooled pixel AUROC and the per-region-overlap (PRO) score."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from . import kernels
from .errors import UndefinedMetricError

DEFAULT_MAX_FPR = 0.3


def auroc(scores, labels) -> float:
    """P(score of a random positive > score of a random negative), ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores vs {labels.size} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative labels")
    ranks = rankdata(scores)  # average ranks resolve ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _check_pairs(maps, masks):
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    masks = [np.asarray(m).astype(bool) for m in masks]
    if len(maps) != len(masks) or not maps:
        raise ValueError("need equally many (non-zero) maps and masks")
    for a, b in zip(maps, masks):
        if a.shape != b.shape:
            raise ValueError(f"map shape {a.shape} != mask shape {b.shape}")
    return maps, masks


def pixel_auroc(maps, masks, per_image: bool = False) -> float:
    """AUROC over all pixels pooled across images, or the mean of per-image AUROCs.

    The per-image variant skips images whose mask is all-negative or all-positive.
    """
    maps, masks = _check_pairs(maps, masks)
    if not per_image:
        return auroc(np.concatenate([m.ravel() for m in maps]), np.concatenate([g.ravel() for g in masks]))
    vals = [auroc(m, g) for m, g in zip(maps, masks) if 0 < g.sum() < g.size]
    if not vals:
        raise UndefinedMetricError("no image has both anomalous and normal pixels")
    return float(np.mean(vals))


def region_labels(masks):
    """Globally numbered 8-connected regions; returns (labels per image, n_regions)."""
    out = []
    offset = 0
    for g in masks:
        lab, n = kernels.label_components(g)
        lab = lab.astype(np.int64)
        lab[lab > 0] += offset
        out.append(lab)
        offset += n
    return out, offset


def pro_curve(maps, masks):
    """(fpr, pro) operating points in order of decreasing threshold."""
    maps, masks = _check_pairs(maps, masks)
    labels, n_regions = region_labels(masks)
    if n_regions == 0:
        raise UndefinedMetricError("PRO needs at least one anomalous region")
    scores = np.concatenate([m.ravel() for m in maps])
    regions = np.concatenate([lab.ravel() for lab in labels])
    n_negative = int((regions == 0).sum())
    if n_negative == 0:
        raise UndefinedMetricError("PRO needs at least one anomaly-free pixel")
    sizes = np.bincount(regions, minlength=n_regions + 1).astype(np.float64)
    weight = np.zeros(n_regions + 1)
    weight[1:] = 1.0 / (n_regions * sizes[1:])
    order = np.argsort(-scores, kind="stable")
    return kernels.pro_sweep(scores[order], regions[order], weight, n_negative)


def pro_area(fprs, pros, max_fpr: float = DEFAULT_MAX_FPR) -> float:
    """Normalized area under the PRO step curve on [0, max_fpr].

    The curve starts at (0, 0) and holds each operating point's PRO until the
    next point's FPR (the best overlap reachable without exceeding that FPR).
    """
    x = np.concatenate([[0.0], fprs, [max_fpr]])
    y = np.concatenate([[0.0], pros])
    widths = np.diff(np.minimum(x, max_fpr))
    return float(np.sum(y * widths) / max_fpr)


def pro(maps, masks, max_fpr: float = DEFAULT_MAX_FPR) -> float:
    if not 0 < max_fpr <= 1:
        raise ValueError("max_fpr must be in (0, 1]")
    fprs, pros = pro_curve(maps, masks)
    return pro_area(fprs, pros, max_fpr)
