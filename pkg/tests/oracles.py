"""Independent brute-force reference implementations used by the test suite.

Nothing here imports the package under test. Each oracle is written for
clarity (explicit loops, no vectorization tricks) rather than speed.
"""
from __future__ import annotations

import math
from collections import deque

import numpy as np


# ---------------------------------------------------------------------------
# metrics


def auroc_pairwise(scores, labels) -> float:
    """O(n^2) Mann-Whitney: fraction of (pos, neg) pairs ranked correctly, ties 1/2."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def flood_fill_labels(mask):
    """8-connected components by BFS, numbered in raster order of first pixel."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int64)
    current = 0
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or labels[r, c]:
                continue
            current += 1
            labels[r, c] = current
            queue = deque([(r, c)])
            while queue:
                pr, pc = queue.popleft()
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        nr, nc = pr + dr, pc + dc
                        if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not labels[nr, nc]:
                            labels[nr, nc] = current
                            queue.append((nr, nc))
    return labels, current


def same_partition(a, b) -> bool:
    """True when two label images describe the same set of regions (ids may differ)."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if not np.array_equal(a == 0, b == 0):
        return False
    fwd, back = {}, {}
    for x, y in zip(a, b):
        if x == 0:
            continue
        if fwd.setdefault(x, y) != y or back.setdefault(y, x) != x:
            return False
    return True


def pro_threshold_sweep(maps, masks, max_fpr=0.3) -> float:
    """Dense threshold sweep: evaluate FPR and mean region overlap at every distinct
    score value, then integrate the step curve that holds each point's PRO until
    the next point's FPR, starting from (0, 0), up to ``max_fpr``."""
    regions = []  # list of (image index, boolean region mask)
    for i, g in enumerate(masks):
        lab, n = flood_fill_labels(g)
        for k in range(1, n + 1):
            regions.append((i, lab == k))
    neg_total = sum(int((~np.asarray(g, bool)).sum()) for g in masks)
    values = sorted({float(v) for m in maps for v in np.asarray(m).ravel()}, reverse=True)
    points = []
    for t in values:
        fp = sum(int(((np.asarray(m) >= t) & ~np.asarray(g, bool)).sum()) for m, g in zip(maps, masks))
        overlaps = [float((np.asarray(maps[i])[reg] >= t).mean()) for i, reg in regions]
        points.append((fp / neg_total, sum(overlaps) / len(overlaps)))
    area = 0.0
    prev_x, prev_y = 0.0, 0.0
    for x, y in points + [(max_fpr, None)]:
        lo, hi = min(prev_x, max_fpr), min(x, max_fpr)
        area += prev_y * (hi - lo)
        if y is None:
            break
        prev_x, prev_y = x, y
    return area / max_fpr


# ---------------------------------------------------------------------------
# prototypes and maps


def per_slot_mean(batch):
    """(B, h, w, D) -> (h*w, D) by explicit accumulation over the batch."""
    batch = np.asarray(batch, dtype=np.float64)
    b, h, w, d = batch.shape
    out = np.zeros((h * w, d))
    for i in range(b):
        for y in range(h):
            for x in range(w):
                out[y * w + x] += batch[i, y, x]
    return out / b


def nearest_scan(f, anchors):
    """Linear scan; strict '<' keeps the first (lowest-index) minimum."""
    best, best_n = math.inf, -1
    for n, a in enumerate(np.asarray(anchors, dtype=np.float64)):
        d = float(sum((fi - ai) ** 2 for fi, ai in zip(np.asarray(f, dtype=np.float64), a)))
        if d < best:
            best, best_n = d, n
    return best_n, best


def vision_map_scan(feats, anchors):
    feats = np.asarray(feats, dtype=np.float64)
    h, w, _ = feats.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            out[y, x] = nearest_scan(feats[y, x], anchors)[1]
    return out


def text_map_loop(levels, text, temperature):
    """Sum over levels of softmax([t*cos(f, normal), t*cos(f, abnormal)])[abnormal]."""
    text = np.asarray(text, dtype=np.float64)
    h, w, _ = np.asarray(levels[0]).shape
    out = np.zeros((h, w))
    for lv in levels:
        lv = np.asarray(lv, dtype=np.float64)
        for y in range(h):
            for x in range(w):
                f = lv[y, x]
                norm = math.sqrt(sum(v * v for v in f))
                f = f / max(norm, 1e-12)
                s0 = temperature * float(np.dot(f, text[0]))
                s1 = temperature * float(np.dot(f, text[1]))
                top = max(s0, s1)
                e0, e1 = math.exp(s0 - top), math.exp(s1 - top)
                out[y, x] += e1 / (e0 + e1)
    return out


def mse_loop(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    h, w = pred.shape
    acc = 0.0
    for y in range(h):
        for x in range(w):
            acc += (pred[y, x] - target[y, x]) ** 2
    return acc / (h * w)


# ---------------------------------------------------------------------------
# image filters


def gaussian_blur_direct(img, sigma, truncate=4.0):
    """Direct 2-D convolution with a normalized Gaussian, half-sample symmetric borders."""
    img = np.asarray(img, dtype=np.float64)
    radius = int(truncate * sigma + 0.5)
    offs = np.arange(-radius, radius + 1)
    g1 = np.exp(-0.5 * (offs / sigma) ** 2)
    g1 /= g1.sum()
    kernel = np.outer(g1, g1)
    pad = np.pad(img, ((radius, radius), (radius, radius), (0, 0)), mode="symmetric")
    h, w = img.shape[:2]
    out = np.zeros_like(img)
    for i, dy in enumerate(offs):
        for j, dx in enumerate(offs):
            out += kernel[i, j] * pad[radius + dy:radius + dy + h, radius + dx:radius + dx + w]
    return out


# ---------------------------------------------------------------------------
# finite differences


def central_difference(fn, x, eps=1e-6):
    """Numerical gradient of scalar ``fn`` at float64 array ``x`` (copied, not mutated)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = fn(x)
        flat[i] = old - eps
        down = fn(x)
        flat[i] = old
        g[i] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic, numeric) -> float:
    """||a - n|| / max(||a||, ||n||); 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - n) / scale)
