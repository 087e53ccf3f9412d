"""Hot inner loops, each with a numba path and a vectorized numpy path.

The public functions dispatch on :func:`vtfusion._accel.numba_enabled` at call
time. Both paths are exported (``*_numba`` / ``*_numpy``) so tests can check
they agree and ``benchmarks/bench_kernels.py`` can time them side by side.
"""
import numpy as np
from scipy import ndimage

from ._accel import njit, numba_enabled

# ---------------------------------------------------------------------------
# exact nearest anchor search (squared L2, ties -> smallest index)


@njit(cache=True)
def nearest_sq_dist_numba(feats, anchors):
    m_count, dim = feats.shape
    n_count = anchors.shape[0]
    idx = np.empty(m_count, dtype=np.int64)
    dist = np.empty(m_count, dtype=np.float64)
    for m in range(m_count):
        best = np.inf
        best_n = 0
        for n in range(n_count):
            acc = 0.0
            for d in range(dim):
                t = feats[m, d] - anchors[n, d]
                acc += t * t
            if acc < best:
                best = acc
                best_n = n
        idx[m] = best_n
        dist[m] = best
    return idx, dist


def nearest_sq_dist_numpy(feats, anchors, chunk=256):
    m_count = feats.shape[0]
    idx = np.empty(m_count, dtype=np.int64)
    dist = np.empty(m_count, dtype=np.float64)
    for start in range(0, m_count, chunk):
        diff = feats[start:start + chunk, None, :] - anchors[None, :, :]
        d2 = np.einsum("mnd,mnd->mn", diff, diff)
        best = np.argmin(d2, axis=1)
        idx[start:start + chunk] = best
        dist[start:start + chunk] = d2[np.arange(len(best)), best]
    return idx, dist


def nearest_sq_dist(feats, anchors):
    """Index of and squared distance to the nearest anchor for every row of ``feats``.

    ``feats`` is (M, D), ``anchors`` is (N, D); both are cast to float64.
    """
    feats = np.ascontiguousarray(feats, dtype=np.float64)
    anchors = np.ascontiguousarray(anchors, dtype=np.float64)
    if feats.ndim != 2 or anchors.ndim != 2 or feats.shape[1] != anchors.shape[1]:
        raise ValueError(f"dimension mismatch: feats {feats.shape} vs anchors {anchors.shape}")
    if anchors.shape[0] == 0:
        raise ValueError("empty anchor set")
    if numba_enabled():
        return nearest_sq_dist_numba(feats, anchors)
    return nearest_sq_dist_numpy(feats, anchors)


# ---------------------------------------------------------------------------
# 8-connected component labeling


@njit(cache=True)
def label_components_numba(mask):
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    stack = np.empty(h * w * 2, dtype=np.int64)
    current = 0
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or labels[r, c] != 0:
                continue
            current += 1
            labels[r, c] = current
            stack[0] = r
            stack[1] = c
            top = 2
            while top > 0:
                top -= 2
                pr = stack[top]
                pc = stack[top + 1]
                for dr in range(-1, 2):
                    for dc in range(-1, 2):
                        nr = pr + dr
                        nc = pc + dc
                        if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and labels[nr, nc] == 0:
                            labels[nr, nc] = current
                            stack[top] = nr
                            stack[top + 1] = nc
                            top += 2
    return labels, current


_EIGHT = np.ones((3, 3), dtype=bool)


def label_components_numpy(mask):
    labels, count = ndimage.label(mask, structure=_EIGHT)
    return labels.astype(np.int32), int(count)


def label_components(mask):
    """Label 8-connected foreground regions; returns (labels, count), background 0."""
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {mask.shape}")
    if numba_enabled():
        labels, count = label_components_numba(mask)
        return labels, int(count)
    return label_components_numpy(mask)


# ---------------------------------------------------------------------------
# per-region-overlap sweep over descending thresholds


@njit(cache=True)
def pro_sweep_numba(sorted_scores, sorted_regions, region_weight, n_negative):
    p = sorted_scores.shape[0]
    fprs = np.empty(p, dtype=np.float64)
    pros = np.empty(p, dtype=np.float64)
    m = 0
    fp = 0
    pro = 0.0
    comp = 0.0  # Neumaier compensation keeps e.g. full coverage at exactly 1.0
    for i in range(p):
        reg = sorted_regions[i]
        if reg == 0:
            fp += 1
        else:
            w = region_weight[reg]
            t = pro + w
            if abs(pro) >= abs(w):
                comp += (pro - t) + w
            else:
                comp += (w - t) + pro
            pro = t
        if i == p - 1 or sorted_scores[i + 1] != sorted_scores[i]:
            fprs[m] = fp / n_negative
            pros[m] = pro + comp
            m += 1
    return fprs[:m], pros[:m]


def pro_sweep_numpy(sorted_scores, sorted_regions, region_weight, n_negative):
    negative = sorted_regions == 0
    fp = np.cumsum(negative)
    # extended precision so the running sum rounds correctly back to float64
    pro = np.cumsum(np.where(negative, 0.0, region_weight[sorted_regions]).astype(np.longdouble))
    ends = np.flatnonzero(np.append(sorted_scores[1:] != sorted_scores[:-1], True))
    return fp[ends] / n_negative, pro[ends].astype(np.float64)


def pro_sweep(sorted_scores, sorted_regions, region_weight, n_negative):
    """Operating points (FPR, PRO) at every distinct threshold, highest threshold first.

    ``sorted_scores`` is descending; ``sorted_regions`` holds the global region id of
    each pixel (0 for anomaly-free pixels); ``region_weight[k]`` is
    ``1 / (n_regions * size_k)`` so that summing it over hit pixels gives the mean
    per-region overlap.
    """
    sorted_scores = np.ascontiguousarray(sorted_scores, dtype=np.float64)
    sorted_regions = np.ascontiguousarray(sorted_regions, dtype=np.int64)
    region_weight = np.ascontiguousarray(region_weight, dtype=np.float64)
    if numba_enabled():
        return pro_sweep_numba(sorted_scores, sorted_regions, region_weight, float(n_negative))
    return pro_sweep_numpy(sorted_scores, sorted_regions, region_weight, float(n_negative))


# ---------------------------------------------------------------------------
# 4-connected polyline rasterization


@njit(cache=True)
def raster_polyline_numba(vertices, height, width):
    out = np.zeros((height, width), dtype=np.bool_)
    for s in range(vertices.shape[0] - 1):
        r0 = vertices[s, 0]
        c0 = vertices[s, 1]
        dr = vertices[s + 1, 0] - r0
        dc = vertices[s + 1, 1] - c0
        adr = abs(dr)
        n = adr + abs(dc)
        sr = 1 if dr >= 0 else -1
        sc = 1 if dc >= 0 else -1
        if n == 0:
            out[r0, c0] = True
            continue
        for k in range(n + 1):
            rs = (k * adr + n // 2) // n
            out[r0 + sr * rs, c0 + sc * (k - rs)] = True
    return out


def raster_polyline_numpy(vertices, height, width):
    out = np.zeros((height, width), dtype=bool)
    for s in range(len(vertices) - 1):
        r0, c0 = vertices[s]
        dr, dc = vertices[s + 1] - vertices[s]
        n = abs(dr) + abs(dc)
        if n == 0:
            out[r0, c0] = True
            continue
        k = np.arange(n + 1)
        rs = (k * abs(dr) + n // 2) // n
        out[r0 + np.sign(dr) * rs, c0 + np.sign(dc) * (k - rs)] = True
    return out


def raster_polyline(vertices, shape):
    """Rasterize integer (row, col) vertices into a 1-px, 4-connected boolean mask.

    A segment spanning (dr, dc) covers exactly ``|dr| + |dc| + 1`` pixels.
    """
    vertices = np.ascontiguousarray(vertices, dtype=np.int64)
    height, width = int(shape[0]), int(shape[1])
    if vertices.ndim != 2 or vertices.shape[1] != 2 or len(vertices) == 0:
        raise ValueError("vertices must be a non-empty (V, 2) array")
    if (vertices < 0).any() or (vertices[:, 0] >= height).any() or (vertices[:, 1] >= width).any():
        raise ValueError("polyline vertex outside the raster")
    if numba_enabled():
        return raster_polyline_numba(vertices, height, width)
    return raster_polyline_numpy(vertices, height, width)
