"""Hot numeric kernels with two interchangeable backends.

Every kernel exists twice: a vectorized pure-numpy version (``*_numpy``)
and a loop version compiled with numba (``*_numba``). The module-level
aliases (``iou_matrix``, ``greedy_nms_kernel``, ...) point at the backend
selected by the ``CROWDNMS_BACKEND`` environment variable at import time:
``numba`` (default) or ``numpy``.

All kernels take plain float64 arrays; boxes are rows of (x, y, w, h).
"""

import os

import numpy as np

BACKEND = os.environ.get("CROWDNMS_BACKEND", "numba").strip().lower()
if BACKEND not in ("numba", "numpy"):
    raise ValueError(f"CROWDNMS_BACKEND must be 'numba' or 'numpy', got {BACKEND!r}")

if BACKEND == "numba":
    from numba import njit
else:  # pure-numpy fallback: the numba aliases below are never used
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


# ---------------------------------------------------------------------------
# IoU

def iou_matrix_numpy(boxes: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N, 4) xywh boxes, vectorized via broadcasting."""
    x1 = boxes[:, 0]
    y1 = boxes[:, 1]
    x2 = boxes[:, 0] + boxes[:, 2]
    y2 = boxes[:, 1] + boxes[:, 3]
    area = boxes[:, 2] * boxes[:, 3]

    ix = np.maximum(
        0.0, np.minimum(x2[:, None], x2[None, :]) - np.maximum(x1[:, None], x1[None, :])
    )
    iy = np.maximum(
        0.0, np.minimum(y2[:, None], y2[None, :]) - np.maximum(y1[:, None], y1[None, :])
    )
    inter = ix * iy
    union = area[:, None] + area[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0.0, inter / union, 0.0)
    return out


@njit(cache=True)
def iou_matrix_numba(boxes):
    n = boxes.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        ax1 = boxes[i, 0]
        ay1 = boxes[i, 1]
        ax2 = ax1 + boxes[i, 2]
        ay2 = ay1 + boxes[i, 3]
        aarea = boxes[i, 2] * boxes[i, 3]
        out[i, i] = 1.0
        for j in range(i + 1, n):
            bx1 = boxes[j, 0]
            by1 = boxes[j, 1]
            ix = min(ax2, bx1 + boxes[j, 2]) - max(ax1, bx1)
            iy = min(ay2, by1 + boxes[j, 3]) - max(ay1, by1)
            v = 0.0
            if ix > 0.0 and iy > 0.0:
                inter = ix * iy
                v = inter / (aarea + boxes[j, 2] * boxes[j, 3] - inter)
            out[i, j] = v
            out[j, i] = v
    return out


# ---------------------------------------------------------------------------
# ROIAlign sampling
#
# Sample coordinates use the half-pixel convention: image coordinate p maps
# to feature coordinate p / stride - 0.5, so a roi aligned to the cell grid
# reproduces the underlying cells exactly. Out-of-range neighbors read 0.

def roi_align_numpy(values: np.ndarray, stride: float, roi: np.ndarray, out_size: int) -> np.ndarray:
    c, h, w = values.shape
    steps = (np.arange(out_size) + 0.5) / out_size
    fx = (roi[0] + steps * roi[2]) / stride - 0.5
    fy = (roi[1] + steps * roi[3]) / stride - 0.5

    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    wx = fx - x0
    wy = fy - y0

    def gather(yy, xx):
        ok = (yy[:, None] >= 0) & (yy[:, None] < h) & (xx[None, :] >= 0) & (xx[None, :] < w)
        yc = np.clip(yy, 0, h - 1)
        xc = np.clip(xx, 0, w - 1)
        patch = values[:, yc[:, None], xc[None, :]]
        return patch * ok[None, :, :]

    v00 = gather(y0, x0)
    v01 = gather(y0, x0 + 1)
    v10 = gather(y0 + 1, x0)
    v11 = gather(y0 + 1, x0 + 1)
    wy_ = wy[None, :, None]
    wx_ = wx[None, None, :]
    return (
        v00 * (1 - wy_) * (1 - wx_)
        + v01 * (1 - wy_) * wx_
        + v10 * wy_ * (1 - wx_)
        + v11 * wy_ * wx_
    )


@njit(cache=True)
def roi_align_numba(values, stride, roi, out_size):
    c, h, w = values.shape
    out = np.zeros((c, out_size, out_size))
    for oy in range(out_size):
        fy = (roi[1] + (oy + 0.5) / out_size * roi[3]) / stride - 0.5
        y0 = int(np.floor(fy))
        wy = fy - y0
        for ox in range(out_size):
            fx = (roi[0] + (ox + 0.5) / out_size * roi[2]) / stride - 0.5
            x0 = int(np.floor(fx))
            wx = fx - x0
            for ch in range(c):
                v = 0.0
                if 0 <= y0 < h and 0 <= x0 < w:
                    v += values[ch, y0, x0] * (1 - wy) * (1 - wx)
                if 0 <= y0 < h and 0 <= x0 + 1 < w:
                    v += values[ch, y0, x0 + 1] * (1 - wy) * wx
                if 0 <= y0 + 1 < h and 0 <= x0 < w:
                    v += values[ch, y0 + 1, x0] * wy * (1 - wx)
                if 0 <= y0 + 1 < h and 0 <= x0 + 1 < w:
                    v += values[ch, y0 + 1, x0 + 1] * wy * wx
                out[ch, oy, ox] = v
    return out


# ---------------------------------------------------------------------------
# Suppression
#
# All suppression kernels return selection order as an index array. Ties in
# the running argmax go to the lowest input index.

def greedy_nms_numpy(boxes: np.ndarray, scores: np.ndarray, nt: float) -> np.ndarray:
    n = boxes.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64)
    iou = iou_matrix_numpy(boxes)
    alive = np.ones(n, dtype=bool)
    keep = []
    while alive.any():
        idx = np.flatnonzero(alive)
        m = idx[np.argmax(scores[idx])]
        keep.append(m)
        alive[m] = False
        alive[iou[m] >= nt] = False
    return np.asarray(keep, dtype=np.int64)


@njit(cache=True)
def greedy_nms_numba(boxes, scores, nt):
    n = boxes.shape[0]
    iou = iou_matrix_numba(boxes)
    alive = np.ones(n, dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    k = 0
    remaining = n
    while remaining > 0:
        m = -1
        best = -np.inf
        for i in range(n):
            if alive[i] and scores[i] > best:
                best = scores[i]
                m = i
        keep[k] = m
        k += 1
        alive[m] = False
        remaining -= 1
        for i in range(n):
            if alive[i] and iou[m, i] >= nt:
                alive[i] = False
                remaining -= 1
    return keep[:k]


def pairwise_nms_numpy(boxes, scores, nt, dt, dist):
    """Greedy selection; suppress only if iou >= nt AND dist <= dt.

    ``dist`` is a dense (N, N) matrix with NaN marking absent entries.
    Returns (keep, bad_i, bad_j); bad_i >= 0 flags a required distance that
    was missing (iou >= nt but NaN).
    """
    n = boxes.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64), -1, -1
    iou = iou_matrix_numpy(boxes)
    alive = np.ones(n, dtype=bool)
    keep = []
    while alive.any():
        idx = np.flatnonzero(alive)
        m = idx[np.argmax(scores[idx])]
        keep.append(m)
        alive[m] = False
        over = alive & (iou[m] >= nt)
        missing = over & np.isnan(dist[m])
        if missing.any():
            j = int(np.flatnonzero(missing)[0])
            return np.empty(0, dtype=np.int64), int(m), j
        alive[over & (dist[m] <= dt)] = False
    return np.asarray(keep, dtype=np.int64), -1, -1


@njit(cache=True)
def pairwise_nms_numba(boxes, scores, nt, dt, dist):
    n = boxes.shape[0]
    iou = iou_matrix_numba(boxes)
    alive = np.ones(n, dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    k = 0
    remaining = n
    while remaining > 0:
        m = -1
        best = -np.inf
        for i in range(n):
            if alive[i] and scores[i] > best:
                best = scores[i]
                m = i
        keep[k] = m
        k += 1
        alive[m] = False
        remaining -= 1
        for i in range(n):
            if alive[i] and iou[m, i] >= nt:
                d = dist[m, i]
                if np.isnan(d):
                    return np.empty(0, dtype=np.int64), m, i
                if d <= dt:
                    alive[i] = False
                    remaining -= 1
    return keep[:k], -1, -1


def soft_nms_linear_numpy(boxes, scores, nt, theta):
    n = boxes.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64), np.empty(0)
    iou = iou_matrix_numpy(boxes)
    s = scores.astype(np.float64).copy()
    alive = np.ones(n, dtype=bool)
    keep = []
    kept_scores = []
    while alive.any():
        idx = np.flatnonzero(alive)
        m = idx[np.argmax(s[idx])]
        keep.append(m)
        kept_scores.append(s[m])
        alive[m] = False
        decay = alive & (iou[m] >= nt)
        s[decay] *= 1.0 - iou[m, decay]
        alive &= s >= theta
    return np.asarray(keep, dtype=np.int64), np.asarray(kept_scores)


@njit(cache=True)
def soft_nms_linear_numba(boxes, scores, nt, theta):
    n = boxes.shape[0]
    iou = iou_matrix_numba(boxes)
    s = scores.copy()
    alive = np.ones(n, dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    kept_scores = np.empty(n)
    k = 0
    remaining = n
    while remaining > 0:
        m = -1
        best = -np.inf
        for i in range(n):
            if alive[i] and s[i] > best:
                best = s[i]
                m = i
        keep[k] = m
        kept_scores[k] = s[m]
        k += 1
        alive[m] = False
        remaining -= 1
        for i in range(n):
            if alive[i]:
                if iou[m, i] >= nt:
                    s[i] *= 1.0 - iou[m, i]
                if s[i] < theta:
                    alive[i] = False
                    remaining -= 1
    return keep[:k], kept_scores[:k]


def soft_nms_gaussian_numpy(boxes, scores, sigma, theta):
    n = boxes.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64), np.empty(0)
    iou = iou_matrix_numpy(boxes)
    s = scores.astype(np.float64).copy()
    alive = np.ones(n, dtype=bool)
    keep = []
    kept_scores = []
    while alive.any():
        idx = np.flatnonzero(alive)
        m = idx[np.argmax(s[idx])]
        keep.append(m)
        kept_scores.append(s[m])
        alive[m] = False
        s[alive] *= np.exp(-(iou[m, alive] ** 2) / sigma)
        alive &= s >= theta
    return np.asarray(keep, dtype=np.int64), np.asarray(kept_scores)


@njit(cache=True)
def soft_nms_gaussian_numba(boxes, scores, sigma, theta):
    n = boxes.shape[0]
    iou = iou_matrix_numba(boxes)
    s = scores.copy()
    alive = np.ones(n, dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    kept_scores = np.empty(n)
    k = 0
    remaining = n
    while remaining > 0:
        m = -1
        best = -np.inf
        for i in range(n):
            if alive[i] and s[i] > best:
                best = s[i]
                m = i
        keep[k] = m
        kept_scores[k] = s[m]
        k += 1
        alive[m] = False
        remaining -= 1
        for i in range(n):
            if alive[i]:
                s[i] *= np.exp(-(iou[m, i] ** 2) / sigma)
                if s[i] < theta:
                    alive[i] = False
                    remaining -= 1
    return keep[:k], kept_scores[:k]


if BACKEND == "numba":
    iou_matrix = iou_matrix_numba
    roi_align_kernel = roi_align_numba
    greedy_nms_kernel = greedy_nms_numba
    pairwise_nms_kernel = pairwise_nms_numba
    soft_nms_linear_kernel = soft_nms_linear_numba
    soft_nms_gaussian_kernel = soft_nms_gaussian_numba
else:
    iou_matrix = iou_matrix_numpy
    roi_align_kernel = roi_align_numpy
    greedy_nms_kernel = greedy_nms_numpy
    pairwise_nms_kernel = pairwise_nms_numpy
    soft_nms_linear_kernel = soft_nms_linear_numpy
    soft_nms_gaussian_kernel = soft_nms_gaussian_numpy
