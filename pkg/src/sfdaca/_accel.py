"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``SFDACA_NO_NUMBA=1`` in the environment (before import) to force the
numpy implementations. Both paths compute identical results; the benchmark in
``benchmarks/bench_kernels.py`` compares their speed.
"""

import os

import numpy as np

_DISABLED = os.environ.get("SFDACA_NO_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    if _DISABLED:
        raise ImportError("numba disabled by SFDACA_NO_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


BACKEND = "numba" if HAS_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference implementations (always importable, used by tests as the
# cross-check for the jitted versions)
# ---------------------------------------------------------------------------


def col2im_numpy(cols, n, h, w, c, k, stride, pad):
    """Scatter-add patch gradients back into a padded NHWC image gradient.

    ``cols`` has shape (n, ho, wo, k, k, c).
    """
    ho, wo = cols.shape[1], cols.shape[2]
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for di in range(k):
        for dj in range(k):
            out[:, di:di + stride * ho:stride, dj:dj + stride * wo:stride, :] += cols[:, :, :, di, dj, :]
    if pad:
        out = out[:, pad:-pad, pad:-pad, :]
    return out


def iou_matrix_numpy(a, b):
    """Pairwise IoU between (n,4) and (m,4) corner-form boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def nms_numpy(boxes, scores, iou_thr):
    """Greedy non-maximum suppression; returns kept indices by descending score."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(order), dtype=bool)
    if len(order) == 0:
        return np.zeros(0, dtype=np.int64)
    ious = iou_matrix_numpy(boxes, boxes)
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_thr
    return np.asarray(keep, dtype=np.int64)


def blur_rows_numpy(img, kernel):
    """Convolve each row of an (h, w, c) image with a 1-D kernel, edge-replicated."""
    r = len(kernel) // 2
    padded = np.pad(img, ((0, 0), (r, r), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    w = img.shape[1]
    for t in range(len(kernel)):
        out += kernel[t] * padded[:, t:t + w, :]
    return out


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _col2im_nb(cols, n, h, w, c, k, stride, pad):
        ho, wo = cols.shape[1], cols.shape[2]
        out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for di in range(k):
                        y = i * stride + di
                        for dj in range(k):
                            x = j * stride + dj
                            for ch in range(c):
                                out[b, y, x, ch] += cols[b, i, j, di, dj, ch]
        return out[:, pad:pad + h, pad:pad + w, :]

    @njit(cache=True)
    def _iou_matrix_nb(a, b):
        n, m = a.shape[0], b.shape[0]
        out = np.zeros((n, m))
        for i in range(n):
            area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
            for j in range(m):
                ix = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
                iy = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
                if ix <= 0.0 or iy <= 0.0:
                    continue
                inter = ix * iy
                area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
                union = area_a + area_b - inter
                if union > 0.0:
                    out[i, j] = inter / union
        return out

    @njit(cache=True)
    def _nms_nb(boxes, scores, iou_thr):
        order = np.argsort(-scores, kind="mergesort")
        n = order.shape[0]
        suppressed = np.zeros(n, dtype=np.bool_)
        keep = np.empty(n, dtype=np.int64)
        nk = 0
        for p in range(n):
            i = order[p]
            if suppressed[i]:
                continue
            keep[nk] = i
            nk += 1
            for q in range(p + 1, n):
                j = order[q]
                if suppressed[j]:
                    continue
                ix = min(boxes[i, 2], boxes[j, 2]) - max(boxes[i, 0], boxes[j, 0])
                iy = min(boxes[i, 3], boxes[j, 3]) - max(boxes[i, 1], boxes[j, 1])
                if ix <= 0.0 or iy <= 0.0:
                    continue
                inter = ix * iy
                ua = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
                ub = (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1])
                if inter / (ua + ub - inter) > iou_thr:
                    suppressed[j] = True
        return keep[:nk]

    @njit(cache=True)
    def _blur_rows_nb(img, kernel):
        h, w, c = img.shape
        r = kernel.shape[0] // 2
        out = np.zeros_like(img)
        for y in range(h):
            for x in range(w):
                for t in range(kernel.shape[0]):
                    xx = min(max(x + t - r, 0), w - 1)
                    for ch in range(c):
                        out[y, x, ch] += kernel[t] * img[y, xx, ch]
        return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def col2im(cols, n, h, w, c, k, stride, pad):
    if HAS_NUMBA:
        return _col2im_nb(np.ascontiguousarray(cols), n, h, w, c, k, stride, pad)
    return col2im_numpy(cols, n, h, w, c, k, stride, pad)


def iou_matrix(a, b):
    if HAS_NUMBA:
        a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
        b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
        return _iou_matrix_nb(a, b)
    return iou_matrix_numpy(a, b)


def nms(boxes, scores, iou_thr):
    if HAS_NUMBA:
        return _nms_nb(np.ascontiguousarray(boxes, dtype=np.float64),
                       np.ascontiguousarray(scores, dtype=np.float64), float(iou_thr))
    return nms_numpy(boxes, scores, iou_thr)


def blur_rows(img, kernel):
    if HAS_NUMBA:
        return _blur_rows_nb(np.ascontiguousarray(img, dtype=np.float64),
                             np.ascontiguousarray(kernel, dtype=np.float64))
    return blur_rows_numpy(img, kernel)
