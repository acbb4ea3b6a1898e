"""Pixel-level kernels.

Every public kernel has a numba implementation (``*_nb``) and a numpy
implementation (``*_np``) with identical results; the unsuffixed name is bound
to one of them according to :data:`seaice._accel.USE_NUMBA`.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

__all__ = [
    "BACKEND",
    "confusion_counts",
    "masked_moments",
    "fill_polygon",
    "error_codes",
]

ERR_CORRECT, ERR_ERROR, ERR_IGNORE = 0, 1, 2


# --------------------------------------------------------------------------
# confusion counts


@njit
def confusion_counts_nb(labels, pred, valid, n_classes):
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    lab = labels.ravel()
    prd = pred.ravel()
    val = valid.ravel()
    for i in range(lab.size):
        if val[i]:
            out[lab[i], prd[i]] += 1
    return out


def confusion_counts_np(labels, pred, valid, n_classes):
    lab = labels.ravel()[valid.ravel()].astype(np.int64)
    prd = pred.ravel()[valid.ravel()].astype(np.int64)
    flat = np.bincount(lab * n_classes + prd, minlength=n_classes * n_classes)
    return flat.reshape(n_classes, n_classes).astype(np.int64)


# --------------------------------------------------------------------------
# per-channel masked moments (count, mean, sum of squared deviations)


@njit
def masked_moments_nb(channels, valid):
    n_ch = channels.shape[0]
    h = channels.shape[1]
    w = channels.shape[2]
    count = 0
    mean = np.zeros(n_ch, dtype=np.float64)
    m2 = np.zeros(n_ch, dtype=np.float64)
    for r in range(h):
        for c in range(w):
            if not valid[r, c]:
                continue
            count += 1
            for k in range(n_ch):
                x = np.float64(channels[k, r, c])
                delta = x - mean[k]
                mean[k] += delta / count
                m2[k] += delta * (x - mean[k])
    return count, mean, m2


def masked_moments_np(channels, valid):
    count = int(valid.sum())
    n_ch = channels.shape[0]
    if count == 0:
        return 0, np.zeros(n_ch), np.zeros(n_ch)
    vals = channels[:, valid].astype(np.float64)
    mean = vals.mean(axis=1)
    m2 = ((vals - mean[:, None]) ** 2).sum(axis=1)
    return count, mean, m2


# --------------------------------------------------------------------------
# scanline polygon fill
#
# Vertices are in pixel coordinates (x = column, y = row, origin at the
# top-left pixel corner), all rings of one polygon concatenated; ring k spans
# xs[starts[k]:starts[k + 1]]. A pixel is inside when its centre
# (c + 0.5, r + 0.5) is inside under the even-odd rule, with half-open edge
# handling so shared edges assign each centre to exactly one polygon.


@njit
def fill_polygon_nb(out, drawn, xs, ys, starts, value):
    h, w = out.shape
    n_rings = starts.size - 1
    ymin = np.inf
    ymax = -np.inf
    for i in range(ys.size):
        if ys[i] < ymin:
            ymin = ys[i]
        if ys[i] > ymax:
            ymax = ys[i]
    r0 = max(int(np.floor(ymin - 0.5)), 0)
    r1 = min(int(np.ceil(ymax - 0.5)), h - 1)
    xcross = np.empty(xs.size, dtype=np.float64)
    overlaps = 0
    for r in range(r0, r1 + 1):
        yc = r + 0.5
        n = 0
        for k in range(n_rings):
            a = starts[k]
            b = starts[k + 1]
            for i in range(a, b):
                j = i + 1 if i + 1 < b else a
                y0 = ys[i]
                y1 = ys[j]
                if (y0 <= yc) != (y1 <= yc):
                    xcross[n] = xs[i] + (yc - y0) * (xs[j] - xs[i]) / (y1 - y0)
                    n += 1
        if n < 2:
            continue
        cr = np.sort(xcross[:n])
        for p in range(0, n - 1, 2):
            # centres c + 0.5 in [cr[p], cr[p + 1])
            c0 = max(int(np.ceil(cr[p] - 0.5)), 0)
            c1 = min(int(np.ceil(cr[p + 1] - 0.5)) - 1, w - 1)
            for c in range(c0, c1 + 1):
                if drawn[r, c] and out[r, c] != value:
                    overlaps += 1
                out[r, c] = value
                drawn[r, c] = True
    return overlaps


def fill_polygon_np(out, drawn, xs, ys, starts, value):
    h, w = out.shape
    r0 = max(int(np.floor(ys.min() - 0.5)), 0)
    r1 = min(int(np.ceil(ys.max() - 0.5)), h - 1)
    if r1 < r0:
        return 0
    # edge list: each vertex joined to the next one of its ring
    nxt = np.arange(xs.size) + 1
    nxt[starts[1:] - 1] = starts[:-1]
    x0, y0, x1, y1 = xs, ys, xs[nxt], ys[nxt]
    yc = np.arange(r0, r1 + 1, dtype=np.float64)[:, None] + 0.5
    hit = (y0[None, :] <= yc) != (y1[None, :] <= yc)
    with np.errstate(divide="ignore", invalid="ignore"):
        xc = x0[None, :] + (yc - y0[None, :]) * ((x1 - x0) / (y1 - y0))[None, :]
    xc = np.where(hit, xc, np.inf)
    xc.sort(axis=1)
    n_hits = hit.sum(axis=1)
    cols = np.arange(w, dtype=np.float64) + 0.5
    overlaps = 0
    for i, n in enumerate(n_hits):
        if n < 2:
            continue
        left = xc[i, 0 : n - 1 : 2]
        right = xc[i, 1:n:2]
        # count of crossings left of each centre; odd -> inside
        inside = ((cols[:, None] >= left[None, :]) & (cols[:, None] < right[None, :])).any(axis=1)
        if not inside.any():
            continue
        r = r0 + i
        row_out = out[r]
        row_drawn = drawn[r]
        overlaps += int((inside & row_drawn & (row_out != value)).sum())
        row_out[inside] = value
        row_drawn[inside] = True
    return overlaps


# --------------------------------------------------------------------------
# error codes: 0 correct, 1 error, 2 ignore


@njit
def error_codes_nb(pred, labels, valid):
    out = np.empty(pred.shape, dtype=np.uint8)
    p = pred.ravel()
    lab = labels.ravel()
    v = valid.ravel()
    o = out.ravel()
    for i in range(p.size):
        if not v[i]:
            o[i] = ERR_IGNORE
        elif p[i] != lab[i]:
            o[i] = ERR_ERROR
        else:
            o[i] = ERR_CORRECT
    return out


def error_codes_np(pred, labels, valid):
    out = np.where(pred != labels, ERR_ERROR, ERR_CORRECT).astype(np.uint8)
    out[~valid] = ERR_IGNORE
    return out


if USE_NUMBA:
    BACKEND = "numba"
    confusion_counts = confusion_counts_nb
    masked_moments = masked_moments_nb
    fill_polygon = fill_polygon_nb
    error_codes = error_codes_nb
else:
    BACKEND = "numpy"
    confusion_counts = confusion_counts_np
    masked_moments = masked_moments_np
    fill_polygon = fill_polygon_np
    error_codes = error_codes_np
