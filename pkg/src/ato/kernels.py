"""Hot inner loops: patch extraction for convolution and grouped shrinkage.

Every kernel exists twice, a loop version compiled by numba and a vectorized
numpy version.  The public names dispatch according to ``ato._accel``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import njit, pick


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------- im2col


@njit
def _im2col_loops(x, k, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = np.zeros((n * ho * wo, c * k * k))
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                row = (b * ho + oy) * wo + ox
                for ch in range(c):
                    for ky in range(k):
                        iy = oy * stride + ky - pad
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(k):
                            ix = ox * stride + kx - pad
                            if ix < 0 or ix >= w:
                                continue
                            cols[row, (ch * k + ky) * k + kx] = x[b, ch, iy, ix]
    return cols


def _im2col_numpy(x, k, stride, pad):
    n, c, h, w = x.shape
    ho, wo = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)


@njit
def _col2im_loops(cols, n, c, h, w, k, stride, pad):
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    x = np.zeros((n, c, h, w))
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                row = (b * ho + oy) * wo + ox
                for ch in range(c):
                    for ky in range(k):
                        iy = oy * stride + ky - pad
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(k):
                            ix = ox * stride + kx - pad
                            if ix < 0 or ix >= w:
                                continue
                            x[b, ch, iy, ix] += cols[row, (ch * k + ky) * k + kx]
    return x


def _col2im_numpy(cols, n, c, h, w, k, stride, pad):
    ho, wo = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    patches = cols.reshape(n, ho, wo, c, k, k)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for ky in range(k):
        for kx in range(k):
            xp[:, :, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] += (
                patches[:, :, :, :, ky, kx].transpose(0, 3, 1, 2)
            )
    return xp[:, :, pad : pad + h, pad : pad + w].copy() if pad else xp


# ------------------------------------------------------- grouped shrinkage


@njit
def _group_prox_loops(z, offsets, thresholds):
    out = z.copy()
    for g in range(offsets.shape[0] - 1):
        lo, hi = offsets[g], offsets[g + 1]
        thr = thresholds[g]
        if thr <= 0.0:
            continue
        sq = 0.0
        for i in range(lo, hi):
            sq += z[i] * z[i]
        norm = np.sqrt(sq)
        if norm >= thr and norm > 0.0:
            scale = 1.0 - thr / norm
            for i in range(lo, hi):
                out[i] = z[i] * scale
        else:
            for i in range(lo, hi):
                out[i] = 0.0
    return out


def _group_prox_numpy(z, offsets, thresholds):
    sizes = np.diff(offsets)
    owner = np.repeat(np.arange(sizes.size), sizes)
    norms = np.sqrt(np.bincount(owner, weights=z * z, minlength=sizes.size))
    scale = shrink_factors(norms, thresholds)
    return z * scale[owner]


def shrink_factors(norms, thresholds):
    """Per-group multipliers of the block soft-threshold.

    ``1 - t/||z||`` when ``||z|| >= t``, 0 below the threshold, 1 when ``t == 0``.
    """
    norms = np.asarray(norms, dtype=np.float64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    keep = (norms >= thresholds) & (norms > 0.0)
    safe = np.where(norms > 0.0, norms, 1.0)
    scale = np.where(keep, 1.0 - thresholds / safe, 0.0)
    return np.where(thresholds <= 0.0, 1.0, scale)


im2col = pick(_im2col_loops, _im2col_numpy)
col2im = pick(_col2im_loops, _col2im_numpy)
group_prox_flat = pick(_group_prox_loops, _group_prox_numpy)


def conv_output_shape(h, w, k, stride, pad):
    return _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
