"""Hot inner loops: im2col/col2im and bilinear grid sampling.

Each kernel has a numba implementation and a numpy fallback with identical
semantics. ``BACKEND`` reports which one the public names are bound to;
both variants stay importable (``*_numba`` / ``*_numpy``) for benchmarking
and cross-checking.
"""
import numpy as np

from ._accel import HAVE_NUMBA, njit

if HAVE_NUMBA:
    from numba import prange
else:  # pragma: no cover
    prange = range


# ---------------------------------------------------------------- im2col

def im2col_numpy(xp, k, stride, ho, wo):
    """Padded ``(B, C, Hp, Wp)`` -> columns ``(C, k, k, B, ho, wo)``."""
    b, c = xp.shape[:2]
    cols = np.empty((c, k, k, b, ho, wo), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols


def col2im_numpy(cols, hp, wp, stride):
    """Adjoint of :func:`im2col_numpy`; returns ``(B, C, hp, wp)``."""
    c, k, _, b, ho, wo = cols.shape
    out = np.zeros((c, b, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


@njit(parallel=True)
def _im2col_nb(xp, k, stride, ho, wo):
    b, c = xp.shape[0], xp.shape[1]
    cols = np.empty((c, k, k, b, ho, wo), dtype=xp.dtype)
    for t in prange(c * k * k):
        ci = t // (k * k)
        i = (t // k) % k
        j = t % k
        for bi in range(b):
            for y in range(ho):
                src = xp[bi, ci, y * stride + i]
                dst = cols[ci, i, j, bi, y]
                if stride == 1:
                    dst[:] = src[j:j + wo]
                else:
                    for x in range(wo):
                        dst[x] = src[x * stride + j]
    return cols


@njit(parallel=True)
def _col2im_nb(cols, hp, wp, stride):
    c, k, b, ho, wo = cols.shape[0], cols.shape[1], cols.shape[3], cols.shape[4], cols.shape[5]
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    # one channel per thread: no write conflicts, fixed summation order
    for ci in prange(c):
        for bi in range(b):
            for i in range(k):
                for j in range(k):
                    for y in range(ho):
                        dst = out[bi, ci, y * stride + i]
                        src = cols[ci, i, j, bi, y]
                        if stride == 1:
                            dst[j:j + wo] += src
                        else:
                            for x in range(wo):
                                dst[x * stride + j] += src[x]
    return out


def im2col_numba(xp, k, stride, ho, wo):
    return _im2col_nb(np.ascontiguousarray(xp), k, stride, ho, wo)


def col2im_numba(cols, hp, wp, stride):
    return _col2im_nb(np.ascontiguousarray(cols), hp, wp, stride)


# --------------------------------------------------------- grid sampling
#
# ``gx``/``gy`` hold absolute sample coordinates in source pixels, shape
# (B, Ht, Wt). Coordinates are clamped to [0, W-1] x [0, H-1]; the clamp has
# zero derivative outside the image.

def _corners(gx, gy, hs, ws):
    cx = np.clip(gx, 0.0, ws - 1)
    cy = np.clip(gy, 0.0, hs - 1)
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    x1 = np.minimum(x0 + 1, ws - 1)
    y1 = np.minimum(y0 + 1, hs - 1)
    wx = (cx - x0).astype(gx.dtype)
    wy = (cy - y0).astype(gy.dtype)
    return x0, x1, y0, y1, wx, wy


def _gather(img, yi, xi):
    b, c, hs, ws = img.shape
    flat = img.reshape(b, c, hs * ws)
    idx = (yi * ws + xi).reshape(b, 1, -1)
    return np.take_along_axis(flat, np.broadcast_to(idx, (b, c, idx.shape[2])), axis=2)


def grid_sample_fwd_numpy(img, gx, gy):
    b, c, hs, ws = img.shape
    ht, wt = gx.shape[1:]
    x0, x1, y0, y1, wx, wy = _corners(gx, gy, hs, ws)
    wx = wx.reshape(b, 1, -1)
    wy = wy.reshape(b, 1, -1)
    out = ((1 - wy) * ((1 - wx) * _gather(img, y0, x0) + wx * _gather(img, y0, x1))
           + wy * ((1 - wx) * _gather(img, y1, x0) + wx * _gather(img, y1, x1)))
    return out.reshape(b, c, ht, wt)


def grid_sample_bwd_numpy(img, gx, gy, gout):
    b, c, hs, ws = img.shape
    x0, x1, y0, y1, wx, wy = _corners(gx, gy, hs, ws)
    g = gout.reshape(b, c, -1)
    wxf = wx.reshape(b, 1, -1)
    wyf = wy.reshape(b, 1, -1)
    gimg = np.zeros((b, c, hs * ws), dtype=img.dtype)
    for yi, xi, w in ((y0, x0, (1 - wyf) * (1 - wxf)), (y0, x1, (1 - wyf) * wxf),
                      (y1, x0, wyf * (1 - wxf)), (y1, x1, wyf * wxf)):
        idx = (yi * ws + xi).reshape(b, -1)
        contrib = g * w
        for bi in range(b):
            for ci in range(c):
                gimg[bi, ci] += np.bincount(idx[bi], weights=contrib[bi, ci], minlength=hs * ws)
    v00 = _gather(img, y0, x0)
    v01 = _gather(img, y0, x1)
    v10 = _gather(img, y1, x0)
    v11 = _gather(img, y1, x1)
    dx = (1 - wyf) * (v01 - v00) + wyf * (v11 - v10)
    dy = (1 - wxf) * (v10 - v00) + wxf * (v11 - v01)
    inx = ((gx >= 0) & (gx <= ws - 1)).reshape(b, -1)
    iny = ((gy >= 0) & (gy <= hs - 1)).reshape(b, -1)
    ggx = (g * dx).sum(axis=1) * inx
    ggy = (g * dy).sum(axis=1) * iny
    return (gimg.reshape(img.shape).astype(img.dtype),
            ggx.reshape(gx.shape).astype(gx.dtype),
            ggy.reshape(gy.shape).astype(gy.dtype))


@njit(parallel=True)
def _grid_fwd_nb(img, gx, gy):
    b, c, hs, ws = img.shape
    ht, wt = gx.shape[1], gx.shape[2]
    out = np.empty((b, c, ht, wt), dtype=img.dtype)
    for bi in prange(b):
        for y in range(ht):
            for x in range(wt):
                sx = min(max(gx[bi, y, x], 0.0), ws - 1.0)
                sy = min(max(gy[bi, y, x], 0.0), hs - 1.0)
                x0 = int(np.floor(sx))
                y0 = int(np.floor(sy))
                x1 = min(x0 + 1, ws - 1)
                y1 = min(y0 + 1, hs - 1)
                wx = sx - x0
                wy = sy - y0
                for ci in range(c):
                    top = (1 - wx) * img[bi, ci, y0, x0] + wx * img[bi, ci, y0, x1]
                    bot = (1 - wx) * img[bi, ci, y1, x0] + wx * img[bi, ci, y1, x1]
                    out[bi, ci, y, x] = (1 - wy) * top + wy * bot
    return out


@njit(parallel=True)
def _grid_bwd_nb(img, gx, gy, gout):
    b, c, hs, ws = img.shape
    ht, wt = gx.shape[1], gx.shape[2]
    gimg = np.zeros_like(img)
    ggx = np.zeros_like(gx)
    ggy = np.zeros_like(gy)
    for bi in prange(b):
        for y in range(ht):
            for x in range(wt):
                rx = gx[bi, y, x]
                ry = gy[bi, y, x]
                sx = min(max(rx, 0.0), ws - 1.0)
                sy = min(max(ry, 0.0), hs - 1.0)
                x0 = int(np.floor(sx))
                y0 = int(np.floor(sy))
                x1 = min(x0 + 1, ws - 1)
                y1 = min(y0 + 1, hs - 1)
                wx = sx - x0
                wy = sy - y0
                ax = 0.0
                ay = 0.0
                for ci in range(c):
                    g = gout[bi, ci, y, x]
                    v00 = img[bi, ci, y0, x0]
                    v01 = img[bi, ci, y0, x1]
                    v10 = img[bi, ci, y1, x0]
                    v11 = img[bi, ci, y1, x1]
                    gimg[bi, ci, y0, x0] += g * (1 - wy) * (1 - wx)
                    gimg[bi, ci, y0, x1] += g * (1 - wy) * wx
                    gimg[bi, ci, y1, x0] += g * wy * (1 - wx)
                    gimg[bi, ci, y1, x1] += g * wy * wx
                    ax += g * ((1 - wy) * (v01 - v00) + wy * (v11 - v10))
                    ay += g * ((1 - wx) * (v10 - v00) + wx * (v11 - v01))
                if rx >= 0 and rx <= ws - 1:
                    ggx[bi, y, x] = ax
                if ry >= 0 and ry <= hs - 1:
                    ggy[bi, y, x] = ay
    return gimg, ggx, ggy


def grid_sample_fwd_numba(img, gx, gy):
    return _grid_fwd_nb(np.ascontiguousarray(img), np.ascontiguousarray(gx),
                        np.ascontiguousarray(gy))


def grid_sample_bwd_numba(img, gx, gy, gout):
    return _grid_bwd_nb(np.ascontiguousarray(img), np.ascontiguousarray(gx),
                        np.ascontiguousarray(gy), np.ascontiguousarray(gout))


if HAVE_NUMBA:
    BACKEND = "numba"
    im2col = im2col_numba
    col2im = col2im_numba
    grid_sample_fwd = grid_sample_fwd_numba
    grid_sample_bwd = grid_sample_bwd_numba
else:  # pragma: no cover
    BACKEND = "numpy"
    im2col = im2col_numpy
    col2im = col2im_numpy
    grid_sample_fwd = grid_sample_fwd_numpy
    grid_sample_bwd = grid_sample_bwd_numpy
