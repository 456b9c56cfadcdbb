"""Gather/scatter kernels for the im2col convolution lowering.

The column matrix is kept transposed ([cin*kh*kw, n*hout*wout]) so that for
stride 1 both the gather and the scatter move contiguous rows; numba compiles
the loops when available, with an equivalent numpy fallback. Both paths move
data only; all arithmetic stays in BLAS.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except Exception:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn
        return deco


@njit(cache=True)
def _im2col_t_jit(xp, colsT, hout, wout, kh, kw, sh, sw):
    n, cin = xp.shape[0], xp.shape[1]
    for c in range(cin):
        for i in range(kh):
            for j in range(kw):
                col = (c * kh + i) * kw + j
                dst = colsT[col]
                for b in range(n):
                    base = b * hout * wout
                    for y in range(hout):
                        src = xp[b, c, y * sh + i]
                        row = base + y * wout
                        for x in range(wout):
                            dst[row + x] = src[x * sw + j]


@njit(cache=True)
def _col2im_t_jit(dcolsT, dxp, hout, wout, kh, kw, sh, sw):
    n, cin = dxp.shape[0], dxp.shape[1]
    for c in range(cin):
        for i in range(kh):
            for j in range(kw):
                col = (c * kh + i) * kw + j
                src = dcolsT[col]
                for b in range(n):
                    base = b * hout * wout
                    for y in range(hout):
                        dst = dxp[b, c, y * sh + i]
                        row = base + y * wout
                        for x in range(wout):
                            dst[x * sw + j] += src[row + x]


def im2col_t(xp: np.ndarray, hout: int, wout: int, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """Transposed column matrix [cin*kh*kw, n*hout*wout] of sliding windows."""
    n, cin = xp.shape[0], xp.shape[1]
    if HAVE_NUMBA:
        colsT = np.empty((cin * kh * kw, n * hout * wout), dtype=xp.dtype)
        _im2col_t_jit(xp, colsT, hout, wout, kh, kw, sh, sw)
        return colsT
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    return np.ascontiguousarray(windows.transpose(1, 4, 5, 0, 2, 3)).reshape(cin * kh * kw, n * hout * wout)


def col2im_t(dcolsT: np.ndarray, out_shape, hout: int, wout: int, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    """Scatter-add the transposed column gradient back onto the padded input."""
    dxp = np.zeros(out_shape, dtype=dcolsT.dtype)
    if HAVE_NUMBA:
        _col2im_t_jit(dcolsT, dxp, hout, wout, kh, kw, sh, sw)
        return dxp
    n, cin = out_shape[0], out_shape[1]
    dwin = dcolsT.reshape(cin, kh, kw, n, hout, wout)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + sh * hout:sh, j:j + sw * wout:sw] += dwin[:, i, j].transpose(1, 0, 2, 3)
    return dxp
