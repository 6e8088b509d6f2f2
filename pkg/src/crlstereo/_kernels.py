"""Compiled gather/scatter loops for convolution lowering (channels-last)."""

import numba
import numpy as np


@numba.njit(cache=True)
def im2col(xp, k, s, ho, wo):
    # xp: (N, Hp, Wp, C) -> rows (n, y, x), columns (i, j, c)
    n_, c_ = xp.shape[0], xp.shape[3]
    out = np.empty((n_ * ho * wo, k * k * c_), dtype=xp.dtype)
    for n in range(n_):
        for y in range(ho):
            for x in range(wo):
                r = (n * ho + y) * wo + x
                for i in range(k):
                    for j in range(k):
                        base = (i * k + j) * c_
                        for c in range(c_):
                            out[r, base + c] = xp[n, y * s + i, x * s + j, c]
    return out


@numba.njit(cache=True)
def col2im(cols, n_, hp, wp, c_, k, s, ho, wo):
    # adjoint of im2col: scatter-add rows back into (N, Hp, Wp, C)
    out = np.zeros((n_, hp, wp, c_), dtype=cols.dtype)
    for n in range(n_):
        for y in range(ho):
            for x in range(wo):
                r = (n * ho + y) * wo + x
                for i in range(k):
                    for j in range(k):
                        base = (i * k + j) * c_
                        for c in range(c_):
                            out[n, y * s + i, x * s + j, c] += cols[r, base + c]
    return out
