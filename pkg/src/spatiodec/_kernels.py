"""im2col gather, numba-accelerated when available.

Both paths produce the identical ``[n * P, k^3 * c_in]`` matrix (channels
innermost, matching the kernel layout from ``_weights_2d``); numba only
changes the copy speed, never the values.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False


def _gather_cols_numpy(xpad, kshape, stride):
    kh, kw, kd = kshape
    xl = np.ascontiguousarray(xpad.transpose(0, 2, 3, 4, 1))  # [n, H, W, D, c]
    win = sliding_window_view(xl, (kh, kw, kd), axis=(1, 2, 3))[:, ::stride, ::stride, ::stride]
    n, ho, wo, do, c = win.shape[:5]
    cols = win.transpose(0, 1, 2, 3, 5, 6, 7, 4).reshape(n * ho * wo * do, kh * kw * kd * c)
    return cols, (ho, wo, do)


if HAVE_NUMBA:

    @njit(cache=True, parallel=True)
    def _gather_cols_jit(xpad, kh, kw, kd, stride, ho, wo, do, cols):  # pragma: no cover - jitted
        n, c = xpad.shape[0], xpad.shape[1]
        # flat output-cell loop; disjoint writes, so parallelism stays bitwise
        for p in prange(n * ho * wo * do):
            nn = p // (ho * wo * do)
            rem = p % (ho * wo * do)
            a = rem // (wo * do)
            b = (rem % (wo * do)) // do
            cc = rem % do
            for i in range(kh):
                for j in range(kw):
                    for l in range(kd):
                        base = ((i * kw + j) * kd + l) * c
                        for ch in range(c):
                            cols[p, base + ch] = xpad[
                                nn, ch, a * stride + i, b * stride + j, cc * stride + l
                            ]


def gather_cols(xpad: np.ndarray, kshape, stride: int):
    """im2col matrix plus the output extents."""
    kh, kw, kd = kshape
    if not HAVE_NUMBA:
        return _gather_cols_numpy(xpad, kshape, stride)
    n, c = xpad.shape[:2]
    ho, wo, do = ((e - k) // stride + 1 for e, k in zip(xpad.shape[2:], kshape))
    cols = np.empty((n * ho * wo * do, kh * kw * kd * c), dtype=xpad.dtype)
    _gather_cols_jit(xpad, kh, kw, kd, stride, ho, wo, do, cols)
    return cols, (ho, wo, do)
