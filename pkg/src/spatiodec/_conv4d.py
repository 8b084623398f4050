"""Spatiotemporal (4D) convolution as a strided temporal loop of 3D convolutions.

An input ``x [n, c_in, l, H, W, D]`` is convolved with a kernel carrying an
extra temporal extent ``k_t``.  Output frame ``j`` accumulates, over taps
``i in 0..k_t-1``, the 3D convolution of input frame ``j*s_t + i`` with the
kernel's temporal slice ``i``; the temporal axis is valid (never padded),
so ``T_out = floor((l - k_t) / s_t) + 1``, while the spatial axes use
``same_zero`` padding with stride ``s_s``.

``conv4d_oracle`` computes the same quantity by direct summation over
``(c_in, k_t, k_h, k_w, k_d)`` per output cell, without the temporal
decomposition, and exists purely to cross-check ``conv4d``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .ops import _pad_amounts, conv3d_grad_w, conv3d_grad_x, conv3d_raw
from .tensor import DTYPES, DiffValue, record_op, reshape, value_of


@dataclass
class Conv4DKernel:
    """Weights ``[c_out, c_in, k_t, k_h, k_w, k_d]`` plus bias ``[c_out]``."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        shape = value_of(self.weights).shape
        if len(shape) != 6 or shape[2] < 1:
            raise ShapeError(f"4D kernel must be rank 6 with k_t >= 1, got {shape}")
        if any(k % 2 == 0 for k in shape[3:]):
            raise ShapeError(f"spatial kernel extents must be odd, got {shape[3:]}")


@dataclass
class Conv4DConfig:
    """Temporal stride ``s_t`` and spatial stride ``s_s``."""

    s_t: int = 1
    s_s: int = 2

    def __post_init__(self):
        if self.s_t < 1 or self.s_s < 1:
            raise ShapeError("strides must be positive")


def init_conv4d(rng, c_in, c_out, k_t, k_spatial, precision="single"):
    """Fan-in scaled normal weights, zero bias."""
    dtype = DTYPES[precision]
    fan_in = c_in * k_t * k_spatial**3
    w = rng.standard_normal((c_out, c_in, k_t, k_spatial, k_spatial, k_spatial))
    w = (w * np.sqrt(2.0 / fan_in)).astype(dtype)
    return Conv4DKernel(w, np.zeros(c_out, dtype=dtype))


def _check_input(xv, wv):
    if xv.ndim != 6:
        raise ShapeError(f"conv4d input must be rank 6, got {xv.ndim}")
    if xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"channel mismatch: input {xv.shape[1]}, kernel expects {wv.shape[1]}")
    if xv.shape[2] < wv.shape[2]:
        raise ShapeError(
            f"temporal length {xv.shape[2]} shorter than temporal kernel {wv.shape[2]}"
        )


def _spatial_pad(xv, wv, s_s):
    pads = [_pad_amounts(e, k, s_s, "same_zero") for e, k in zip(xv.shape[3:], wv.shape[3:])]
    if any(p != (0, 0) for p in pads):
        xv = np.pad(xv, [(0, 0), (0, 0), (0, 0)] + pads)
    return xv, pads


def _tap_frames(xpad: np.ndarray, i: int, s_t: int, t_out: int) -> np.ndarray:
    """Frames feeding temporal tap ``i``, stacked into the batch axis:
    ``[n * T_out, c_in, Hp, Wp, Dp]``."""
    n, c_in = xpad.shape[:2]
    frames = np.moveaxis(xpad[:, :, i : i + s_t * t_out : s_t], 2, 1)
    return np.ascontiguousarray(frames).reshape((n * t_out, c_in) + xpad.shape[3:])


def conv4d(x, k: Conv4DKernel, cfg: Conv4DConfig):
    """4D convolution ``[n, c_in, l, H, W, D] -> [n, c_out, T_out, H', W', D']``.

    Each temporal tap runs one batched 3D convolution over its frame
    stack, and the taps accumulate into the strided output frames.
    """
    xv, wv, bv = value_of(x), value_of(k.weights), value_of(k.bias)
    _check_input(xv, wv)
    k_t, s_t, s_s = wv.shape[2], cfg.s_t, cfg.s_s
    n, c_out = xv.shape[0], wv.shape[0]
    t_out = (xv.shape[2] - k_t) // s_t + 1
    xpad, pads = _spatial_pad(xv, wv, s_s)

    taped = isinstance(x, DiffValue) or isinstance(k.weights, DiffValue)
    if k_t == 1:
        # one tap degenerates to frame-wise 3D convolution; using the same
        # per-frame kernel shapes keeps the equivalence bitwise
        frames = [
            conv3d_raw(xpad[:, :, j * s_t], wv[:, :, 0], s_s, "valid")[0] for j in range(t_out)
        ]
        out = np.stack(frames, axis=2) + bv.reshape(1, -1, 1, 1, 1, 1)
        tap_cols = [None]
    else:
        acc = None
        tap_cols = []
        for i in range(k_t):
            y, _, _, cols = conv3d_raw(
                _tap_frames(xpad, i, s_t, t_out), wv[:, :, i], s_s, "valid", want_cols=True
            )
            tap_cols.append(cols if taped else None)
            acc = y if acc is None else acc + y
        acc = acc.reshape((n, t_out, c_out) + acc.shape[2:])
        out = np.ascontiguousarray(np.moveaxis(acc, 1, 2)) + bv.reshape(1, -1, 1, 1, 1, 1)

    frame_shape = (n * t_out, xv.shape[1]) + xpad.shape[3:]
    no_pad = [(0, 0)] * 3

    def _grad_frames(g):
        g2 = np.moveaxis(g, 2, 1)
        return np.ascontiguousarray(g2).reshape((n * t_out, c_out) + g.shape[3:])

    def vjp_x(g):
        g2 = _grad_frames(g)
        gxp = np.zeros(xpad.shape, dtype=g.dtype)
        for i in range(k_t):
            gxf = conv3d_grad_x(g2, wv[:, :, i], frame_shape, no_pad, s_s, frame_shape)
            gxf = gxf.reshape((n, t_out) + gxf.shape[1:])
            gxp[:, :, i : i + s_t * t_out : s_t] += np.moveaxis(gxf, 1, 2)
        sl = tuple(slice(lo, lo + e) for (lo, _), e in zip(pads, xv.shape[3:]))
        return gxp[(slice(None), slice(None), slice(None)) + sl]

    def vjp_w(g):
        g2 = _grad_frames(g)
        gw = np.empty_like(wv)
        for i in range(k_t):
            cols = tap_cols[i]
            frames = None if cols is not None else _tap_frames(xpad, i, s_t, t_out)
            gw[:, :, i] = conv3d_grad_w(g2, frames, wv.shape[3:], s_s, cols)
        return gw

    return record_op(
        out,
        [
            (x, vjp_x),
            (k.weights, vjp_w),
            (k.bias, lambda g: g.sum(axis=(0, 2, 3, 4, 5))),
        ],
    )


def conv4d_oracle(x, k: Conv4DKernel, cfg: Conv4DConfig) -> np.ndarray:
    """Direct per-cell summation over the full 4D kernel support.

    Slow reference path: no temporal decomposition, no windowing tricks.
    """
    xv, wv, bv = value_of(x), value_of(k.weights), value_of(k.bias)
    _check_input(xv, wv)
    k_t, s_t, s_s = wv.shape[2], cfg.s_t, cfg.s_s
    kh, kw, kd = wv.shape[3:]
    t_out = (xv.shape[2] - k_t) // s_t + 1
    xpad, _ = _spatial_pad(xv, wv, s_s)
    n, c_out = xv.shape[0], wv.shape[0]
    h_out = (xpad.shape[3] - kh) // s_s + 1
    w_out = (xpad.shape[4] - kw) // s_s + 1
    d_out = (xpad.shape[5] - kd) // s_s + 1

    out = np.zeros((n, c_out, t_out, h_out, w_out, d_out), dtype=xv.dtype)
    for nn in range(n):
        for co in range(c_out):
            for j in range(t_out):
                for a in range(h_out):
                    for b in range(w_out):
                        for c in range(d_out):
                            region = xpad[
                                nn,
                                :,
                                j * s_t : j * s_t + k_t,
                                a * s_s : a * s_s + kh,
                                b * s_s : b * s_s + kw,
                                c * s_s : c * s_s + kd,
                            ]
                            out[nn, co, j, a, b, c] = (region * wv[co]).sum() + bv[co]
    return out


def temporal_flatten(y):
    """Fold the temporal axis into channels: ``[n, c, T, ...] -> [n, c*T, ...]``.

    Pure relabeling; the new channel index is ``c_idx * T + t_idx``, so each
    channel's time series stays contiguous.
    """
    yv = value_of(y)
    if yv.ndim != 6:
        raise ShapeError(f"temporal_flatten expects rank 6, got {yv.ndim}")
    n, c, t = yv.shape[:3]
    return reshape(y, (n, c * t) + yv.shape[3:])
