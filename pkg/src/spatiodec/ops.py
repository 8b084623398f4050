"""Neural building blocks with tape-registered gradients.

All volumetric tensors are laid out ``[batch, channel, H, W, D]``.  The 3D
convolution is a cross-correlation (no kernel flip) computed by windowing
the padded input with ``sliding_window_view`` and contracting against the
kernel with one ``tensordot``; its input gradient is assembled by a short
loop over kernel offsets so every heavy step is a BLAS call.

Padding modes:

* ``"valid"``: output extent ``floor((E - k) / s) + 1``.
* ``"same_zero"``: output extent ``ceil(E / s)`` with symmetric zero
  padding, the extra voxel on the high side when the total pad is odd.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._kernels import gather_cols as _gather_cols

from .errors import ContractError, DegenerateBatchError, LabelError, ShapeError
from .tensor import DTYPES, DiffValue, record_op, value_of

NORM_BUFFERS = ("running_mean", "running_var")


@dataclass
class Conv3DParams:
    """Weights ``[c_out, c_in, k_h, k_w, k_d]`` plus bias ``[c_out]``."""

    weights: np.ndarray
    bias: np.ndarray
    spatial_stride: int = 1
    padding: str = "same_zero"

    def __post_init__(self):
        if self.padding not in ("valid", "same_zero"):
            raise ContractError(f"unknown padding {self.padding!r}")
        if self.padding == "same_zero" and any(k % 2 == 0 for k in value_of(self.weights).shape[2:]):
            raise ShapeError("same_zero padding requires odd kernel extents")
        if self.spatial_stride < 1:
            raise ShapeError("stride must be positive")


@dataclass
class NormParams:
    """Per-channel batch normalization parameters and running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ContractError("momentum must lie in (0, 1)")
        if self.epsilon <= 0.0:
            raise ContractError("epsilon must be positive")


def init_conv3d(rng, c_in, c_out, kernel, stride=1, padding="same_zero", precision="single"):
    """Fan-in scaled normal weights (std = sqrt(2 / fan_in)), zero bias."""
    dtype = DTYPES[precision]
    kh, kw, kd = (kernel,) * 3 if np.isscalar(kernel) else kernel
    fan_in = c_in * kh * kw * kd
    w = (rng.standard_normal((c_out, c_in, kh, kw, kd)) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return Conv3DParams(w, np.zeros(c_out, dtype=dtype), stride, padding)


def init_norm(c, momentum=0.1, epsilon=1e-5, precision="single"):
    dtype = DTYPES[precision]
    return NormParams(
        gamma=np.ones(c, dtype=dtype),
        beta=np.zeros(c, dtype=dtype),
        running_mean=np.zeros(c, dtype=dtype),
        running_var=np.ones(c, dtype=dtype),
        momentum=momentum,
        epsilon=epsilon,
    )


def _pad_amounts(extent: int, k: int, stride: int, padding: str):
    if padding == "valid":
        if extent < k:
            raise ShapeError(f"extent {extent} smaller than kernel {k} under valid padding")
        return 0, 0
    out = -(-extent // stride)  # ceil
    total = max((out - 1) * stride + k - extent, 0)
    return total // 2, total - total // 2


def _weights_2d(wv: np.ndarray) -> np.ndarray:
    """Kernel as ``[c_out, k^3 * c_in]`` matching the im2col column order."""
    return wv.transpose(0, 2, 3, 4, 1).reshape(wv.shape[0], -1)


def _zero_pad(xv: np.ndarray, pads) -> np.ndarray:
    """Zero-pad the three spatial axes (faster than np.pad for this case)."""
    if all(p == (0, 0) for p in pads):
        return xv
    shape = xv.shape[:2] + tuple(e + lo + hi for e, (lo, hi) in zip(xv.shape[2:], pads))
    out = np.zeros(shape, dtype=xv.dtype)
    sl = tuple(slice(lo, lo + e) for (lo, _), e in zip(pads, xv.shape[2:]))
    out[(slice(None), slice(None)) + sl] = xv
    return out


def conv3d_raw(xv: np.ndarray, wv: np.ndarray, stride: int, padding: str, want_cols: bool = False):
    """Forward cross-correlation without bias; returns (y, padded x, pads[, cols]).

    ``want_cols`` additionally returns the im2col matrix so a training
    backward pass can reuse it instead of gathering again.
    """
    kh, kw, kd = wv.shape[2:]
    pads = [_pad_amounts(e, k, stride, padding) for e, k in zip(xv.shape[2:], (kh, kw, kd))]
    xpad = _zero_pad(xv, pads)
    cols, out_extents = _gather_cols(xpad, (kh, kw, kd), stride)
    y = cols @ _weights_2d(wv).T
    y = y.reshape((xv.shape[0],) + out_extents + (wv.shape[0],))
    y = np.ascontiguousarray(np.moveaxis(y, -1, 1))
    if want_cols:
        return y, xpad, pads, cols
    return y, xpad, pads


def conv3d_grad_w(gy: np.ndarray, xpad, kshape, stride: int, cols: np.ndarray = None):
    kh, kw, kd = kshape
    if cols is None:
        cols, _ = _gather_cols(xpad, kshape, stride)
    c_in = cols.shape[1] // (kh * kw * kd)
    c_out = gy.shape[1]
    gy2 = gy.transpose(0, 2, 3, 4, 1).reshape(-1, c_out)
    gw2 = gy2.T @ cols  # [c_out, k^3 * c_in]
    return gw2.reshape(c_out, kh, kw, kd, c_in).transpose(0, 4, 1, 2, 3)


def conv3d_grad_x(gy: np.ndarray, wv: np.ndarray, xpad_shape, pads, stride: int, x_shape):
    kh, kw, kd = wv.shape[2:]
    n, c_out, ho, wo, do = gy.shape
    if stride == 1:
        # full correlation of gy with the flipped, channel-transposed kernel
        gyp = _zero_pad(gy, [(kh - 1, kh - 1), (kw - 1, kw - 1), (kd - 1, kd - 1)])
        wflip = np.ascontiguousarray(wv[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        gxp = conv3d_raw(gyp, wflip, 1, "valid")[0]
    else:
        gy2 = gy.transpose(0, 2, 3, 4, 1).reshape(-1, c_out)
        gcols = (gy2 @ _weights_2d(wv)).reshape(n, ho, wo, do, kh, kw, kd, wv.shape[1])
        gxp = np.zeros(xpad_shape, dtype=gy.dtype)
        gxl = gxp.transpose(0, 2, 3, 4, 1)  # channels-last view of the same buffer
        for i in range(kh):
            for j in range(kw):
                for l in range(kd):
                    gxl[
                        :,
                        i : i + stride * ho : stride,
                        j : j + stride * wo : stride,
                        l : l + stride * do : stride,
                    ] += gcols[:, :, :, :, i, j, l]
    sl = tuple(slice(lo, lo + e) for (lo, _), e in zip(pads, x_shape[2:]))
    return gxp[(slice(None), slice(None)) + sl]


def conv3d(x, p: Conv3DParams):
    """Strided 3D cross-correlation over the three spatial axes plus bias."""
    xv, wv, bv = value_of(x), value_of(p.weights), value_of(p.bias)
    if xv.ndim != 5:
        raise ShapeError(f"conv3d input must be rank 5, got {xv.ndim}")
    if xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"channel mismatch: input {xv.shape[1]}, weights expect {wv.shape[1]}")
    taped = isinstance(x, DiffValue) or isinstance(p.weights, DiffValue)
    y, xpad, pads, cols = conv3d_raw(xv, wv, p.spatial_stride, p.padding, want_cols=True)
    if not taped:
        cols = None  # free the gather right away in inference
    out = y + bv.reshape(1, -1, 1, 1, 1)
    s, xshape, xpshape = p.spatial_stride, xv.shape, xpad.shape
    return record_op(
        out,
        [
            (x, lambda g: conv3d_grad_x(g, wv, xpshape, pads, s, xshape)),
            (p.weights, lambda g: conv3d_grad_w(g, xpad, wv.shape[2:], s, cols)),
            (p.bias, lambda g: g.sum(axis=(0, 2, 3, 4))),
        ],
    )


def maxpool3d(x, window, stride):
    """Per-window maximum with exact backward routing.

    Returns ``(pooled, arg)`` where ``arg`` holds, per output cell, the
    flat spatial index of the winning input voxel (ties go to the lowest
    flat index, so the backward pass is deterministic).
    """
    xv = value_of(x)
    wh, ww, wd = window
    sh, sw, sd = stride
    n, c, H, W, D = xv.shape
    if wh > H or ww > W or wd > D:
        raise ShapeError(f"pool window {window} exceeds extents {(H, W, D)}")
    view = sliding_window_view(xv, (wh, ww, wd), axis=(2, 3, 4))[:, :, ::sh, ::sw, ::sd]
    Ho, Wo, Do = view.shape[2:5]
    flat = view.reshape(n, c, Ho, Wo, Do, wh * ww * wd)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    li, lj, ll = arg // (ww * wd), (arg // wd) % ww, arg % wd
    base_h = (np.arange(Ho) * sh)[:, None, None]
    base_w = (np.arange(Wo) * sw)[None, :, None]
    base_d = (np.arange(Do) * sd)[None, None, :]
    flat_idx = ((base_h + li) * W + (base_w + lj)) * D + (base_d + ll)

    def vjp(g):
        gx = np.zeros((n, c, H * W * D), dtype=g.dtype)
        np.add.at(
            gx,
            (np.arange(n)[:, None, None, None, None], np.arange(c)[None, :, None, None, None], flat_idx),
            g,
        )
        return gx.reshape(n, c, H, W, D)

    return record_op(out, [(x, vjp)]), flat_idx


def _interp_matrix(n_in: int, n_out: int, dtype):
    """Corner-aligned 1D linear interpolation matrix [n_out, n_in]."""
    if n_out == 1:
        src = np.array([(n_in - 1) / 2.0])
    elif n_in == 1:
        src = np.zeros(n_out)
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = (src - i0).astype(dtype)
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1 - w)
    np.add.at(m, (rows, i1), w)
    return m


def _axis_matmul(x, m, axis):
    return np.moveaxis(np.tensordot(m, x, axes=([1], [axis])), 0, axis)


def trilinear_upsample(x, target):
    """Corner-aligned trilinear resize of the three spatial axes.

    Aligned corners reproduce input values exactly; resizing to the input
    extents is the identity.  Single-voxel targets sample the center.
    """
    xv = value_of(x)
    target = tuple(int(e) for e in target)
    if any(e < 1 for e in target):
        raise ShapeError(f"target extents must be >= 1, got {target}")
    mats = [_interp_matrix(e_in, e_out, xv.dtype) for e_in, e_out in zip(xv.shape[2:], target)]
    y = xv
    for axis, m in enumerate(mats, start=2):
        y = _axis_matmul(y, m, axis)

    def vjp(g):
        for axis, m in enumerate(mats, start=2):
            g = _axis_matmul(g, m.T, axis)
        return g

    return record_op(y, [(x, vjp)])


def dense(x, w, b):
    """Affine map ``y = x @ w.T + b`` for ``x [n, f_in]``, ``w [f_out, f_in]``."""
    xv, wv, bv = value_of(x), value_of(w), value_of(b)
    if xv.ndim != 2 or xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"dense needs [n, {wv.shape[1]}] input, got {xv.shape}")
    out = xv @ wv.T + bv
    return record_op(
        out,
        [
            (x, lambda g: g @ wv),
            (w, lambda g: g.T @ xv),
            (b, lambda g: g.sum(axis=0)),
        ],
    )


def _sigmoid_values(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    # keep the output strictly inside (0, 1) even when exp saturates
    info = np.finfo(v.dtype)
    return np.clip(out, info.tiny, 1.0 - info.epsneg)


def activate(kind: str, x):
    """Pointwise nonlinearity: ``relu`` or ``sigmoid`` (strictly in (0, 1))."""
    xv = value_of(x)
    if kind == "relu":
        mask = xv > 0
        return record_op(np.where(mask, xv, 0), [(x, lambda g: g * mask)])
    if kind == "sigmoid":
        s = _sigmoid_values(xv)
        return record_op(s, [(x, lambda g: g * s * (1 - s))])
    raise ContractError(f"unknown activation {kind!r}")


def norm(x, p: NormParams, mode: str):
    """Per-channel batch normalization (channel axis 1).

    Train mode normalizes with batch statistics over every non-channel
    axis and folds them into the running statistics in place; infer mode
    uses the stored running statistics.
    """
    xv = value_of(x)
    gv, bv = value_of(p.gamma), value_of(p.beta)
    c = xv.shape[1]
    if gv.shape != (c,):
        raise ShapeError(f"norm expects {gv.shape[0]} channels, input has {c}")
    axes = (0,) + tuple(range(2, xv.ndim))
    cshape = (1, c) + (1,) * (xv.ndim - 2)
    gamma_b, beta_b = gv.reshape(cshape), bv.reshape(cshape)

    if mode == "infer":
        inv_std = 1.0 / np.sqrt(p.running_var + p.epsilon)
        xhat = (xv - p.running_mean.reshape(cshape)) * inv_std.reshape(cshape)
        out = gamma_b * xhat + beta_b
        scale = (gv * inv_std).reshape(cshape)
        return record_op(
            out,
            [
                (x, lambda g: g * scale),
                (p.gamma, lambda g: (g * xhat).sum(axis=axes)),
                (p.beta, lambda g: g.sum(axis=axes)),
            ],
        )

    if mode != "train":
        raise ContractError(f"unknown norm mode {mode!r}")
    m = xv.size // c
    if m == 1:
        raise DegenerateBatchError("batch statistics need more than one element per channel")
    mu = xv.mean(axis=axes, keepdims=True)
    var = xv.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + p.epsilon)
    xhat = (xv - mu) * inv_std
    out = gamma_b * xhat + beta_b
    p.running_mean *= 1.0 - p.momentum
    p.running_mean += p.momentum * mu.reshape(c)
    p.running_var *= 1.0 - p.momentum
    p.running_var += p.momentum * var.reshape(c)

    def vjp_x(g):
        dxhat = g * gamma_b
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        return inv_std / m * (m * dxhat - s1 - xhat * s2)

    return record_op(
        out,
        [
            (x, vjp_x),
            (p.gamma, lambda g: (g * xhat).sum(axis=axes)),
            (p.beta, lambda g: g.sum(axis=axes)),
        ],
    )


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis (plain arrays only)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer class labels."""
    lv = value_of(logits)
    labels = np.asarray(labels, dtype=np.intp)
    n, num_classes = lv.shape
    if labels.shape != (n,):
        raise ShapeError(f"need {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise LabelError(f"labels must lie in [0, {num_classes})")
    z = lv - lv.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    loss = np.asarray((logsumexp - z[np.arange(n), labels]).mean(), dtype=lv.dtype)

    def vjp(g):
        grad = softmax_probs(lv)
        grad[np.arange(n), labels] -= 1.0
        return grad * (float(g) / n)

    return record_op(loss, [(logits, vjp)])


def mse(pred, target):
    """Mean squared difference of two equal-shape tensors."""
    pv, tv = value_of(pred), value_of(target)
    if pv.shape != tv.shape:
        raise ShapeError(f"mse shapes differ: {pv.shape} vs {tv.shape}")
    diff = pv - tv
    loss = np.asarray((diff * diff).mean(), dtype=pv.dtype)
    count = pv.size
    return record_op(
        loss,
        [
            (pred, lambda g: diff * (2.0 * float(g) / count)),
            (target, lambda g: diff * (-2.0 * float(g) / count)),
        ],
    )
