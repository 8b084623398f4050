"""The 4D convolution: temporal loop of 3D convolutions, and its oracle.

A 4D input [n, c, l, H, W, D] is convolved by looping a 3D convolution
over temporal taps: output frame j accumulates Conv3D(tap i, frame
j*s_t + i).  The brute-force oracle computes the same sums directly per
output cell, with no decomposition, and agrees to near machine precision.
"""

import time

import numpy as np

from spatiodec import Conv4DConfig, Conv4DKernel, conv4d, conv4d_oracle, temporal_flatten

rng = np.random.default_rng(0)

x = rng.standard_normal((1, 2, 15, 8, 8, 8))
kernel = Conv4DKernel(
    weights=rng.standard_normal((4, 2, 5, 3, 3, 3)) * 0.1,
    bias=rng.standard_normal(4) * 0.1,
)
cfg = Conv4DConfig(s_t=2, s_s=2)

conv4d(x, kernel, cfg)  # warm up the jitted gather before timing
t0 = time.time()
fast = conv4d(x, kernel, cfg)
t_fast = time.time() - t0
t0 = time.time()
slow = conv4d_oracle(x, kernel, cfg)
t_slow = time.time() - t0

print(f"input {x.shape} -> output {fast.shape}")
print(f"T_out = floor((15 - 5) / 2) + 1 = {fast.shape[2]}")
print(f"max |conv4d - oracle| = {np.abs(fast - slow).max():.2e}")
print(f"decomposed: {t_fast * 1e3:.1f} ms, direct oracle: {t_slow * 1e3:.1f} ms")

# The temporal axis then folds into channels so later stages are pure 3D.
flat = temporal_flatten(fast)
print(f"\nafter temporal flatten: {flat.shape} (channel {kernel.weights.shape[0]} x T_out {fast.shape[2]})")
print(
    "channel block [0:T_out) equals channel 0's time series:",
    np.array_equal(flat[:, : fast.shape[2]], fast[:, 0]),
)

# Degenerate case: a single temporal tap is just a frame-wise 3D convolution.
k1 = Conv4DKernel(kernel.weights[:, :, 2:3].copy(), kernel.bias)
per_frame = conv4d(x, k1, Conv4DConfig(s_t=1, s_s=2))
print(f"\nk_t=1 output has one frame per input frame: {per_frame.shape[2]} == {x.shape[2]}")
