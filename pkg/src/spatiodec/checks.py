"""Finite-difference verification suite for every differentiable op.

Each case runs :func:`spatiodec.tensor.grad_check` (double precision,
central differences) on at least three random configurations and reports
the worst relative error.  The CLI ``gradcheck`` subcommand and the
acceptance tests both run this table; everything must come in at or below
1e-4.
"""

from __future__ import annotations

import numpy as np

from .attention import attention_module, init_attention_module, init_res_unit, res_unit
from ._conv4d import Conv4DConfig, Conv4DKernel, conv4d
from .model import map_learnable
from .ops import (
    Conv3DParams,
    NormParams,
    activate,
    conv3d,
    dense,
    maxpool3d,
    mse,
    norm,
    softmax_ce,
    trilinear_upsample,
)
from .tensor import ew, grad_check, reduce

GRADCHECK_TOLERANCE = 1e-4


def _sum_all(x):
    return reduce(x, list(range(len(x.shape if hasattr(x, "shape") else np.shape(x)))), "sum")


def _mean_all(x):
    nd = len(x.shape)
    return reduce(x, list(range(nd)), "mean")


def _flatten(tree):
    out = []
    map_learnable(tree, lambda a: (out.append(a), a)[1])
    return out


def _inject(tree, values):
    it = iter(values)
    return map_learnable(tree, lambda _: next(it))


def _robust_check(f, inputs) -> float:
    """grad_check at two step sizes, keeping the smaller worst error.

    The small step controls truncation on curved coordinates; the large
    step controls roundoff noise on coordinates whose true gradient is
    exactly zero (conv biases that feed a norm).  A genuine gradient
    defect shows up at every step size, so the minimum never hides one.
    """
    return min(grad_check(f, inputs, eps=1e-5), grad_check(f, inputs, eps=1e-4))


def _param_case(template, fn, x):
    """grad_check over an input tensor plus every learnable parameter."""
    arrays = [a.astype(np.float64) for a in _flatten(template)]

    def f(xv, *ps):
        return fn(xv, _inject(template, list(ps)))

    return _robust_check(f, [x] + arrays)


def check_ew(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for shape in [(3,), (2, 4), (2, 3, 2)]:
        a, b = rng.standard_normal(shape), rng.standard_normal(shape)
        worst = max(worst, grad_check(lambda x, y: _sum_all(ew("mul", x, ew("add", y, 0.5))), [a, b]))
        worst = max(worst, grad_check(lambda x, y: _sum_all(ew("sub", ew("scale", x, 1.7), y)), [a, b]))
    return worst


def check_reduce(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for shape, axes in [((4, 3), [1]), ((2, 3, 4), [0, 2]), ((5,), [0])]:
        x = rng.standard_normal(shape)

        def f_mean(t):
            r = reduce(t, axes, "mean")
            return _sum_all(ew("mul", r, r))

        worst = max(worst, grad_check(f_mean, [x]))
        worst = max(worst, _robust_check(lambda t: _sum_all(reduce(t, axes, "max")), [x]))
    return worst


def check_conv3d(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases = [
        ((2, 2, 5, 5, 5), 2, 3, 1, "same_zero"),
        ((1, 3, 6, 5, 4), 3, 2, 2, "same_zero"),
        ((2, 1, 6, 6, 6), 1, 2, 1, "valid"),
    ]
    for shape, c_in, c_out, stride, padding in cases:
        x = rng.standard_normal(shape)
        w = rng.standard_normal((c_out, c_in, 3, 3, 3)) * 0.5
        b = rng.standard_normal(c_out)

        def f(xv, wv, bv):
            return _mean_all(conv3d(xv, Conv3DParams(wv, bv, stride, padding)))

        worst = max(worst, grad_check(f, [x, w, b]))
    return worst


def check_conv4d(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases = [
        ((1, 2, 6, 5, 5, 4), 2, 3, 2, 2),
        ((2, 1, 5, 4, 4, 4), 2, 1, 1, 1),
        ((1, 1, 7, 5, 4, 5), 3, 5, 2, 2),
    ]
    for shape, c_out, k_t, s_t, s_s in cases:
        x = rng.standard_normal(shape)
        w = rng.standard_normal((c_out, shape[1], k_t, 3, 3, 3)) * 0.3
        b = rng.standard_normal(c_out)

        def f(xv, wv, bv):
            return _mean_all(conv4d(xv, Conv4DKernel(wv, bv), Conv4DConfig(s_t, s_s)))

        worst = max(worst, grad_check(f, [x, w, b]))
    return worst


def check_maxpool3d(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for shape in [(1, 2, 4, 4, 4), (2, 1, 5, 6, 4), (1, 3, 6, 6, 6)]:
        x = rng.standard_normal(shape)
        worst = max(worst, _robust_check(lambda t: _sum_all(maxpool3d(t, (2, 2, 2), (2, 2, 2))[0]), [x]))
    return worst


def check_trilinear(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for shape, target in [((1, 2, 3, 3, 3), (5, 5, 5)), ((2, 1, 4, 3, 5), (4, 3, 5)), ((1, 1, 2, 2, 2), (3, 4, 2))]:
        x = rng.standard_normal(shape)
        worst = max(worst, grad_check(lambda t: _mean_all(trilinear_upsample(t, target)), [x]))
    return worst


def check_dense(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n, f_in, f_out in [(2, 3, 4), (4, 5, 2), (3, 2, 2)]:
        x = rng.standard_normal((n, f_in))
        w = rng.standard_normal((f_out, f_in))
        b = rng.standard_normal(f_out)
        worst = max(worst, grad_check(lambda xv, wv, bv: _sum_all(dense(xv, wv, bv)), [x, w, b]))
    return worst


def check_relu(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for shape in [(6,), (3, 4), (2, 2, 3)]:
        x = rng.standard_normal(shape)
        worst = max(worst, _robust_check(lambda t: _sum_all(activate("relu", t)), [x]))
    return worst


def check_sigmoid(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for shape in [(6,), (3, 4), (2, 2, 3)]:
        x = rng.standard_normal(shape)
        worst = max(worst, grad_check(lambda t: _sum_all(activate("sigmoid", t)), [x]))
    return worst


def _norm_case(rng, shape, mode):
    c = shape[1]
    x = rng.standard_normal(shape)
    gamma = rng.standard_normal(c) * 0.5 + 1.0
    beta = rng.standard_normal(c) * 0.2

    def f(xv, gv, bv):
        p = NormParams(gv, bv, np.zeros(c), np.ones(c))
        return _mean_all(ew("mul", norm(xv, p, mode), ew("add", xv, 3.0)))

    return grad_check(f, [x, gamma, beta])


def check_norm(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for shape in [(2, 2, 3, 3, 3), (4, 3, 2, 2, 2), (6, 2)]:
        worst = max(worst, _norm_case(rng, shape, "train"))
    worst = max(worst, _norm_case(rng, (2, 3, 2, 2, 2), "infer"))
    return worst


def check_softmax_ce(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n, num_classes in [(3, 4), (5, 2), (2, 7)]:
        logits = rng.standard_normal((n, num_classes))
        labels = rng.integers(0, num_classes, n)
        worst = max(worst, grad_check(lambda z: softmax_ce(z, labels), [logits]))
    return worst


def check_mse(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for shape in [(3, 1), (5, 1), (2, 2)]:
        p, t = rng.standard_normal(shape), rng.standard_normal(shape)
        worst = max(worst, grad_check(lambda a, b: mse(a, b), [p, t]))
    return worst


def check_res_unit(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases = [(2, 3, 1, (2, 2, 4, 4, 4)), (2, 2, 2, (2, 2, 4, 5, 4)), (3, 3, 1, (2, 3, 3, 4, 3))]
    for c_in, c_out, stride, shape in cases:
        params = init_res_unit(rng, c_in, c_out, stride, precision="double")
        x = rng.standard_normal(shape)
        worst = max(worst, _param_case(params, lambda xv, p: _mean_all(res_unit(xv, p, "train")), x))
    return worst


def check_attention_module(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    cases = [
        (2, 2, 1, 1, (2, 2, 4, 4, 4)),
        (2, 3, 2, 1, (1, 2, 4, 5, 6)),
        (2, 2, 1, 2, (2, 2, 5, 5, 6)),
    ]
    for c_in, c_out, stride, depth, shape in cases:
        params = init_attention_module(rng, 1, c_in, c_out, stride, depth, precision="double")
        x = rng.standard_normal(shape)
        worst = max(
            worst, _param_case(params, lambda xv, p: _mean_all(attention_module(xv, p, "train")), x)
        )
    return worst


GRADCHECK_CASES = {
    "ew": check_ew,
    "reduce": check_reduce,
    "conv3d": check_conv3d,
    "conv4d": check_conv4d,
    "maxpool3d": check_maxpool3d,
    "trilinear_upsample": check_trilinear,
    "dense": check_dense,
    "relu": check_relu,
    "sigmoid": check_sigmoid,
    "norm": check_norm,
    "softmax_ce": check_softmax_ce,
    "mse": check_mse,
    "res_unit": check_res_unit,
    "attention_module": check_attention_module,
}


def run_gradcheck(op: str | None = None, seed: int = 0) -> dict:
    """Run the suite (or one op); returns {op: worst relative error}."""
    names = [op] if op else list(GRADCHECK_CASES)
    results = {}
    for name in names:
        results[name] = float(GRADCHECK_CASES[name](seed))
    return results
