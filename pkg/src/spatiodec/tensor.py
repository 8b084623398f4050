"""Dense tensors and a reverse-mode gradient tape.

Tensors are plain ``numpy.ndarray`` values in C (row-major) order, so the
flat index of coordinate ``(i0 .. i_{n-1})`` is ``sum(i_k * stride_k)`` with
``stride_{n-1} == 1``.  Two precisions are supported: ``"single"``
(float32, the training default) and ``"double"`` (float64, used by the
gradient checker).

Differentiation uses a per-forward-pass :class:`Tape`.  Arrays are enrolled
with :meth:`Tape.watch`, which wraps them in a :class:`DiffValue` carrying a
zero-initialized gradient slot.  Every operation in this package accepts
either raw arrays (no recording) or ``DiffValue`` inputs, in which case the
result is recorded on the tape together with a vector-Jacobian closure.
:func:`backward` replays the tape in reverse, accumulating gradients
additively across fan-out, and then frees the tape.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence, Union

import numpy as np

from .errors import AxisError, ContractError, ShapeError

DTYPES = {"single": np.float32, "double": np.float64}

Fill = Union[int, float, np.random.Generator, Callable[[tuple], np.ndarray]]

_tape_ids = itertools.count(1)


class DiffValue:
    """An array enrolled on a tape, with a same-shape gradient slot."""

    __slots__ = ("value", "grad", "tape")

    def __init__(self, value: np.ndarray, tape: "Tape"):
        self.value = value
        self.grad = np.zeros_like(value)
        self.tape = tape

    @property
    def tape_id(self) -> int:
        return self.tape.id

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        return f"DiffValue(shape={self.value.shape}, tape={self.tape.id})"


class _Node:
    """One recorded operation: output plus per-input gradient closures."""

    __slots__ = ("out", "parts")

    def __init__(self, out: DiffValue, parts):
        self.out = out
        self.parts = parts  # list of (DiffValue, grad_out -> grad_in)


class Tape:
    """Ordered record of executed operations for one forward pass.

    Nodes are appended in execution order, so every node's inputs precede
    it and a reverse sweep implements the chain rule.  The tape is freed
    after :meth:`backward`; build a fresh tape per training step.
    """

    def __init__(self):
        self.id = next(_tape_ids)
        self.nodes: list[_Node] = []

    def watch(self, array: np.ndarray) -> DiffValue:
        return DiffValue(np.asarray(array), self)

    def record(self, out_value: np.ndarray, parts) -> DiffValue:
        out = DiffValue(out_value, self)
        self.nodes.append(_Node(out, parts))
        return out

    def backward(self, loss: DiffValue) -> None:
        if not isinstance(loss, DiffValue) or loss.tape is not self:
            raise ContractError("loss is not recorded on this tape")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
        if not self.nodes:
            raise ContractError("tape is empty")
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            g = node.out.grad
            if not g.any():
                continue
            for dv, vjp in node.parts:
                dv.grad += vjp(g)
        self.nodes.clear()


def backward(loss: DiffValue) -> None:
    """Run the reverse sweep from a scalar loss; frees the tape afterwards."""
    if not isinstance(loss, DiffValue):
        raise ContractError("backward needs a tape-recorded scalar loss")
    loss.tape.backward(loss)


def value_of(x) -> np.ndarray:
    """The raw array behind ``x``, whether or not it is tape-recorded."""
    return x.value if isinstance(x, DiffValue) else np.asarray(x)


def record_op(out_value: np.ndarray, parts) -> Union[np.ndarray, DiffValue]:
    """Record an op result on the (unique) tape of its DiffValue inputs.

    ``parts`` holds ``(input, vjp)`` pairs for the differentiable inputs;
    entries whose input is a plain array must be filtered out by the caller.
    With no recorded inputs the raw value is returned unchanged.
    """
    parts = [(dv, vjp) for dv, vjp in parts if isinstance(dv, DiffValue)]
    if not parts:
        return out_value
    tape = parts[0][0].tape
    for dv, _ in parts[1:]:
        if dv.tape is not tape:
            raise ContractError("operation mixes DiffValues from different tapes")
    return tape.record(out_value, parts)


def tensor_new(shape: Sequence[int], fill: Fill = 0.0, precision: str = "single") -> np.ndarray:
    """Allocate a tensor of the given extents.

    ``fill`` is a scalar constant, a seeded ``numpy.random.Generator``
    (standard-normal draws, bitwise reproducible for a fixed seed), or a
    callable mapping the shape to an array.
    """
    shape = tuple(int(e) for e in shape)
    if any(e < 1 for e in shape):
        raise ShapeError(f"extents must be >= 1, got {shape}")
    dtype = DTYPES[precision]
    if isinstance(fill, np.random.Generator):
        return fill.standard_normal(shape).astype(dtype)
    if callable(fill):
        out = np.asarray(fill(shape), dtype=dtype)
        if out.shape != shape:
            raise ShapeError(f"fill produced shape {out.shape}, expected {shape}")
        return out
    return np.full(shape, float(fill), dtype=dtype)


def reshape(t, new_shape: Sequence[int]):
    """Reinterpret ``t`` with new extents; row-major data order is preserved."""
    tv = value_of(t)
    new_shape = tuple(int(e) for e in new_shape)
    if int(np.prod(new_shape)) != tv.size:
        raise ShapeError(f"cannot reshape {tv.shape} ({tv.size} elements) to {new_shape}")
    old_shape = tv.shape
    out = tv.reshape(new_shape)
    return record_op(out, [(t, lambda g: g.reshape(old_shape))])


def ew(kind: str, a, b):
    """Elementwise arithmetic: add, sub, mul, or scale (scalar multiply).

    ``b`` may be a tensor of the same shape or a plain scalar; ``scale``
    requires a scalar.  Shapes are never broadcast.
    """
    av = value_of(a)
    b_scalar = np.isscalar(b) or (isinstance(b, np.ndarray) and b.ndim == 0)
    if kind == "scale":
        if not b_scalar:
            raise ShapeError("scale takes a scalar factor")
        s = float(b)
        return record_op(av * s, [(a, lambda g: g * s)])
    bv = float(b) if b_scalar else value_of(b)
    if not b_scalar and bv.shape != av.shape:
        raise ShapeError(f"elementwise {kind}: shapes {av.shape} and {bv.shape} differ")
    if kind == "add":
        out = av + bv
        parts = [(a, lambda g: g)] + ([] if b_scalar else [(b, lambda g: g)])
    elif kind == "sub":
        out = av - bv
        parts = [(a, lambda g: g)] + ([] if b_scalar else [(b, lambda g: -g)])
    elif kind == "mul":
        out = av * bv
        parts = [(a, lambda g: g * bv)] + ([] if b_scalar else [(b, lambda g: g * av)])
    else:
        raise ContractError(f"unknown elementwise kind {kind!r}")
    return record_op(out, parts)


def _check_axes(axes: Sequence[int], ndim: int) -> tuple:
    axes = tuple(int(ax) for ax in axes)
    norm = tuple(ax + ndim if ax < 0 else ax for ax in axes)
    if len(set(norm)) != len(norm) or any(ax < 0 or ax >= ndim for ax in norm):
        raise AxisError(f"invalid axes {axes} for rank {ndim}")
    return norm


def reduce(t, axes: Sequence[int], kind: str):
    """Reduce over ``axes`` (removed from the output) with sum, mean, or max.

    Max ties route the gradient to the first maximum in row-major order.
    """
    tv = value_of(t)
    axes = _check_axes(axes, tv.ndim)
    if kind not in ("sum", "mean", "max"):
        raise ContractError(f"unknown reduction {kind!r}")
    kept = tuple(ax for ax in range(tv.ndim) if ax not in axes)
    count = int(np.prod([tv.shape[ax] for ax in axes])) if axes else 1

    def expand(g):
        out = np.expand_dims(g, axes) if axes else g
        return np.broadcast_to(out, tv.shape)

    if kind == "sum":
        out = tv.sum(axis=axes)
        return record_op(out, [(t, lambda g: expand(g).copy())])
    if kind == "mean":
        out = tv.mean(axis=axes)
        return record_op(out, [(t, lambda g: expand(g) / count)])

    # max: flatten the reduced axes to the trailing position for arg tracking
    moved = np.transpose(tv, kept + axes)
    flat = moved.reshape(moved.shape[: len(kept)] + (count,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def vjp_max(g):
        gin = np.zeros_like(flat)
        np.put_along_axis(gin, arg[..., None], g[..., None], axis=-1)
        gin = gin.reshape(moved.shape)
        return np.transpose(gin, np.argsort(kept + axes))

    return record_op(out, [(t, vjp_max)])


def grad_check(f, inputs: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` must map its inputs to a scalar and accept plain arrays as well
    as DiffValues (every op in this package does).  Inputs are promoted to
    double precision.  The relative error denominator is guarded at 1e-8.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    xs = [np.asarray(x, dtype=np.float64).copy() for x in inputs]

    tape = Tape()
    dvs = [tape.watch(x) for x in xs]
    out = f(*dvs)
    if not isinstance(out, DiffValue):
        raise ContractError("f did not propagate DiffValues")
    if out.value.size != 1:
        raise ContractError(f"f must return a scalar, got shape {out.value.shape}")
    tape.backward(out)
    analytic = [dv.grad.copy() for dv in dvs]

    worst = 0.0
    for k, x in enumerate(xs):
        for i in range(x.size):
            orig = x.flat[i]
            x.flat[i] = orig + eps
            fp = float(value_of(f(*xs)))
            x.flat[i] = orig - eps
            fm = float(value_of(f(*xs)))
            x.flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = float(analytic[k].flat[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
