"""Residual units and the 3D mixed attention module.

Each attention stage splits into a main branch ``M(x)`` (a chain of
pre-activation residual units) and a U-shaped attention branch producing a
sigmoid-bounded mask ``A(x)``.  The branch encoder stacks ``p`` rounds of
2x2x2 max pooling plus a residual unit; the decoder mirrors them with
trilinear upsampling, adding a shortcut from each symmetric encoder level,
and its final round resizes to the main-branch output extents so the two
branches meet at the 1x1x1 gate convolution.  The stage output is the
attention residual combination ``M(x) * (1 + A(x))``, which degrades to the
plain main branch as the mask goes to zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, DepthError
from .ops import Conv3DParams, NormParams, activate, conv3d, init_conv3d, init_norm, maxpool3d, norm, trilinear_upsample
from .tensor import ew, value_of


@dataclass
class ResUnitParams:
    """Pre-activation residual unit: norm-relu-conv, twice, plus a skip.

    The first convolution applies ``entry_stride`` and any channel change;
    a 1x1x1 projection carries the skip exactly when channels or stride
    differ from identity.
    """

    conv_a: Conv3DParams
    conv_b: Conv3DParams
    norm_a: NormParams
    norm_b: NormParams
    proj: Optional[Conv3DParams] = None
    entry_stride: int = 1

    def __post_init__(self):
        c_out, c_in = value_of(self.conv_a.weights).shape[:2]
        needs_proj = c_in != c_out or self.entry_stride != 1
        if needs_proj != (self.proj is not None):
            raise ConfigError(
                f"projection must be present iff channels ({c_in}->{c_out}) or "
                f"stride ({self.entry_stride}) break the identity skip"
            )


@dataclass
class AttentionRecord:
    """One captured mask: the gated ``A`` in (0, 1) and its logit."""

    stage_index: int
    A: np.ndarray
    pre_gate: np.ndarray


@dataclass
class AttentionModuleParams:
    stage_index: int
    main: list[ResUnitParams]
    att_down: Optional[list[ResUnitParams]] = None
    att_up: Optional[list[ResUnitParams]] = None
    shortcuts: Optional[list[ResUnitParams]] = None
    gate: Optional[Conv3DParams] = None

    @property
    def depth(self) -> int:
        return len(self.att_down) if self.att_down else 0

    @property
    def has_attention(self) -> bool:
        return self.gate is not None

    def __post_init__(self):
        if not self.has_attention:
            return
        if self.att_down is None or self.att_up is None or len(self.att_down) != len(self.att_up):
            raise ConfigError("attention branch needs equally deep down and up paths")
        n_short = len(self.shortcuts) if self.shortcuts else 0
        if n_short != self.depth - 1:
            raise ConfigError(f"depth {self.depth} needs {self.depth - 1} shortcuts, got {n_short}")
        gate_out, gate_in = value_of(self.gate.weights).shape[:2]
        main_out = value_of(self.main[-1].conv_b.weights).shape[0]
        if gate_out != main_out or gate_in != main_out:
            raise ConfigError(f"gate must map {main_out}->{main_out} channels")


def init_res_unit(rng, c_in, c_out, stride=1, precision="single"):
    proj = None
    if c_in != c_out or stride != 1:
        proj = init_conv3d(rng, c_in, c_out, 1, stride=stride, precision=precision)
    return ResUnitParams(
        conv_a=init_conv3d(rng, c_in, c_out, 3, stride=stride, precision=precision),
        conv_b=init_conv3d(rng, c_out, c_out, 3, stride=1, precision=precision),
        norm_a=init_norm(c_in, precision=precision),
        norm_b=init_norm(c_out, precision=precision),
        proj=proj,
        entry_stride=stride,
    )


def init_attention_module(
    rng, stage_index, c_in, c_out, stride=1, depth=1, num_main=2, with_branch=True, precision="single"
):
    main = [init_res_unit(rng, c_in, c_out, stride, precision)]
    main += [init_res_unit(rng, c_out, c_out, 1, precision) for _ in range(num_main - 1)]
    if not with_branch:
        return AttentionModuleParams(stage_index, main)
    att_down = [init_res_unit(rng, c_in, c_out, 1, precision)]
    att_down += [init_res_unit(rng, c_out, c_out, 1, precision) for _ in range(depth - 1)]
    att_up = [init_res_unit(rng, c_out, c_out, 1, precision) for _ in range(depth)]
    shortcuts = [init_res_unit(rng, c_out, c_out, 1, precision) for _ in range(depth - 1)]
    gate = init_conv3d(rng, c_out, c_out, 1, stride=1, precision=precision)
    return AttentionModuleParams(stage_index, main, att_down, att_up, shortcuts, gate)


def res_unit(x, p: ResUnitParams, mode: str):
    h = norm(x, p.norm_a, mode)
    h = activate("relu", h)
    h = conv3d(h, p.conv_a)
    h = norm(h, p.norm_b, mode)
    h = activate("relu", h)
    h = conv3d(h, p.conv_b)
    identity = conv3d(x, p.proj) if p.proj is not None else x
    return ew("add", h, identity)


def _ceil_div(e: int, s: int) -> int:
    return -(-e // s)


def main_output_extents(x_extents, p: AttentionModuleParams):
    extents = tuple(x_extents)
    for ru in p.main:
        extents = tuple(_ceil_div(e, ru.entry_stride) for e in extents)
    return extents


def attention_branch(x, p: AttentionModuleParams, mode: str):
    """U-shaped mask branch; returns ``(A, pre_gate)``.

    ``A`` has the main-branch output extents and channel count and lies
    strictly in (0, 1).
    """
    extents = value_of(x).shape[2:]
    depth = p.depth
    if any(e < 2**depth for e in extents):
        raise DepthError(f"extents {extents} cannot sustain {depth} rounds of 2x pooling")

    enc, enc_extents = [], []
    h = x
    for ru in p.att_down:
        h, _ = maxpool3d(h, (2, 2, 2), (2, 2, 2))
        h = res_unit(h, ru, mode)
        enc.append(h)
        enc_extents.append(value_of(h).shape[2:])

    target_final = main_output_extents(extents, p)
    for r, ru in enumerate(p.att_up):
        last = r == depth - 1
        target = target_final if last else enc_extents[depth - 2 - r]
        h = trilinear_upsample(h, target)
        if not last:
            skip = res_unit(enc[depth - 2 - r], p.shortcuts[r], mode)
            h = ew("add", h, skip)
        h = res_unit(h, ru, mode)

    pre_gate = conv3d(h, p.gate)
    return activate("sigmoid", pre_gate), pre_gate


def attention_module(
    x,
    p: AttentionModuleParams,
    mode: str,
    record_sink: Optional[list] = None,
    attention_hook: Optional[Callable[[tuple], np.ndarray]] = None,
):
    """One stage: ``M(x) * (1 + A(x))``, or plain ``M(x)`` without a branch.

    ``record_sink``, when given, collects an :class:`AttentionRecord` of the
    raw mask arrays; capture never changes the returned tensor.
    ``attention_hook`` is a test surface that replaces ``A`` with a constant
    array of the mask's shape (the hook output is used verbatim, so a zero
    hook makes the module bitwise equal to its main branch).
    """
    m_out = x
    for ru in p.main:
        m_out = res_unit(m_out, ru, mode)
    if not p.has_attention:
        return m_out

    if attention_hook is not None:
        a_val = np.asarray(attention_hook(value_of(m_out).shape), dtype=value_of(m_out).dtype)
        a, pre_gate = a_val, _safe_logit(a_val)
    else:
        a, pre_gate = attention_branch(x, p, mode)

    if record_sink is not None:
        record_sink.append(AttentionRecord(p.stage_index, value_of(a).copy(), value_of(pre_gate).copy()))
    return ew("mul", m_out, ew("add", a, 1.0))


def _safe_logit(a: np.ndarray) -> np.ndarray:
    info = np.finfo(a.dtype)
    clipped = np.clip(a, info.tiny, 1.0 - info.epsneg)
    return np.log(clipped / (1.0 - clipped))
