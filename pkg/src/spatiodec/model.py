"""Full decoder assembly, its variants, and checkpoint serialization.

The main variant chains a 4D convolution front, a temporal flatten into
channels, four attention stages, global average pooling over the spatial
axes, and a dense head.  Two controls exist: ``resnet4d`` drops the
attention branches (stages reduce to their main chains) and
``resnet3d_att`` replaces the 4D front with a 3D convolution that reads
time as input channels.

Checkpoints are a single binary file: magic ``SD4D``, a little-endian u32
format version, a u32 index length, a UTF-8 JSON index (config plus one
entry per named tensor with dtype, shape, and byte offset), then the raw
tensor bytes little-endian in index order.  Loading a checkpoint
reproduces forward outputs bitwise.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .attention import attention_module, init_attention_module
from ._conv4d import Conv4DConfig, Conv4DKernel, conv4d, init_conv4d, temporal_flatten
from .errors import CheckpointError, ConfigError, EvalError, ShapeError
from .ops import Conv3DParams, NormParams, activate, conv3d, dense, init_conv3d, init_norm, norm, softmax_probs
from .tensor import DTYPES, reduce, reshape, value_of

CHECKPOINT_MAGIC = b"SD4D"
CHECKPOINT_VERSION = 1

VARIANTS = ("resnet4d_att", "resnet4d", "resnet3d_att")
_BUFFER_FIELDS = ("running_mean", "running_var")


@dataclass
class ModelConfig:
    variant: str = "resnet4d_att"
    input_extents: tuple = (15, 16, 20, 18)  # (l, H, W, D)
    conv_channels: int = 8
    temporal_kernel: int = 5
    spatial_kernel: int = 3
    temporal_stride: int = 2
    spatial_stride: int = 2
    stage_channels: tuple = (8, 16, 16, 32)
    stage_strides: tuple = (1, 1, 2, 2)
    attention_depths: tuple = (1, 1, 1, 1)
    main_units: int = 2
    num_classes: int = 7
    head: str = "classify"  # classify | regress
    precision: str = "single"
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.head not in ("classify", "regress"):
            raise ConfigError(f"unknown head {self.head!r}")
        for name in ("input_extents", "stage_channels", "stage_strides", "attention_depths"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if len(self.stage_channels) != 4 or len(self.stage_strides) != 4 or len(self.attention_depths) != 4:
            raise ConfigError("stage_channels, stage_strides, attention_depths must have 4 entries")

    @property
    def head_dim(self) -> int:
        return self.num_classes if self.head == "classify" else 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class DenseParams:
    weights: np.ndarray
    bias: np.ndarray


@dataclass
class Model:
    config: ModelConfig
    front: object  # Conv4DKernel or Conv3DParams
    conv_cfg: Conv4DConfig
    stages: list
    final_norm: NormParams  # closes the pre-activation residual chain
    head: DenseParams


def _ceil_div(e: int, s: int) -> int:
    return -(-e // s)


def audit_shapes(cfg: ModelConfig) -> list:
    """Dry-run shape audit: [(layer name, output shape)] without allocating.

    Raises :class:`ConfigError` naming the first stage whose extents are
    incompatible with its stride or attention pooling depth.
    """
    l, h, w, d = cfg.input_extents
    chain = [("input", (1, l, h, w, d))]
    spatial = tuple(_ceil_div(e, cfg.spatial_stride) for e in (h, w, d))
    if cfg.variant == "resnet3d_att":
        channels = cfg.conv_channels
        chain.append(("front_conv3d", (channels,) + spatial))
    else:
        if l < cfg.temporal_kernel:
            raise ConfigError(
                f"front: window length {l} shorter than temporal kernel {cfg.temporal_kernel}"
            )
        t_out = (l - cfg.temporal_kernel) // cfg.temporal_stride + 1
        chain.append(("front_conv4d", (cfg.conv_channels, t_out) + spatial))
        channels = cfg.conv_channels * t_out
        chain.append(("temporal_flatten", (channels,) + spatial))
    for i in range(4):
        depth = cfg.attention_depths[i]
        if cfg.variant.endswith("_att") and any(e < 2**depth for e in spatial):
            raise ConfigError(
                f"stage {i + 1}: extents {spatial} too small for attention pooling depth {depth}"
            )
        spatial = tuple(_ceil_div(e, cfg.stage_strides[i]) for e in spatial)
        channels = cfg.stage_channels[i]
        chain.append((f"stage_{i + 1}", (channels,) + spatial))
    chain.append(("global_pool", (channels,)))
    chain.append(("head", (cfg.head_dim,)))
    return chain


def build(cfg: ModelConfig) -> Model:
    """Construct a model with seed-deterministic initialization."""
    audit_shapes(cfg)
    rng = np.random.default_rng(cfg.seed)
    dtype = DTYPES[cfg.precision]
    l = cfg.input_extents[0]
    with_branch = cfg.variant.endswith("_att")

    if cfg.variant == "resnet3d_att":
        front = init_conv3d(
            rng, l, cfg.conv_channels, cfg.spatial_kernel, stride=cfg.spatial_stride, precision=cfg.precision
        )
        stage_in = cfg.conv_channels
    else:
        front = init_conv4d(rng, 1, cfg.conv_channels, cfg.temporal_kernel, cfg.spatial_kernel, cfg.precision)
        t_out = (l - cfg.temporal_kernel) // cfg.temporal_stride + 1
        stage_in = cfg.conv_channels * t_out

    stages = []
    c_in = stage_in
    for i in range(4):
        stages.append(
            init_attention_module(
                rng,
                stage_index=i + 1,
                c_in=c_in,
                c_out=cfg.stage_channels[i],
                stride=cfg.stage_strides[i],
                depth=cfg.attention_depths[i],
                num_main=cfg.main_units,
                with_branch=with_branch,
                precision=cfg.precision,
            )
        )
        c_in = cfg.stage_channels[i]

    f_in = cfg.stage_channels[-1]
    final_norm = init_norm(f_in, precision=cfg.precision)
    head = DenseParams(
        weights=(rng.standard_normal((cfg.head_dim, f_in)) * np.sqrt(2.0 / f_in)).astype(dtype),
        bias=np.zeros(cfg.head_dim, dtype=dtype),
    )
    return Model(cfg, front, Conv4DConfig(cfg.temporal_stride, cfg.spatial_stride), stages, final_norm, head)


def forward(model: Model, batch, mode: str, record_masks: bool = False, params=None, attention_hook=None):
    """Run the network; returns ``(logits or score, attention records)``.

    ``params`` substitutes a lifted (tape-recorded) view of the parameter
    tree for training; inference passes raw arrays straight through.
    """
    cfg = model.config
    net = params if params is not None else model
    bv = value_of(batch)
    if bv.ndim != 6 or bv.shape[1] != 1 or bv.shape[2:] != cfg.input_extents:
        raise ShapeError(
            f"batch must be [n, 1, {', '.join(map(str, cfg.input_extents))}], got {bv.shape}"
        )
    if cfg.variant == "resnet3d_att":
        h = reshape(batch, (bv.shape[0],) + cfg.input_extents)
        h = conv3d(h, net.front)
    else:
        h = conv4d(batch, net.front, model.conv_cfg)
        h = temporal_flatten(h)
    records: Optional[list] = [] if record_masks else None
    for stage in net.stages:
        h = attention_module(h, stage, mode, record_sink=records, attention_hook=attention_hook)
    h = activate("relu", norm(h, net.final_norm, mode))
    pooled = reduce(h, axes=[2, 3, 4], kind="mean")
    out = dense(pooled, net.head.weights, net.head.bias)
    return out, (records if records is not None else [])


def predict_instance(model: Model, windows):
    """Majority vote over per-window argmax predictions for one instance.

    Ties are broken by the highest summed softmax probability, then by the
    lowest class index.  Returns ``(class index, vote detail)``.
    """
    wv = value_of(windows)
    if wv.shape[0] == 0:
        raise EvalError("predict_instance needs at least one window")
    logits, _ = forward(model, wv, "infer")
    probs = softmax_probs(value_of(logits))
    votes = probs.argmax(axis=1)
    counts = np.bincount(votes, minlength=model.config.num_classes)
    summed = probs.sum(axis=0)
    best = counts.max()
    tied = np.flatnonzero(counts == best)
    winner = int(tied[np.lexsort((tied, -summed[tied]))[0]])
    detail = {"votes": votes.tolist(), "counts": counts.tolist(), "summed_probs": summed.tolist()}
    return winner, detail


# ---------------------------------------------------------------------------
# Parameter tree traversal, lifting, and checkpoint I/O
# ---------------------------------------------------------------------------


def _iter_slots(obj, prefix: str) -> Iterator[tuple]:
    """Yield (name, parent, key, is_buffer) for every array slot, in a
    deterministic order (dataclass field order, list index order)."""
    if isinstance(obj, np.ndarray) or obj is None or isinstance(obj, (int, float, str, tuple)):
        return
    if dataclasses.is_dataclass(obj):
        is_norm = isinstance(obj, NormParams)
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            name = f"{prefix}.{f.name}" if prefix else f.name
            if isinstance(v, np.ndarray):
                yield name, obj, f.name, (is_norm and f.name in _BUFFER_FIELDS)
            else:
                yield from _iter_slots(v, name)
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            name = f"{prefix}.{i}"
            if isinstance(v, np.ndarray):
                yield name, obj, i, False
            else:
                yield from _iter_slots(v, name)


def named_tensors(model: Model) -> Iterator[tuple]:
    """All named arrays (parameters and norm buffers), deterministic order."""
    for name, parent, key, _ in _iter_slots(model, ""):
        v = getattr(parent, key) if isinstance(key, str) else parent[key]
        yield name, v


def named_parameters(model: Model) -> list:
    """Learnable (name, array) pairs: every tensor except norm buffers."""
    out = []
    for name, parent, key, is_buffer in _iter_slots(model, ""):
        if is_buffer:
            continue
        v = getattr(parent, key) if isinstance(key, str) else parent[key]
        out.append((name, v))
    return out


def parameter_count(model: Model) -> int:
    return sum(int(v.size) for _, v in named_parameters(model))


def map_learnable(obj, fn):
    """Rebuild a parameter tree, passing every learnable array through ``fn``.

    Norm running statistics are shared by reference (never mapped), so a
    mapped tree still updates the original buffers in train mode.  Works on
    any dataclass/list tree of this package's parameter types.
    """
    if isinstance(obj, np.ndarray):
        return fn(obj)
    if isinstance(obj, (ModelConfig, Conv4DConfig)) or obj is None:
        return obj
    if isinstance(obj, NormParams):
        return NormParams(
            gamma=fn(obj.gamma),
            beta=fn(obj.beta),
            running_mean=obj.running_mean,
            running_var=obj.running_var,
            momentum=obj.momentum,
            epsilon=obj.epsilon,
        )
    if dataclasses.is_dataclass(obj):
        fields = {f.name: map_learnable(getattr(obj, f.name), fn) for f in dataclasses.fields(obj)}
        return type(obj)(**fields)
    if isinstance(obj, list):
        return [map_learnable(v, fn) for v in obj]
    return obj


def lift_model(model: Model, tape):
    """Parallel parameter tree with learnable arrays watched on ``tape``.

    Returns ``(view, diffvalues)`` with the DiffValues in
    :func:`named_parameters` order.
    """
    sink = []

    def watch(arr):
        dv = tape.watch(arr)
        sink.append(dv)
        return dv

    return map_learnable(model, watch), sink


def save(model: Model, path) -> None:
    """Write the checkpoint format described in the module docstring."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in named_tensors(model):
        dtype = "<f8" if arr.dtype == np.float64 else "<f4"
        raw = np.ascontiguousarray(arr).astype(dtype, copy=False).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    index = json.dumps({"config": model.config.to_dict(), "tensors": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(index)))
        fh.write(index)
        for raw in blobs:
            fh.write(raw)


def load(path, head_dim: Optional[int] = None, head_kind: Optional[str] = None,
         allow_head_reinit: bool = False, seed: Optional[int] = None) -> Model:
    """Rebuild a model from a checkpoint file.

    With ``head_dim``/``head_kind`` overrides the head tensors may stop
    matching the stored shapes; ``allow_head_reinit`` then keeps the fresh
    seed-initialized head instead (the transfer-learning entry point).
    Any other mismatch, truncation, or missing tensor raises
    :class:`CheckpointError` naming the tensor.
    """
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, index_len = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    if len(data) < 12 + index_len:
        raise CheckpointError(f"{path}: truncated index")
    try:
        index = json.loads(data[12 : 12 + index_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt index ({exc})") from exc
    payload = data[12 + index_len :]

    cfg = ModelConfig.from_dict(index["config"])
    overrides = {}
    if head_kind is not None:
        overrides["head"] = head_kind
    if head_dim is not None:
        overrides["num_classes"] = head_dim if (head_kind or cfg.head) == "classify" else cfg.num_classes
    if seed is not None:
        overrides["seed"] = seed
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    model = build(cfg)

    stored = {e["name"]: e for e in index["tensors"]}
    for name, parent, key, _ in _iter_slots(model, ""):
        target = getattr(parent, key) if isinstance(key, str) else parent[key]
        if name.startswith("head.") and allow_head_reinit:
            continue  # head stays freshly initialized
        entry = stored.get(name)
        if entry is None:
            raise CheckpointError(f"{path}: missing tensor {name}")
        shape = tuple(entry["shape"])
        if shape != target.shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {shape}, model expects {target.shape}")
        nbytes = int(np.prod(shape)) * np.dtype(entry["dtype"]).itemsize
        if entry["offset"] + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated data for tensor {name}")
        arr = np.frombuffer(payload, dtype=entry["dtype"], count=int(np.prod(shape)), offset=entry["offset"])
        arr = arr.reshape(shape).astype(target.dtype, copy=True)
        if isinstance(key, str):
            setattr(parent, key, arr)
        else:
            parent[key] = arr
    return model
