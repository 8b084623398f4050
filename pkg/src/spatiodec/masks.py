"""Attention-mask extraction, class averaging, and file export.

Masks are captured during inference only: for every held-out window the
stage masks are recorded, then averaged per (stage, channel, class) and
trilinearly upsampled to the input volume extents.  Export writes, per
mask, a raw little-endian float32 volume (plus one for the logit mean), a
JSON sidecar with the shape and value ranges, and an 8-bit PGM montage of
axial slices tiled ceil(sqrt(D)) columns wide, linearly mapped from the
sidecar's [min, max].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DatasetManifest, SplitPlan, load_block, segment_windows
from .errors import ConfigError, EvalError
from .model import Model, forward
from .ops import trilinear_upsample
from .tensor import DTYPES


@dataclass
class MaskVolume:
    stage_index: int
    channel_index: int
    class_label: int
    A_mean: np.ndarray  # [H, W, D] at input extents
    logit_mean: np.ndarray
    sample_count: int


def extract_masks(
    model: Model,
    manifest: DatasetManifest,
    split: SplitPlan,
    cfg,
    stage_filter="all",
    attention_hook=None,
) -> list:
    """Class-averaged upsampled masks for every (stage, channel, class).

    Runs inference with mask recording over all stride-``eval_stride``
    windows of the test subjects; model parameters are never touched.
    """
    if not model.config.variant.endswith("_att"):
        raise ConfigError(f"variant {model.config.variant} has no attention branches")
    entries = manifest.entries_for(split.test)
    if not entries:
        raise EvalError("test set is empty")
    stages = range(1, 5) if stage_filter == "all" else (int(stage_filter),)
    if any(s < 1 or s > 4 for s in stages):
        raise ConfigError(f"stage filter must be 1..4 or 'all', got {stage_filter}")

    sums: dict = {}  # (stage, class) -> [A sum, logit sum, count]
    dtype = DTYPES[cfg.precision]
    for e in entries:
        block = load_block(manifest, e)
        windows = segment_windows(block, cfg.window_length, cfg.eval_stride).astype(dtype)
        _, records = forward(model, windows, "infer", record_masks=True, attention_hook=attention_hook)
        for rec in records:
            if rec.stage_index not in stages:
                continue
            key = (rec.stage_index, e.class_label)
            slot = sums.get(key)
            if slot is None:
                sums[key] = [
                    rec.A.sum(axis=0, dtype=np.float64),
                    rec.pre_gate.sum(axis=0, dtype=np.float64),
                    rec.A.shape[0],
                ]
            else:
                slot[0] += rec.A.sum(axis=0, dtype=np.float64)
                slot[1] += rec.pre_gate.sum(axis=0, dtype=np.float64)
                slot[2] += rec.A.shape[0]

    target = model.config.input_extents[1:]
    out = []
    for (stage, cls), (a_sum, l_sum, count) in sorted(sums.items()):
        a_mean = trilinear_upsample((a_sum / count)[None], target)[0]
        l_mean = trilinear_upsample((l_sum / count)[None], target)[0]
        for ch in range(a_mean.shape[0]):
            out.append(
                MaskVolume(
                    stage_index=stage,
                    channel_index=ch,
                    class_label=cls,
                    A_mean=a_mean[ch].astype(np.float32),
                    logit_mean=l_mean[ch].astype(np.float32),
                    sample_count=count,
                )
            )
    return out


def _write_pgm(image_u8: np.ndarray, path) -> None:
    h, w = image_u8.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image_u8.astype(np.uint8).tobytes())


def _montage(vol: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Tile axial (last-axis) slices; ceil(sqrt(D)) columns."""
    h, w, d = vol.shape
    cols = math.ceil(math.sqrt(d))
    rows = math.ceil(d / cols)
    scale = 255.0 / max(hi - lo, np.finfo(np.float64).tiny)
    canvas = np.zeros((rows * h, cols * w), dtype=np.uint8)
    for k in range(d):
        r, c = divmod(k, cols)
        tile = np.clip((vol[:, :, k] - lo) * scale, 0, 255)
        canvas[r * h : (r + 1) * h, c * w : (c + 1) * w] = tile.astype(np.uint8)
    return canvas


def export_mask(mv: MaskVolume, out_dir) -> dict:
    """Write raw volumes, sidecar, and montage; returns the file paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = f"stage{mv.stage_index}_ch{mv.channel_index:03d}_class{mv.class_label}"
    paths = {
        "raw": out_dir / f"{base}.raw",
        "logit_raw": out_dir / f"{base}_logit.raw",
        "sidecar": out_dir / f"{base}.json",
        "montage": out_dir / f"{base}.pgm",
    }
    np.ascontiguousarray(mv.A_mean, dtype="<f4").tofile(paths["raw"])
    np.ascontiguousarray(mv.logit_mean, dtype="<f4").tofile(paths["logit_raw"])
    a_lo, a_hi = float(mv.A_mean.min()), float(mv.A_mean.max())
    sidecar = {
        "shape": list(mv.A_mean.shape),
        "stage": mv.stage_index,
        "channel": mv.channel_index,
        "class": mv.class_label,
        "min": a_lo,
        "max": a_hi,
        "logit_min": float(mv.logit_mean.min()),
        "logit_max": float(mv.logit_mean.max()),
        "sample_count": mv.sample_count,
        "dtype": "<f4",
    }
    paths["sidecar"].write_text(json.dumps(sidecar, indent=1))
    _write_pgm(_montage(mv.A_mean.astype(np.float64), a_lo, a_hi), paths["montage"])
    return {k: str(v) for k, v in paths.items()}


def read_raw_mask(raw_path, shape) -> np.ndarray:
    """Re-read an exported raw volume (bitwise round trip of the export)."""
    return np.fromfile(raw_path, dtype="<f4").reshape(tuple(shape))
