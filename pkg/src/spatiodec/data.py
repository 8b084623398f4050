"""On-disk 4D volumes, dataset manifests, splits, and phantom generation.

Volume files (``.v4d``) are little-endian binary: magic ``V4D1``, a u32
dtype code (1 = float32), four u32 extents ``(l, H, W, D)``, then the
payload in row-major order with time slowest, so one 3D frame is
contiguous.  A dataset is a directory of volumes plus ``manifest.json``
listing per-block subject ids, class labels, trait values, and block
lengths.

The phantom generator stands in for real acquisitions at desk scale.
Each block is unit-variance Gaussian noise plus, inside a spherical
per-class region (jittered per subject), a lagged response curve: a
difference of two gamma densities convolved with a boxcar covering the
block, standardized to zero mean and unit variance so that the configured
``snr`` equals the signal amplitude over noise standard deviation.  One
designated class scales its amplitude with a latent per-subject trait,
which makes trait regression learnable from that class's blocks.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.stats import gamma as gamma_dist

from .errors import FormatError, PhantomSpecError, ShapeError, SplitError

VOLUME_MAGIC = b"V4D1"
_DTYPE_CODES = {1: "<f4"}
MANIFEST_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# Volume file I/O
# ---------------------------------------------------------------------------


def write_volume(t: np.ndarray, path) -> None:
    t = np.asarray(t)
    if t.ndim != 4:
        raise FormatError(f"volume must be rank 4 (l, H, W, D), got {t.shape}")
    if not np.isfinite(t).all():
        raise FormatError("volume contains non-finite values")
    payload = np.ascontiguousarray(t, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<5I", 1, *t.shape))
        fh.write(payload.tobytes())


def volume_extents(path) -> tuple:
    """Read only the header; returns (l, H, W, D)."""
    with open(path, "rb") as fh:
        head = fh.read(24)
    if len(head) < 24 or head[:4] != VOLUME_MAGIC:
        raise FormatError(f"{path}: bad magic")
    _, l, h, w, d = struct.unpack("<5I", head[4:24])
    return l, h, w, d


def read_volume(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 24 or data[:4] != VOLUME_MAGIC:
        raise FormatError(f"{path}: bad magic")
    code, l, h, w, d = struct.unpack("<5I", data[4:24])
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dtype = np.dtype(_DTYPE_CODES[code])
    expected = l * h * w * d * dtype.itemsize
    if len(data) != 24 + expected:
        raise FormatError(f"{path}: payload has {len(data) - 24} bytes, expected {expected}")
    vol = np.frombuffer(data, dtype=dtype, offset=24).reshape(l, h, w, d).astype(np.float32)
    if not np.isfinite(vol).all():
        raise FormatError(f"{path}: payload contains non-finite values")
    return vol


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    path: str
    subject_id: str
    class_label: int
    block_length: int
    trait_value: float = 0.0


@dataclass
class DatasetManifest:
    entries: list
    class_names: list
    schema_version: int = MANIFEST_SCHEMA_VERSION
    root: Optional[Path] = None  # directory holding the volume files; not serialized

    def subjects(self) -> list:
        return sorted({e.subject_id for e in self.entries})

    def volume_path(self, entry: ManifestEntry) -> Path:
        return (self.root or Path(".")) / entry.path

    def entries_for(self, subjects) -> list:
        wanted = set(subjects)
        return [e for e in self.entries if e.subject_id in wanted]

    def save(self, path) -> None:
        doc = {
            "schema_version": self.schema_version,
            "class_names": list(self.class_names),
            "entries": [
                {
                    "path": e.path,
                    "subject_id": e.subject_id,
                    "class_label": e.class_label,
                    "block_length": e.block_length,
                    "trait_value": e.trait_value,
                }
                for e in self.entries
            ],
        }
        Path(path).write_text(json.dumps(doc, indent=1))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid manifest JSON ({exc})") from exc
        if doc.get("schema_version") != MANIFEST_SCHEMA_VERSION:
            raise FormatError(f"{path}: unsupported manifest schema {doc.get('schema_version')}")
        entries = [ManifestEntry(**e) for e in doc["entries"]]
        for e in entries:
            if not e.subject_id:
                raise FormatError(f"{path}: entry with empty subject_id")
        return cls(entries, doc["class_names"], doc["schema_version"], root=path.parent)


def load_block(manifest: DatasetManifest, entry: ManifestEntry) -> np.ndarray:
    return read_volume(manifest.volume_path(entry))


# ---------------------------------------------------------------------------
# Window segmentation
# ---------------------------------------------------------------------------


def segment_windows(block: np.ndarray, length: int, stride: int) -> np.ndarray:
    """Sliding windows ``[k, 1, length, H, W, D]`` with k = (l_b - L)//stride + 1."""
    l_b = block.shape[0]
    if l_b < length:
        raise ShapeError(f"block has {l_b} frames, window needs {length}")
    if stride < 1:
        raise ShapeError("stride must be positive")
    k = (l_b - length) // stride + 1
    out = np.stack([block[i * stride : i * stride + length] for i in range(k)])
    return out[:, None]


# ---------------------------------------------------------------------------
# Subject-level splits
# ---------------------------------------------------------------------------


@dataclass
class SplitPlan:
    fold_index: int
    train: tuple
    val: tuple
    test: tuple

    def __post_init__(self):
        groups = (set(self.train), set(self.val), set(self.test))
        total = sum(len(g) for g in groups)
        if len(set().union(*groups)) != total:
            raise SplitError("split groups share subjects")

    def role_of(self, subject_id: str) -> str:
        if subject_id in self.train:
            return "train"
        if subject_id in self.val:
            return "val"
        if subject_id in self.test:
            return "test"
        raise SplitError(f"subject {subject_id} is not in this split")


def make_splits(manifest: DatasetManifest, num_folds: int = 5, fold_index: int = 0, seed: int = 0) -> SplitPlan:
    """Subject-disjoint split: one fold tests, half the next fold validates.

    Subjects are shuffled by ``seed`` and cut into ``num_folds`` folds, so
    the five test sets partition the subjects and proportions land at
    70/10/20 within one subject.
    """
    subjects = manifest.subjects()
    if not 0 <= fold_index < num_folds:
        raise SplitError(f"fold_index {fold_index} outside [0, {num_folds})")
    if len(subjects) < 2 * num_folds:
        raise SplitError(f"need at least {2 * num_folds} subjects, have {len(subjects)}")
    order = np.random.default_rng(seed).permutation(len(subjects))
    shuffled = [subjects[i] for i in order]
    folds = [list(f) for f in np.array_split(shuffled, num_folds)]
    test = folds[fold_index]
    nxt = folds[(fold_index + 1) % num_folds]
    val = nxt[: len(nxt) // 2]
    taken = set(test) | set(val)
    train = [s for s in shuffled if s not in taken]
    return SplitPlan(fold_index, tuple(train), tuple(val), tuple(test))


# ---------------------------------------------------------------------------
# Phantom generation
# ---------------------------------------------------------------------------


@dataclass
class PhantomSpec:
    num_classes: int = 7
    num_subjects: int = 20
    blocks_per_subject_per_class: int = 2
    extents: tuple = (16, 20, 18)  # (H, W, D)
    block_length: Union[int, Sequence[int]] = (26, 39, 29, 17, 23, 32, 39)
    regions: Sequence = ()  # per class: ((cx, cy, cz), radius)
    hrf: tuple = (3.0, 0.35)  # (peak_time frames, undershoot weight)
    snr: float = 2.0
    subject_jitter: int = 1
    trait_coupling: float = 0.0
    trait_class: int = 0
    class_peak_times: Optional[Sequence[float]] = None  # overrides hrf peak per class
    zero_mean_response: bool = False  # strip the baseline shift (temporal-only signatures)
    seed: int = 0

    def block_length_for(self, cls: int) -> int:
        if np.isscalar(self.block_length):
            return int(self.block_length)
        lengths = list(self.block_length)
        return int(lengths[cls % len(lengths)])

    def peak_time_for(self, cls: int) -> float:
        if self.class_peak_times is not None:
            return float(self.class_peak_times[cls % len(self.class_peak_times)])
        return float(self.hrf[0])

    def validate(self) -> None:
        if self.snr < 0:
            raise PhantomSpecError("snr must be non-negative")
        if len(self.regions) < self.num_classes:
            raise PhantomSpecError(f"{self.num_classes} classes need {self.num_classes} regions")
        if not 0 <= self.trait_class < self.num_classes:
            raise PhantomSpecError("trait_class outside class range")
        for cls in range(self.num_classes):
            center, radius = self.regions[cls]
            reach = radius + self.subject_jitter
            for c, e in zip(center, self.extents):
                if c - reach < 0 or c + reach > e - 1:
                    raise PhantomSpecError(
                        f"class {cls} region (center {tuple(center)}, radius {radius}) escapes "
                        f"extents {self.extents} under jitter {self.subject_jitter}"
                    )


def desk_phantom_spec(**overrides) -> PhantomSpec:
    """Seven compact spherical regions inside 16 x 20 x 18 voxels."""
    centers = [
        (5, 5, 5),
        (10, 5, 5),
        (5, 14, 5),
        (10, 14, 5),
        (5, 5, 12),
        (10, 5, 12),
        (5, 14, 12),
    ]
    spec = PhantomSpec(regions=[(c, 2.5) for c in centers])
    for k, v in overrides.items():
        setattr(spec, k, v)
    return spec


def block_response(length: int, peak_time: float, undershoot: float, zero_mean: bool = False) -> np.ndarray:
    """Unit-variance lagged block response over ``length`` frames.

    Difference of two gamma densities (undershoot peaking 2.5x later),
    convolved with a boxcar the length of the block, scaled to unit
    variance so an amplitude multiplier equals the signal-to-noise ratio
    against unit-variance noise.  The default keeps the positive baseline
    shift (activation raises the signal); ``zero_mean`` removes it, which
    leaves class signatures that differ only in temporal shape.
    """
    t = np.arange(length, dtype=np.float64)
    peak = max(peak_time, 0.5)
    h = gamma_dist.pdf(t, peak + 1.0) - undershoot * gamma_dist.pdf(t, 2.5 * peak + 1.0)
    resp = np.cumsum(h)  # boxcar spans the whole block
    sd = resp.std()
    if sd == 0:
        raise PhantomSpecError(f"degenerate response for block length {length}")
    resp = resp / sd
    if zero_mean:
        resp -= resp.mean()
    return resp


def _sphere_mask(extents, center, radius) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, e) for e in extents)]
    d2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    return d2 <= radius**2


def phantom_generate(spec: PhantomSpec, out_dir) -> DatasetManifest:
    """Write one volume per (subject, class, block) plus the manifest.

    Fully seed-deterministic: every block draws from its own seeded
    stream, so regeneration is bitwise identical regardless of order.
    """
    spec.validate()
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)

    subject_rng = np.random.default_rng([spec.seed, 0x5EED])
    traits = subject_rng.uniform(-1.0, 1.0, size=spec.num_subjects)
    jitters = subject_rng.integers(
        -spec.subject_jitter, spec.subject_jitter + 1, size=(spec.num_subjects, 3)
    )

    entries = []
    for subj in range(spec.num_subjects):
        subject_id = f"subj{subj:03d}"
        for cls in range(spec.num_classes):
            l_b = spec.block_length_for(cls)
            resp = block_response(l_b, spec.peak_time_for(cls), spec.hrf[1], spec.zero_mean_response)
            amplitude = spec.snr
            if cls == spec.trait_class:
                amplitude = spec.snr * (1.0 + spec.trait_coupling * traits[subj])
            center = tuple(int(c) + int(j) for c, j in zip(spec.regions[cls][0], jitters[subj]))
            mask = _sphere_mask(spec.extents, center, spec.regions[cls][1])
            signal = (amplitude * resp).astype(np.float32)
            for b in range(spec.blocks_per_subject_per_class):
                rng = np.random.default_rng([spec.seed, subj, cls, b])
                vol = rng.standard_normal((l_b,) + tuple(spec.extents), dtype=np.float32)
                vol[:, mask] += signal[:, None]
                rel = f"volumes/s{subj:03d}_c{cls}_b{b}.v4d"
                write_volume(vol, out_dir / rel)
                entries.append(ManifestEntry(rel, subject_id, cls, l_b, float(traits[subj])))

    manifest = DatasetManifest(entries, [f"class{c}" for c in range(spec.num_classes)], root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest
