"""Transfer a pretrained body to trait regression, then export masks.

The source checkpoint's convolutional body is reused while the dense head
is redefined and freshly initialized; the loss switches to mean squared
error against a per-subject trait that scales one class's activation
amplitude.  Afterwards the attention masks of the transferred model are
class-averaged, upsampled to input resolution, and written to disk.
"""

import tempfile
from pathlib import Path

from spatiodec import (
    ModelConfig,
    PhantomSpec,
    TrainConfig,
    build,
    make_splits,
    phantom_generate,
    train,
    transfer_fit,
)
from spatiodec.masks import export_mask, extract_masks
from spatiodec.model import save

workdir = Path(tempfile.mkdtemp(prefix="transfer_demo_"))

# Source task: 3-class phantoms, a quick pretraining run.
src_spec = PhantomSpec(
    num_classes=3,
    num_subjects=10,
    blocks_per_subject_per_class=1,
    extents=(16, 20, 18),
    block_length=(24, 28, 22),
    regions=[((5, 5, 5), 2.5), ((10, 14, 5), 2.5), ((8, 5, 12), 2.5)],
    snr=2.5,
    seed=5,
)
src_manifest = phantom_generate(src_spec, workdir / "source")
model_cfg = ModelConfig(
    input_extents=(15, 16, 20, 18),
    conv_channels=4,
    stage_channels=(8, 8, 8, 16),
    num_classes=3,
    seed=0,
)
cfg = TrainConfig(epochs=10, batch_size=8, window_length=15, lr=1e-3, seed=0)
best, _ = train(build(model_cfg), src_manifest, make_splits(src_manifest, 5, 0, 0), cfg)
ckpt = workdir / "source.ckpt"
save(best, ckpt)
print(f"pretrained source checkpoint: {ckpt}")

# Target task: single-condition blocks whose amplitude carries a latent
# per-subject trait; the head becomes a regressor trained with MSE.
trait_spec = PhantomSpec(
    num_classes=1,
    num_subjects=15,
    blocks_per_subject_per_class=3,
    extents=(16, 20, 18),
    block_length=26,
    regions=[((5, 5, 5), 2.5)],
    snr=2.5,
    trait_coupling=0.5,
    seed=6,
)
trait_manifest = phantom_generate(trait_spec, workdir / "trait")
reg_cfg = TrainConfig(epochs=15, batch_size=8, window_length=15, lr=1e-3, seed=0, num_permutations=2000)
moved, result = transfer_fit(ckpt, trait_manifest, "regress", reg_cfg)
print(f"held-out trait prediction: spearman r_s = {result.r_s:.3f}, p_perm = {result.p_perm:.4f} (n = {result.n})")

# Mask export: class-averaged A(x) per stage and channel, upsampled to
# the input volume grid, as raw float volumes plus PGM montages.
split = make_splits(trait_manifest, 5, 0, 0)
volumes = extract_masks(moved, trait_manifest, split, reg_cfg, stage_filter=3)
mask_dir = workdir / "masks"
for mv in volumes[:4]:
    paths = export_mask(mv, mask_dir)
    print(f"stage {mv.stage_index} channel {mv.channel_index}: {paths['montage']}")
print(f"(sidecars record shape and value ranges; raw volumes re-read bitwise)")
