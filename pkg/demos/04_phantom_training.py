"""Train a small decoder end to end on synthetic phantom volumes.

Phantom blocks are unit-variance noise plus a lagged, class-specific
response inside a spherical region; subjects jitter the region centers.
This demo keeps everything small so it finishes in about two minutes;
the committed configs/desk.json holds the full desk-scale settings.
"""

import tempfile
from pathlib import Path

from spatiodec import ModelConfig, TrainConfig, build, desk_phantom_spec, evaluate, make_splits, phantom_generate, train

workdir = Path(tempfile.mkdtemp(prefix="phantom_demo_"))
spec = desk_phantom_spec(
    num_classes=4,
    num_subjects=10,
    blocks_per_subject_per_class=1,
    snr=2.5,
    seed=3,
)
manifest = phantom_generate(spec, workdir)
print(f"generated {len(manifest.entries)} blocks for {spec.num_subjects} subjects in {workdir}")

split = make_splits(manifest, num_folds=5, fold_index=0, seed=0)
print(f"subject split: {len(split.train)} train / {len(split.val)} val / {len(split.test)} test")

model_cfg = ModelConfig(
    input_extents=(15, 16, 20, 18),
    conv_channels=4,
    stage_channels=(8, 8, 8, 16),
    num_classes=4,
    seed=0,
)
train_cfg = TrainConfig(epochs=20, batch_size=8, window_length=15, lr=1e-3, seed=0)

model = build(model_cfg)
best, history = train(model, manifest, split, train_cfg)
for h in history[::4] + [history[-1]]:
    print(f"  epoch {h['epoch']:02d}  train {h['train_loss']:.3f}  val {h['val_loss']:.3f}  lr {h['lr']:.1e}")

report = evaluate(best, manifest, split, train_cfg)
print(f"\ninstance-voted test accuracy: {report.accuracy:.3f}")
print("confusion matrix (rows true, columns predicted):")
for row in report.confusion:
    print("  ", " ".join(f"{v:3d}" for v in row))
