"""Optimization, the train/eval protocol, transfer fitting, and metrics.

Training runs bias-corrected Adam (beta1 0.9, beta2 0.999) with a
reduce-on-plateau schedule: the learning rate starts at 1e-4 and divides
by 5 whenever the validation loss fails to improve by ``min_delta`` for
``patience`` consecutive epochs.  Each epoch shuffles the training blocks
with the run seed and samples one random window per block; incomplete
final batches are dropped in train mode so batch statistics stay sane.
Evaluation slides stride-3 windows over each held-out block and votes.

Everything here is bit-reproducible given (seed, config, dataset).
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .data import DatasetManifest, SplitPlan, load_block, make_splits, segment_windows
from .errors import ContractError, EvalError, ShapeError, SplitError, TrainingDivergedError
from .model import Model, forward, lift_model, load, named_parameters, predict_instance
from .ops import mse, softmax_ce
from .tensor import DTYPES, Tape, value_of


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float) -> None:
    """One in-place Adam update over aligned parameter/gradient lists."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("parameter, gradient, and state lists are misaligned")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class LrSchedule:
    current_lr: float = 1e-4
    decay_factor: float = 5.0
    patience: int = 15
    min_delta: float = 1e-4
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0


def schedule_update(s: LrSchedule, epoch_val_loss: float) -> float:
    """Plateau rule: divide the rate by the decay factor after ``patience``
    consecutive epochs without a ``min_delta`` improvement."""
    if not math.isfinite(epoch_val_loss):
        raise TrainingDivergedError(f"validation loss is {epoch_val_loss}")
    if epoch_val_loss < s.best_val_loss - s.min_delta:
        s.best_val_loss = epoch_val_loss
        s.epochs_since_improvement = 0
    else:
        s.epochs_since_improvement += 1
        if s.epochs_since_improvement >= s.patience:
            s.current_lr /= s.decay_factor
            s.epochs_since_improvement = 0
    return s.current_lr


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 60
    window_length: int = 15
    eval_stride: int = 3
    lr: float = 1e-4
    patience: int = 15
    min_delta: float = 1e-4
    seed: int = 0
    precision: str = "single"
    num_permutations: int = 10000

    def __post_init__(self):
        if self.batch_size < 2:
            raise ContractError("batch_size must be >= 2 (batch statistics)")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")


@dataclass
class EvalReport:
    confusion: np.ndarray  # rows true class, columns predicted, instance level
    accuracy: float
    per_class_accuracy: list
    loss_curve: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "accuracy": self.accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "loss_curve": self.loss_curve,
        }


@dataclass
class SpearmanResult:
    r_s: float
    p_perm: float
    n: int


def _entry_target(entry, head: str):
    return entry.class_label if head == "classify" else entry.trait_value


def _batch_loss(model: Model, x: np.ndarray, targets, mode: str, params=None):
    out, _ = forward(model, x, mode, params=params)
    if model.config.head == "classify":
        return softmax_ce(out, np.asarray(targets, dtype=np.intp))
    tgt = np.asarray(targets, dtype=value_of(out).dtype).reshape(-1, 1)
    return mse(out, tgt)


def _validation_loss(model: Model, manifest, entries, cfg: TrainConfig, cache) -> float:
    """Mean infer-mode loss over one centered window per validation block."""
    losses = []
    for start in range(0, len(entries), cfg.batch_size):
        chunk = entries[start : start + cfg.batch_size]
        xs, ys = [], []
        for e in chunk:
            block = _cached_block(manifest, e, cache)
            off = (e.block_length - cfg.window_length) // 2
            xs.append(block[off : off + cfg.window_length][None])
            ys.append(_entry_target(e, model.config.head))
        x = np.stack(xs).astype(DTYPES[cfg.precision])
        loss = float(value_of(_batch_loss(model, x, ys, "infer")))
        losses.append((loss, len(chunk)))
    total = sum(n for _, n in losses)
    return sum(l * n for l, n in losses) / total


def _cached_block(manifest, entry, cache) -> np.ndarray:
    block = cache.get(entry.path)
    if block is None:
        block = load_block(manifest, entry)
        cache[entry.path] = block
    return block


def train(model: Model, manifest: DatasetManifest, split: SplitPlan, cfg: TrainConfig):
    """Full training loop; returns ``(best-validation model, history)``.

    History rows are dicts with epoch, train_loss, val_loss, and lr.  The
    returned model is a deep copy taken at the epoch with the lowest
    validation loss.
    """
    if len(manifest.entries) == 0:
        raise EvalError("manifest has no entries")
    if model.config.head == "classify":
        labels = [e.class_label for e in manifest.entries]
        if min(labels) < 0 or max(labels) >= model.config.num_classes:
            raise ContractError("manifest labels exceed the model's class count")
    train_entries = manifest.entries_for(split.train)
    val_entries = manifest.entries_for(split.val)
    if not train_entries or not val_entries:
        raise SplitError("split leaves the train or validation set empty")
    for e in train_entries + val_entries:
        if e.block_length < cfg.window_length:
            raise ShapeError(f"block {e.path} shorter than window length {cfg.window_length}")

    rng = np.random.default_rng(cfg.seed)
    dtype = DTYPES[cfg.precision]
    params = [arr for _, arr in named_parameters(model)]
    adam = AdamState.for_params(params)
    sched = LrSchedule(current_lr=cfg.lr, patience=cfg.patience, min_delta=cfg.min_delta)
    cache: dict = {}
    history = []
    best_val = math.inf
    best_model = copy.deepcopy(model)

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_entries))
        starts = [
            int(rng.integers(0, train_entries[i].block_length - cfg.window_length + 1))
            for i in order
        ]
        epoch_losses = []
        num_batches = len(order) // cfg.batch_size  # drop the incomplete tail
        for b in range(num_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            off = starts[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            xs, ys = [], []
            for i, st in zip(idx, off):
                e = train_entries[i]
                block = _cached_block(manifest, e, cache)
                xs.append(block[st : st + cfg.window_length][None])
                ys.append(_entry_target(e, model.config.head))
            x = np.stack(xs).astype(dtype)

            tape = Tape()
            lifted, dvs = lift_model(model, tape)
            loss = _batch_loss(model, x, ys, "train", params=lifted)
            loss_val = float(value_of(loss))
            if not math.isfinite(loss_val):
                raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}")
            tape.backward(loss)
            adam_step(params, [dv.grad for dv in dvs], adam, sched.current_lr)
            epoch_losses.append(loss_val)

        train_loss = float(np.mean(epoch_losses)) if epoch_losses else math.nan
        val_loss = _validation_loss(model, manifest, val_entries, cfg, cache)
        lr = schedule_update(sched, val_loss)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr})
        if val_loss < best_val:
            best_val = val_loss
            best_model = copy.deepcopy(model)

    return best_model, history


def history_to_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "lr"])
        writer.writeheader()
        writer.writerows(history)


def _audit_eval_subjects(entries, split: SplitPlan) -> None:
    used = {e.subject_id for e in entries}
    leaked = used & (set(split.train) | set(split.val))
    if leaked:
        raise EvalError(f"evaluation would touch non-test subjects: {sorted(leaked)}")


def evaluate(model: Model, manifest: DatasetManifest, split: SplitPlan, cfg: TrainConfig) -> EvalReport:
    """Instance-level evaluation: stride-``eval_stride`` windows, then voting."""
    entries = manifest.entries_for(split.test)
    if not entries:
        raise EvalError("test set is empty")
    _audit_eval_subjects(entries, split)
    num_classes = model.config.num_classes
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    for e in entries:
        block = load_block(manifest, e)
        windows = segment_windows(block, cfg.window_length, cfg.eval_stride)
        pred, _ = predict_instance(model, windows.astype(DTYPES[cfg.precision]))
        confusion[e.class_label, pred] += 1
    accuracy = float(np.trace(confusion)) / float(confusion.sum())
    row_sums = confusion.sum(axis=1)
    per_class = [
        float(confusion[c, c]) / row_sums[c] if row_sums[c] else math.nan for c in range(num_classes)
    ]
    return EvalReport(confusion, accuracy, per_class)


def predict_instance_score(model: Model, windows) -> float:
    """Regression analog of voting: the mean window score for one instance."""
    out, _ = forward(model, windows, "infer")
    return float(value_of(out).mean())


def spearman(pred, obs, num_permutations: int = 10000, seed: int = 0) -> SpearmanResult:
    """Rank correlation with average-rank ties plus a permutation p-value.

    ``p_perm = (1 + #{permutations with |r| >= |r_s|}) / (1 + N)`` with a
    seeded permutation stream.
    """
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if pred.shape != obs.shape or pred.ndim != 1:
        raise ShapeError("spearman needs two equal-length vectors")
    n = pred.size
    if n < 3:
        raise ContractError("spearman needs at least 3 observations")
    if np.ptp(pred) == 0 or np.ptp(obs) == 0:
        raise ContractError("correlation undefined for a constant vector")
    rp = rankdata(pred)
    ro = rankdata(obs)
    r_s = float(np.corrcoef(rp, ro)[0, 1])

    rng = np.random.default_rng(seed)
    a = (rp - rp.mean()) / (np.linalg.norm(rp - rp.mean()))
    b = (ro - ro.mean()) / (np.linalg.norm(ro - ro.mean()))
    hits = 0
    for _ in range(num_permutations):
        r_perm = float(a @ b[rng.permutation(n)])
        if abs(r_perm) >= abs(r_s):
            hits += 1
    p_perm = (1 + hits) / (1 + num_permutations)
    return SpearmanResult(r_s, p_perm, n)


def filter_class(manifest: DatasetManifest, cls: int) -> DatasetManifest:
    """Manifest view containing only blocks of one class (shared root)."""
    entries = [e for e in manifest.entries if e.class_label == cls]
    return DatasetManifest(entries, manifest.class_names, manifest.schema_version, manifest.root)


def transfer_fit(
    source_ckpt,
    target_manifest: DatasetManifest,
    target_head: str,
    cfg: TrainConfig,
    split: Optional[SplitPlan] = None,
    num_classes: Optional[int] = None,
    class_filter: Optional[int] = None,
):
    """Fine-tune a pretrained body on a new task with a fresh head.

    ``target_head`` is ``"classify"`` (with ``num_classes``) or
    ``"regress"``; the regression loss is mean squared error against the
    manifest trait values, optionally restricted to ``class_filter``
    blocks.  All layers are fine-tuned.  Returns ``(model, report)`` where
    the report is an :class:`EvalReport` or a :class:`SpearmanResult` on
    the held-out subjects.
    """
    model = load(
        source_ckpt,
        head_dim=num_classes,
        head_kind=target_head,
        allow_head_reinit=True,
        seed=cfg.seed,
    )
    manifest = target_manifest
    if class_filter is not None:
        manifest = filter_class(manifest, class_filter)
    if split is None:
        split = make_splits(manifest, 5, 0, cfg.seed)
    best, history = train(model, manifest, split, cfg)

    if target_head == "classify":
        report = evaluate(best, manifest, split, cfg)
        report.loss_curve = [h["val_loss"] for h in history]
        return best, report

    entries = manifest.entries_for(split.test)
    if not entries:
        raise EvalError("test set is empty")
    _audit_eval_subjects(entries, split)
    preds, obs = [], []
    for e in entries:
        block = load_block(manifest, e)
        windows = segment_windows(block, cfg.window_length, cfg.eval_stride)
        preds.append(predict_instance_score(best, windows.astype(DTYPES[cfg.precision])))
        obs.append(e.trait_value)
    result = spearman(preds, obs, cfg.num_permutations, cfg.seed)
    return best, result


def run_crossval(model_cfg, manifest: DatasetManifest, cfg: TrainConfig, num_folds: int = 5):
    """Train and evaluate every fold; returns (reports, mean, sd) of accuracy."""
    from .model import build

    reports = []
    for fold in range(num_folds):
        split = make_splits(manifest, num_folds, fold, cfg.seed)
        model = build(model_cfg)
        best, history = train(model, manifest, split, cfg)
        report = evaluate(best, manifest, split, cfg)
        report.loss_curve = [h["val_loss"] for h in history]
        reports.append(report)
    accs = np.array([r.accuracy for r in reports])
    return reports, float(accs.mean()), float(accs.std())


def report_to_json(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=1))
