"""Command-line driver for the full workflow.

Subcommands: ``phantom-gen``, ``train``, ``eval``, ``transfer``, ``masks``,
``gradcheck``, ``crossval``.  Model and training settings come from a JSON
config file with ``"model"`` and ``"train"`` sections mirroring the
ModelConfig/TrainConfig field names; command-line flags override file
values, and the effective merged config is echoed into the output
directory.  Every subcommand is deterministic given (seed, config, data).

``--threads`` (or the ``SPATIODEC_THREADS`` environment variable) caps the
BLAS thread pools; heavy imports happen after the cap is applied.  Results
never depend on the thread count.

Exit codes: 0 on success, 2 on usage errors, 1 otherwise with a one-line
diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path


def _configure_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _load_config_file(path):
    if path is None:
        return {}, {}
    doc = json.loads(Path(path).read_text())
    return doc.get("model", {}), doc.get("train", {})


def _build_configs(args, data_dir=None):
    """Merge config-file sections with CLI overrides; returns (model, train)."""
    from .data import DatasetManifest, volume_extents
    from .model import ModelConfig
    from .training import TrainConfig

    model_over, train_over = _load_config_file(getattr(args, "config", None))
    for key in ("epochs", "batch_size", "window_length"):
        v = getattr(args, key, None)
        if v is not None:
            train_over[key] = v
    if getattr(args, "variant", None) is not None:
        model_over["variant"] = args.variant
    if getattr(args, "seed", None) is not None:
        model_over["seed"] = args.seed
        train_over["seed"] = args.seed

    train_cfg = TrainConfig(**{**dataclasses.asdict(TrainConfig()), **train_over})
    model_fields = {**dataclasses.asdict(ModelConfig()), **model_over}
    if "input_extents" not in model_over and data_dir is not None:
        manifest = DatasetManifest.load(Path(data_dir) / "manifest.json")
        _, h, w, d = volume_extents(manifest.volume_path(manifest.entries[0]))
        model_fields["input_extents"] = (train_cfg.window_length, h, w, d)
    model_cfg = ModelConfig(**model_fields)
    return model_cfg, train_cfg


def _echo_config(model_cfg, train_cfg, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"model": model_cfg.to_dict(), "train": dataclasses.asdict(train_cfg)}
    (out_dir / "config.json").write_text(json.dumps(doc, indent=1))


def _cmd_phantom_gen(args) -> int:
    from .data import PhantomSpec, desk_phantom_spec, phantom_generate

    doc = json.loads(Path(args.spec).read_text())
    preset = doc.pop("preset", None)
    if "regions" in doc:
        doc["regions"] = [(tuple(center), float(radius)) for center, radius in doc["regions"]]
    if preset == "desk":
        spec = desk_phantom_spec(**doc)
    elif preset is None:
        spec = PhantomSpec(**doc)
    else:
        raise ValueError(f"unknown preset {preset!r}")
    manifest = phantom_generate(spec, args.out)
    print(f"wrote {len(manifest.entries)} blocks for {spec.num_subjects} subjects to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .data import DatasetManifest, make_splits
    from .model import build, save
    from .training import history_to_csv, train

    manifest = DatasetManifest.load(Path(args.data) / "manifest.json")
    model_cfg, train_cfg = _build_configs(args, args.data)
    _echo_config(model_cfg, train_cfg, args.out)
    split = make_splits(manifest, args.folds, args.fold, train_cfg.seed)
    model = build(model_cfg)
    best, history = train(model, manifest, split, train_cfg)
    out = Path(args.out)
    save(best, out / "model.ckpt")
    history_to_csv(history, out / "history.csv")
    print(
        f"fold {args.fold}: train_loss {history[-1]['train_loss']:.4f}, "
        f"best val_loss {min(h['val_loss'] for h in history):.4f} -> {out / 'model.ckpt'}"
    )
    return 0


def _cmd_eval(args) -> int:
    from .data import DatasetManifest, make_splits
    from .model import load
    from .training import evaluate, report_to_json

    manifest = DatasetManifest.load(Path(args.data) / "manifest.json")
    model = load(args.ckpt)
    _, train_cfg = _build_configs(args, args.data)
    split = make_splits(manifest, args.folds, args.fold, train_cfg.seed)
    report = evaluate(model, manifest, split, train_cfg)
    print(f"instance accuracy: {report.accuracy:.4f} over {int(report.confusion.sum())} instances")
    for row in report.confusion:
        print(" ".join(f"{v:4d}" for v in row))
    if args.out:
        report_to_json(report, args.out)
    return 0


def _cmd_transfer(args) -> int:
    from .data import DatasetManifest
    from .model import save
    from .training import EvalReport, transfer_fit

    manifest = DatasetManifest.load(Path(args.data) / "manifest.json")
    _, train_cfg = _build_configs(args, args.data)
    if args.head == "regress":
        head, num_classes = "regress", None
    elif args.head.startswith("classify:"):
        head, num_classes = "classify", int(args.head.split(":", 1)[1])
    else:
        raise ValueError(f"--head must be regress or classify:N, got {args.head!r}")
    model, report = transfer_fit(
        args.ckpt,
        manifest,
        head,
        train_cfg,
        num_classes=num_classes,
        class_filter=args.class_filter,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save(model, out / "model.ckpt")
    if isinstance(report, EvalReport):
        print(f"transfer accuracy: {report.accuracy:.4f}")
    else:
        print(f"transfer spearman r_s = {report.r_s:.4f}, p_perm = {report.p_perm:.4g} (n = {report.n})")
    return 0


def _cmd_masks(args) -> int:
    from .data import DatasetManifest, make_splits
    from .masks import export_mask, extract_masks
    from .model import load
    from .training import TrainConfig

    manifest = DatasetManifest.load(Path(args.data) / "manifest.json")
    model = load(args.ckpt)
    _, train_cfg = _build_configs(args, args.data)
    split = make_splits(manifest, args.folds, args.fold, train_cfg.seed)
    stage = "all" if args.stage == "all" else int(args.stage)
    volumes = extract_masks(model, manifest, split, train_cfg, stage_filter=stage)
    for mv in volumes:
        export_mask(mv, args.out)
    print(f"exported {len(volumes)} mask volumes to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .checks import GRADCHECK_TOLERANCE, run_gradcheck

    results = run_gradcheck(args.op)
    ok = True
    for name, err in results.items():
        status = "ok" if err <= GRADCHECK_TOLERANCE else "FAIL"
        ok = ok and err <= GRADCHECK_TOLERANCE
        print(f"{name:20s} max relative error {err:.3e}  [{status}]")
    if not ok:
        print("gradcheck failed", file=sys.stderr)
        return 1
    return 0


def _cmd_crossval(args) -> int:
    from .data import DatasetManifest
    from .training import run_crossval

    manifest = DatasetManifest.load(Path(args.data) / "manifest.json")
    model_cfg, train_cfg = _build_configs(args, args.data)
    if args.out:
        _echo_config(model_cfg, train_cfg, args.out)
    reports, mean, sd = run_crossval(model_cfg, manifest, train_cfg, args.folds)
    for fold, report in enumerate(reports):
        print(f"fold {fold}: accuracy {report.accuracy:.4f}")
    print(f"accuracy: {100 * mean:.1f}% ± {100 * sd:.1f}% (mean ± SD over {args.folds} folds)")
    if args.out:
        doc = {"folds": [r.to_dict() for r in reports], "mean_accuracy": mean, "sd_accuracy": sd}
        (Path(args.out) / "crossval.json").write_text(json.dumps(doc, indent=1))
    return 0


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spatiodec", description=__doc__.split("\n\n")[0])
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS thread pools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="generate a synthetic phantom dataset")
    p.add_argument("--spec", required=True, help="phantom spec JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_phantom_gen)

    def add_common(p, with_model=True):
        p.add_argument("--config", default=None, help="JSON config with model/train sections")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        p.add_argument("--window-length", dest="window_length", type=int, default=None)
        if with_model:
            p.add_argument("--variant", default=None)

    p = sub.add_parser("train", help="train one fold")
    p.add_argument("--data", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a fold's test subjects")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--out", default=None, help="write the report JSON here")
    add_common(p, with_model=False)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("transfer", help="fine-tune a pretrained body with a fresh head")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--head", required=True, help="regress or classify:N")
    p.add_argument("--class-filter", dest="class_filter", type=int, default=None)
    p.add_argument("--out", required=True)
    add_common(p, with_model=False)
    p.set_defaults(fn=_cmd_transfer)

    p = sub.add_parser("masks", help="extract and export class-averaged attention masks")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--stage", default="all", help="1..4 or all")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--out", required=True)
    add_common(p, with_model=False)
    p.set_defaults(fn=_cmd_masks)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--op", default=None)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("crossval", help="train and evaluate all folds, report mean +/- SD")
    p.add_argument("--data", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--out", default=None)
    add_common(p)
    p.set_defaults(fn=_cmd_crossval)
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    threads = args.threads
    if threads is None and os.environ.get("SPATIODEC_THREADS"):
        threads = int(os.environ["SPATIODEC_THREADS"])
    if threads is not None:
        _configure_threads(threads)

    from .errors import SpatiodecError

    try:
        return args.fn(args)
    except (SpatiodecError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
