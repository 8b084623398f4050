import hashlib
import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from spatiodec.cli import main
from spatiodec.data import make_splits
from spatiodec.errors import ConfigError
from spatiodec.masks import export_mask, extract_masks, read_raw_mask
from spatiodec.model import build
from spatiodec.training import TrainConfig


@pytest.fixture()
def mask_setup(tiny_phantom, tiny_model_config):
    _, manifest = tiny_phantom
    split = make_splits(manifest, 5, 0, seed=0)
    cfg = TrainConfig(batch_size=4, epochs=1, window_length=8)
    model = build(tiny_model_config)
    return model, manifest, split, cfg


class TestExtractMasks:
    def test_cardinality_per_stage(self, mask_setup):
        model, manifest, split, cfg = mask_setup
        volumes = extract_masks(model, manifest, split, cfg, stage_filter="all")
        classes = {e.class_label for e in manifest.entries_for(split.test)}
        per_stage = len(classes) * model.config.stage_channels[0]
        assert len(volumes) == 4 * per_stage
        stage3 = [v for v in volumes if v.stage_index == 3]
        assert len(stage3) == per_stage

    def test_constant_hook_gives_constant_mean(self, mask_setup):
        model, manifest, split, cfg = mask_setup
        volumes = extract_masks(
            model, manifest, split, cfg, stage_filter=2, attention_hook=lambda s: np.full(s, 0.5)
        )
        for mv in volumes:
            assert_allclose(mv.A_mean, 0.5, rtol=1e-5)

    def test_mask_extents_match_input(self, mask_setup):
        model, manifest, split, cfg = mask_setup
        volumes = extract_masks(model, manifest, split, cfg, stage_filter=1)
        assert volumes[0].A_mean.shape == model.config.input_extents[1:]

    def test_masks_stay_in_unit_interval(self, mask_setup):
        model, manifest, split, cfg = mask_setup
        for mv in extract_masks(model, manifest, split, cfg, stage_filter=4):
            assert mv.A_mean.min() > 0.0 and mv.A_mean.max() < 1.0

    def test_no_attention_variant_rejected(self, mask_setup, tiny_model_config):
        import dataclasses

        _, manifest, split, cfg = mask_setup
        plain = build(dataclasses.replace(tiny_model_config, variant="resnet4d"))
        with pytest.raises(ConfigError, match="attention"):
            extract_masks(plain, manifest, split, cfg)


class TestExportMask:
    def test_files_and_round_trip(self, mask_setup, tmp_path):
        model, manifest, split, cfg = mask_setup
        mv = extract_masks(model, manifest, split, cfg, stage_filter=3)[0]
        paths = export_mask(mv, tmp_path)
        sidecar = json.loads((tmp_path / f"stage3_ch000_class{mv.class_label}.json").read_text())
        assert sidecar["min"] == float(mv.A_mean.min())
        assert sidecar["max"] == float(mv.A_mean.max())
        assert_array_equal(read_raw_mask(paths["raw"], sidecar["shape"]), mv.A_mean)
        assert_array_equal(read_raw_mask(paths["logit_raw"], sidecar["shape"]), mv.logit_mean)

    def test_montage_dimensions(self, mask_setup, tmp_path):
        model, manifest, split, cfg = mask_setup
        mv = extract_masks(model, manifest, split, cfg, stage_filter=1)[0]
        paths = export_mask(mv, tmp_path)
        header = open(paths["montage"], "rb").read(32).split(b"\n")
        assert header[0] == b"P5"
        w, h = map(int, header[1].split())
        H, W, D = mv.A_mean.shape
        cols = int(np.ceil(np.sqrt(D)))
        rows = int(np.ceil(D / cols))
        assert (w, h) == (cols * W, rows * H)


def _write_config(path, model_over=None, train_over=None):
    doc = {"model": model_over or {}, "train": train_over or {}}
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """Generate a small dataset and train one checkpoint through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    spec = {
        "preset": "desk",
        "num_classes": 3,
        "num_subjects": 10,
        "blocks_per_subject_per_class": 1,
        "block_length": [20, 24, 19],
        "snr": 2.0,
        "seed": 412,
    }
    spec_path = root / "phantom.json"
    spec_path.write_text(json.dumps(spec))
    data = root / "data"
    assert main(["phantom-gen", "--spec", str(spec_path), "--out", str(data)]) == 0

    cfg_path = root / "config.json"
    _write_config(
        cfg_path,
        model_over={
            "conv_channels": 2,
            "temporal_kernel": 3,
            "stage_channels": [4, 4, 4, 4],
            "stage_strides": [1, 2, 1, 1],
            "num_classes": 3,
        },
        train_over={"epochs": 1, "batch_size": 4, "window_length": 8, "lr": 1e-3},
    )
    run = root / "run"
    assert main(["train", "--data", str(data), "--config", str(cfg_path), "--fold", "0", "--out", str(run)]) == 0
    return root, data, cfg_path, run


class TestCli:
    def test_train_outputs(self, cli_workspace):
        _, _, _, run = cli_workspace
        assert (run / "model.ckpt").exists()
        assert (run / "history.csv").exists()
        echoed = json.loads((run / "config.json").read_text())
        assert echoed["train"]["epochs"] == 1
        assert echoed["model"]["input_extents"] == [8, 16, 20, 18]

    def test_eval_runs_and_writes_report(self, cli_workspace, capsys, tmp_path):
        _, data, cfg_path, run = cli_workspace
        report = tmp_path / "report.json"
        code = main(
            ["eval", "--ckpt", str(run / "model.ckpt"), "--data", str(data), "--fold", "0",
             "--config", str(cfg_path), "--out", str(report)]
        )
        assert code == 0
        assert "instance accuracy" in capsys.readouterr().out
        assert "accuracy" in json.loads(report.read_text())

    def test_masks_inference_only(self, cli_workspace, tmp_path):
        _, data, cfg_path, run = cli_workspace
        ckpt = run / "model.ckpt"
        before = hashlib.sha256(ckpt.read_bytes()).hexdigest()
        out = tmp_path / "masks"
        code = main(
            ["masks", "--ckpt", str(ckpt), "--data", str(data), "--stage", "3",
             "--config", str(cfg_path), "--out", str(out)]
        )
        assert code == 0
        assert hashlib.sha256(ckpt.read_bytes()).hexdigest() == before
        assert sorted(out.glob("stage3_*.pgm"))

    def test_transfer_regress(self, cli_workspace, tmp_path, capsys):
        _, data, cfg_path, run = cli_workspace
        out = tmp_path / "transfer"
        code = main(
            ["transfer", "--ckpt", str(run / "model.ckpt"), "--data", str(data),
             "--head", "regress", "--config", str(cfg_path), "--out", str(out)]
        )
        assert code == 0
        assert "spearman" in capsys.readouterr().out
        assert (out / "model.ckpt").exists()

    def test_gradcheck_single_op(self, capsys):
        assert main(["gradcheck", "--op", "relu"]) == 0
        out = capsys.readouterr().out
        assert "relu" in out and "ok" in out

    def test_threads_flag_accepted(self, capsys, monkeypatch):
        import os

        monkeypatch.setattr(os, "environ", dict(os.environ))
        assert main(["--threads", "1", "gradcheck", "--op", "sigmoid"]) == 0
        assert os.environ["OMP_NUM_THREADS"] == "1"

    def test_crossval_reports_mean_and_sd(self, cli_workspace, capsys, tmp_path):
        _, data, cfg_path, _ = cli_workspace
        out = tmp_path / "cv"
        code = main(
            ["crossval", "--data", str(data), "--config", str(cfg_path), "--folds", "5", "--out", str(out)]
        )
        assert code == 0
        text = capsys.readouterr().out
        assert "±" in text and "mean" in text
        doc = json.loads((out / "crossval.json").read_text())
        assert len(doc["folds"]) == 5

    def test_missing_data_dir_exits_one(self, capsys):
        code = main(["train", "--data", "/nonexistent/dir", "--out", "/tmp/unused_out"])
        assert code == 1
        assert "/nonexistent/dir" in capsys.readouterr().err

    def test_unknown_subcommand_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_unknown_flag_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            main(["gradcheck", "--bogus"])
        assert exc.value.code == 2
