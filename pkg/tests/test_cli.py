"""End-to-end tests for the command line front end (in-process)."""

import csv
import os
import re

import numpy as np
import pytest

from mmafnet.cli import main
from mmafnet.data import load_manifest
from mmafnet.model import load_checkpoint
from mmafnet.pnm import read_pgm

TINY_MODEL = """
[model]
classes = 3
widths = 4, 8, 16, 32
decoder_width = 4
reduction = 4
spatial_kernel = 3
units_per_stage = 1
"""

TINY_SYNTH = """
[synth]
image_size = 32
num_images = 12
num_shape_classes = 2
seed = 5
"""


def write_config(tmp_path, body, name="run.ini"):
    path = tmp_path / name
    path.write_text(body, encoding="utf-8")
    return str(path)


def tree_bytes(root):
    snapshot = {}
    for base, _dirs, files in os.walk(root):
        for name in files:
            full = os.path.join(base, name)
            with open(full, "rb") as handle:
                snapshot[os.path.relpath(full, root)] = handle.read()
    return snapshot


@pytest.fixture()
def synth_dir(tmp_path):
    config = write_config(tmp_path, TINY_MODEL + TINY_SYNTH + f"""
[data]
root = {tmp_path / 'ds'}

[train]
lr = 0.005
epochs = 2
batch = 2
seed = 1
""")
    assert main(["synth", "--config", config, "--out",
                 str(tmp_path / "ds")]) == 0
    return tmp_path, config


class TestSynthCommand:
    def test_writes_dataset_and_resolved_config(self, synth_dir):
        tmp_path, _config = synth_dir
        manifest = load_manifest(str(tmp_path / "ds"))
        assert manifest.num_classes == 3
        assert os.path.exists(tmp_path / "ds" / "config.resolved.ini")

    def test_refuses_non_empty_out(self, synth_dir, capsys):
        tmp_path, config = synth_dir
        assert main(["synth", "--config", config, "--out",
                     str(tmp_path / "ds")]) == 2
        assert "non-empty" in capsys.readouterr().err

    def test_identical_config_identical_trees(self, tmp_path):
        config = write_config(tmp_path, TINY_SYNTH)
        assert main(["synth", "--config", config, "--out",
                     str(tmp_path / "a")]) == 0
        assert main(["synth", "--config", config, "--out",
                     str(tmp_path / "b")]) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_seed_override_changes_data(self, tmp_path):
        config = write_config(tmp_path, TINY_SYNTH)
        assert main(["synth", "--config", config, "--out",
                     str(tmp_path / "a"), "--seed", "5"]) == 0
        assert main(["synth", "--config", config, "--out",
                     str(tmp_path / "b"), "--seed", "6"]) == 0
        trees = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
        assert trees[0].keys() == trees[1].keys()
        assert trees[0] != trees[1]

    def test_malformed_ini_exit_2_with_line(self, tmp_path, capsys):
        config = write_config(tmp_path, "[synth]\nnot a key value pair\n")
        assert main(["synth", "--config", config, "--out",
                     str(tmp_path / "x")]) == 2
        err = capsys.readouterr().err
        assert re.search(r"line.*2", err)

    def test_unknown_key_exit_2(self, tmp_path, capsys):
        config = write_config(tmp_path, "[synth]\nnum_imgs = 5\n")
        assert main(["synth", "--config", config, "--out",
                     str(tmp_path / "x")]) == 2
        assert "num_imgs" in capsys.readouterr().err


class TestTrainCommand:
    def test_train_writes_log_and_checkpoint(self, synth_dir):
        tmp_path, config = synth_dir
        out = tmp_path / "run"
        assert main(["train", "--config", config, "--out", str(out)]) == 0
        with open(out / "train_log.csv", newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["epoch", "loss", "val_miou", "lr"]
        assert len(rows) == 3  # header + 2 epochs
        net, extra = load_checkpoint(out / "checkpoint.bin")
        assert extra == {"epoch": 2}
        assert os.path.exists(out / "config.resolved.ini")

    def test_identical_seed_identical_logs(self, synth_dir):
        tmp_path, config = synth_dir
        a, b = tmp_path / "run_a", tmp_path / "run_b"
        assert main(["train", "--config", config, "--out", str(a)]) == 0
        assert main(["train", "--config", config, "--out", str(b)]) == 0
        assert (a / "train_log.csv").read_bytes() == \
            (b / "train_log.csv").read_bytes()
        assert (a / "checkpoint.bin").read_bytes() == \
            (b / "checkpoint.bin").read_bytes()

    def test_resume_continues_epoch_numbering(self, synth_dir, tmp_path):
        _tmp, config = synth_dir
        base = os.path.dirname(config)
        text = open(config).read()
        three = write_config(tmp_path, text.replace("epochs = 2", "epochs = 3"),
                             name="three.ini")
        out = tmp_path / "resume"
        assert main(["train", "--config", config, "--out", str(out)]) == 0
        assert main(["train", "--config", three, "--out", str(out)]) == 0
        with open(out / "train_log.csv", newline="") as handle:
            rows = list(csv.reader(handle))
        assert [r[0] for r in rows] == ["epoch", "1", "2", "3"]
        _net, extra = load_checkpoint(out / "checkpoint.bin")
        assert extra == {"epoch": 3}

    def test_completed_run_is_idempotent(self, synth_dir, capsys):
        tmp_path, config = synth_dir
        out = tmp_path / "done"
        assert main(["train", "--config", config, "--out", str(out)]) == 0
        before = (out / "checkpoint.bin").read_bytes()
        assert main(["train", "--config", config, "--out", str(out)]) == 0
        assert "nothing to do" in capsys.readouterr().out
        assert (out / "checkpoint.bin").read_bytes() == before

    def test_class_mismatch_exit_2(self, synth_dir, tmp_path, capsys):
        _tmp, config = synth_dir
        text = open(config).read().replace("classes = 3", "classes = 5")
        bad = write_config(tmp_path, text, name="bad.ini")
        assert main(["train", "--config", bad, "--out",
                     str(tmp_path / "x")]) == 2
        assert "classes" in capsys.readouterr().err


class TestEvalCommand:
    @pytest.fixture()
    def trained(self, synth_dir):
        tmp_path, config = synth_dir
        out = tmp_path / "run"
        assert main(["train", "--config", config, "--out", str(out)]) == 0
        return tmp_path, config, str(out / "checkpoint.bin")

    def test_eval_outputs(self, trained):
        tmp_path, config, checkpoint = trained
        out = tmp_path / "metrics"
        assert main(["eval", "--config", config, "--out", str(out),
                     "--checkpoint", checkpoint]) == 0
        manifest = load_manifest(str(tmp_path / "ds"))
        test_ids = manifest.split_ids("test")

        with open(out / "dataset_metrics.csv", newline="") as handle:
            rows = list(csv.reader(handle))
        assert [r[0] for r in rows] == ["metric", "G", "M", "IoU", "W_IoU"]

        with open(out / "per_image.csv", newline="") as handle:
            per_image = list(csv.reader(handle))
        assert per_image[0] == ["image_id", "G", "M", "IoU"]
        assert len(per_image) - 1 == len(test_ids)  # no all-void images here

        # prediction maps reload to the class alphabet
        for sample_id in test_ids:
            pred = read_pgm(out / "predictions" / f"{sample_id}.pgm")
            assert pred.dtype == np.uint8
            assert set(np.unique(pred)) <= {0, 1, 2}

        with open(out / "bde.csv", newline="") as handle:
            bde = list(csv.reader(handle))
        assert bde[0] == ["class_id", "image_id", "bde"]
        assert os.path.exists(out / "config.resolved.ini")

    def test_eval_class_mismatch_exit_2(self, trained, tmp_path, capsys):
        _tmp, config, checkpoint = trained
        text = open(config).read().replace("num_shape_classes = 2",
                                           "num_shape_classes = 1")
        text = text.replace("classes = 3", "classes = 2")
        other = write_config(tmp_path, text, name="other.ini")
        other_root = tmp_path / "ds2"
        assert main(["synth", "--config", other, "--out",
                     str(other_root)]) == 0
        text2 = open(other).read().replace(
            f"root = {_tmp / 'ds'}", f"root = {other_root}")
        mismatched = write_config(tmp_path, text2, name="mismatch.ini")
        assert main(["eval", "--config", mismatched, "--out",
                     str(tmp_path / "m"), "--checkpoint", checkpoint]) == 2
        assert "classes" in capsys.readouterr().err

    def test_eval_bad_checkpoint_exit_2(self, trained, tmp_path, capsys):
        _tmp, config, checkpoint = trained
        broken = tmp_path / "broken.bin"
        data = bytearray(open(checkpoint, "rb").read())
        data[0] ^= 0xFF
        broken.write_bytes(bytes(data))
        assert main(["eval", "--config", config, "--out",
                     str(tmp_path / "m"), "--checkpoint", str(broken)]) == 2


class TestReportCommand:
    @pytest.fixture()
    def evaluated(self, synth_dir):
        tmp_path, config = synth_dir
        run = tmp_path / "run"
        metrics = tmp_path / "metrics"
        assert main(["train", "--config", config, "--out", str(run)]) == 0
        assert main(["eval", "--config", config, "--out", str(metrics),
                     "--checkpoint", str(run / "checkpoint.bin")]) == 0
        return tmp_path, config, str(metrics)

    def test_report_outputs(self, evaluated):
        tmp_path, config, metrics = evaluated
        out = tmp_path / "report"
        assert main(["report", "--config", config, "--out", str(out),
                     "--metrics", metrics]) == 0
        for name in ("cdf_G", "cdf_M", "cdf_IoU"):
            assert os.path.exists(out / f"{name}.svg")
            assert os.path.exists(out / f"{name}.csv")
        svg = (out / "cdf_G.svg").read_text()
        assert "<svg" in svg and 'id="curve"' in svg
        for token in ("min=", "max=", "median=", "mean=", "std="):
            assert token in svg
        assert os.path.exists(out / "config.resolved.ini")

    def test_report_deterministic(self, evaluated):
        tmp_path, config, metrics = evaluated
        a, b = tmp_path / "rep_a", tmp_path / "rep_b"
        for out in (a, b):
            assert main(["report", "--config", config, "--out", str(out),
                         "--metrics", metrics]) == 0
        assert tree_bytes(a) == tree_bytes(b)

    def test_report_empty_inputs_exit_2(self, tmp_path, capsys):
        config = write_config(tmp_path, "")
        metrics = tmp_path / "empty"
        metrics.mkdir()
        (metrics / "per_image.csv").write_text("image_id,G,M,IoU\n")
        (metrics / "bde.csv").write_text("class_id,image_id,bde\n")
        assert main(["report", "--config", config, "--out",
                     str(tmp_path / "rep"), "--metrics", str(metrics)]) == 2
        assert "no data rows" in capsys.readouterr().err

    def test_report_missing_inputs_exit_2(self, tmp_path, capsys):
        config = write_config(tmp_path, "")
        metrics = tmp_path / "nothing"
        metrics.mkdir()
        assert main(["report", "--config", config, "--out",
                     str(tmp_path / "rep"), "--metrics", str(metrics)]) == 2
        assert "missing input" in capsys.readouterr().err


class TestAblateCommand:
    def test_ablate_writes_table(self, synth_dir, tmp_path):
        _tmp, config = synth_dir
        text = open(config).read() + """
[ablation]
variants = rgb_only, mmaf
seeds = 0, 1
epochs = 1
"""
        cfg = write_config(tmp_path, text, name="ablate.ini")
        out = tmp_path / "ablation"
        assert main(["ablate", "--config", cfg, "--out", str(out)]) == 0
        with open(out / "ablation.csv", newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["variant", "seed", "G", "M", "IoU", "W_IoU",
                           "params", "flops", "status"]
        # 2 variants x 2 seeds + 2 medians
        assert len(rows) == 1 + 4 + 2
        assert os.path.exists(out / "config.resolved.ini")


class TestExitCodes:
    def test_missing_config_exit_2(self, tmp_path, capsys):
        assert main(["synth", "--config", str(tmp_path / "no.ini"),
                     "--out", str(tmp_path / "x")]) == 2
        assert "cannot read" in capsys.readouterr().err

    def test_unknown_command_exit_2(self):
        assert main(["frobnicate"]) == 2

    def test_missing_required_flag_exit_2(self):
        assert main(["synth"]) == 2
