"""Tests for the fusion-variant comparison harness."""

import csv
import math

import numpy as np
import pytest

from mmafnet.ablation import (
    AblationRun,
    median_iou_by_variant,
    run_ablation,
    summarize_runs,
    write_ablation_csv,
)
from mmafnet.errors import ConfigError
from mmafnet.fusion import afb_param_count
from mmafnet.model import MmafNet, ModelConfig, parameter_total
from mmafnet.training import TrainSchedule


def tiny_config(**overrides):
    base = dict(num_classes=2, widths=(4, 8, 16, 32), decoder_width=4,
                reduction=4, spatial_kernel=3, units_per_stage=1)
    base.update(overrides)
    return ModelConfig(**base)


def make_samples(rng, count, size=32):
    """Images whose left/right halves carry distinct colors and depths."""
    samples = []
    for _ in range(count):
        rgb = np.zeros((3, size, size), dtype=np.float32)
        depth = np.zeros((1, size, size), dtype=np.float32)
        labels = np.zeros((size, size), dtype=np.int64)
        half = size // 2
        rgb[:, :, :half] = 0.2
        rgb[:, :, half:] = 0.8
        depth[:, :, half:] = 1.0
        labels[:, half:] = 1
        rgb += rng.normal(0.0, 0.02, rgb.shape).astype(np.float32)
        samples.append((rgb, depth, labels))
    return samples


class TestRunAblation:
    def test_grid_and_csv(self, tmp_path):
        rng = np.random.default_rng(0)
        train_set = make_samples(rng, 4)
        eval_set = make_samples(rng, 2)
        runs = run_ablation(train_set, eval_set, tiny_config(),
                            seeds=(0, 1), variants=("rgb_only", "mmaf"),
                            epochs=1, schedule=TrainSchedule(lr=0.01),
                            batch_size=2)
        assert [(r.variant, r.seed) for r in runs] == [
            ("rgb_only", 0), ("rgb_only", 1), ("mmaf", 0), ("mmaf", 1)]
        assert all(r.status == "ok" for r in runs)
        for r in runs:
            for value in (r.g, r.m, r.iou, r.w_iou):
                assert 0.0 <= value <= 1.0
            assert r.params > 0 and r.flops > 0

        path = tmp_path / "ablation.csv"
        write_ablation_csv(path, runs)
        with open(path, newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["variant", "seed", "G", "M", "IoU", "W_IoU",
                           "params", "flops", "status"]
        assert len(rows) == 1 + 4 + 2  # header, cells, medians
        assert rows[5][:2] == ["rgb_only", "median"]
        assert rows[6][:2] == ["mmaf", "median"]

    def test_param_delta_is_attention_block_total(self):
        rng = np.random.default_rng(1)
        train_set = make_samples(rng, 2)
        eval_set = make_samples(rng, 1)
        config = tiny_config()
        runs = run_ablation(train_set, eval_set, config, seeds=(0,),
                            variants=("smf", "mmaf"), epochs=1,
                            schedule=TrainSchedule(lr=0.01), batch_size=2)
        by_variant = {r.variant: r for r in runs}
        expected = 4 * afb_param_count(config.decoder_width, config.reduction,
                                       config.spatial_kernel)
        assert by_variant["mmaf"].params - by_variant["smf"].params == expected
        # counted from live nets, not from the formula
        assert by_variant["mmaf"].params == parameter_total(
            MmafNet(tiny_config(fusion_mode="mmaf"),
                    rng=np.random.default_rng(0)))

    def test_single_stream_variants_have_equal_params(self):
        # symmetric config: both streams carry one channel, so the two
        # single-stream encoders are structurally identical
        rng = np.random.default_rng(2)
        config = tiny_config(rgb_channels=1)
        samples = []
        for s in make_samples(rng, 3):
            samples.append((s[0][:1], s[1], s[2]))
        runs = run_ablation(samples[:2], samples[2:], config, seeds=(0,),
                            variants=("rgb_only", "depth_only"), epochs=1,
                            schedule=TrainSchedule(lr=0.01), batch_size=2)
        assert runs[0].params == runs[1].params

    def test_data_order_identical_across_variants(self):
        rng = np.random.default_rng(3)
        train_set = make_samples(rng, 6)
        eval_set = make_samples(rng, 1)
        index_of = {id(s): i for i, s in enumerate(train_set)}
        seen = []

        def spy(sample, rng):
            seen.append(index_of[id(sample)])
            return sample

        run_ablation(train_set, eval_set, tiny_config(), seeds=(5,),
                     variants=("rgb_only", "depth_only"), epochs=2,
                     schedule=TrainSchedule(lr=0.001), batch_size=2,
                     augment_fn=spy)
        per_cell = len(train_set) * 2  # 2 epochs
        assert len(seen) == per_cell * 2
        assert seen[:per_cell] == seen[per_cell:]

    def test_progress_called_per_cell(self):
        rng = np.random.default_rng(4)
        lines = []
        run_ablation(make_samples(rng, 2), make_samples(rng, 1),
                     tiny_config(), seeds=(0, 1), variants=("rgb_only",),
                     epochs=1, schedule=TrainSchedule(lr=0.01), batch_size=2,
                     progress=lines.append)
        assert len(lines) == 2
        assert "rgb_only" in lines[0] and "seed=0" in lines[0]

    def test_rejections(self):
        rng = np.random.default_rng(5)
        samples = make_samples(rng, 2)
        with pytest.raises(ConfigError, match="seed"):
            run_ablation(samples, samples, tiny_config(), seeds=())
        with pytest.raises(ConfigError, match="distinct"):
            run_ablation(samples, samples, tiny_config(), seeds=(1, 1))
        with pytest.raises(ConfigError, match="variant"):
            run_ablation(samples, samples, tiny_config(), seeds=(0,),
                         variants=("mmaf", "gated"))
        with pytest.raises(ConfigError, match="non-empty"):
            run_ablation([], samples, tiny_config(), seeds=(0,))
        with pytest.raises(ConfigError, match="non-empty"):
            run_ablation(samples, [], tiny_config(), seeds=(0,))


def _row(variant, seed, iou, status="ok", params=10, flops=20):
    value = math.nan if status == "failed" else iou
    return AblationRun(variant, seed, value, value, value, value,
                       params, flops, status)


class TestSummaries:
    def test_median_over_finished_seeds(self):
        runs = [_row("mmaf", 0, 0.6), _row("mmaf", 1, 0.9),
                _row("mmaf", 2, 0.7)]
        (summary,) = summarize_runs(runs)
        assert summary.seed == "median"
        assert summary.iou == pytest.approx(0.7)
        assert summary.status == "ok"

    def test_failed_runs_excluded(self):
        runs = [_row("smf", 0, 0.2), _row("smf", 1, 0.0, status="failed"),
                _row("smf", 2, 0.4)]
        (summary,) = summarize_runs(runs)
        assert summary.iou == pytest.approx(0.3)
        assert summary.status == "ok"

    def test_all_failed_variant_flagged(self):
        runs = [_row("smf", 0, 0.0, status="failed"),
                _row("smf", 1, 0.0, status="failed")]
        (summary,) = summarize_runs(runs)
        assert summary.status == "failed"
        assert math.isnan(summary.iou)

    def test_median_iou_by_variant(self):
        runs = [_row("mmaf", 0, 0.8), _row("mmaf", 1, 0.6),
                _row("smf", 0, 0.5), _row("smf", 1, 0.7)]
        medians = median_iou_by_variant(runs)
        assert medians["mmaf"] == pytest.approx(0.7)
        assert medians["smf"] == pytest.approx(0.6)

    def test_failed_rows_have_empty_metric_cells(self, tmp_path):
        runs = [_row("smf", 0, 0.25), _row("smf", 1, 0.0, status="failed")]
        path = tmp_path / "ablation.csv"
        write_ablation_csv(path, runs)
        with open(path, newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[1] == ["smf", "0", "0.250000", "0.250000", "0.250000",
                           "0.250000", "10", "20", "ok"]
        assert rows[2] == ["smf", "1", "", "", "", "", "10", "20", "failed"]
        # median over the single finished seed
        assert rows[3] == ["smf", "median", "0.250000", "0.250000",
                           "0.250000", "0.250000", "10", "20", "ok"]
