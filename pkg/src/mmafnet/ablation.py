"""Fusion comparison: identical trainings that differ only in how the two
input streams are combined.

Four variants share one backbone/decoder configuration:

  rgb_only    single encoder over the color stream
  depth_only  single encoder over the depth stream
  smf         two encoders, streams summed after projection
  mmaf        two encoders, attention-weighted fusion

Each (variant, seed) cell trains from scratch and is scored on a held-out
split.  Sample order and augmentation draws depend only on (seed, epoch),
never on the variant, so fusion is the lone independent variable.  A run
whose loss or gradients blow up is recorded with status "failed" and kept
out of the per-variant medians.
"""

import csv
import dataclasses
import math
import statistics
import time

import numpy as np

from .errors import ConfigError, DivergenceError
from .metrics import FLOAT_FORMAT, dataset_metrics
from .model import FUSION_MODES, MmafNet, count_flops, parameter_total
from .training import TrainSchedule, evaluate_confusion, train

__all__ = [
    "AblationRun",
    "run_ablation",
    "summarize_runs",
    "write_ablation_csv",
    "median_iou_by_variant",
]

_CSV_HEADER = ("variant", "seed", "G", "M", "IoU", "W_IoU",
               "params", "flops", "status")


@dataclasses.dataclass(frozen=True)
class AblationRun:
    """One table row: a single variant trained with a single seed.

    seed is an int for training rows and the string "median" for the
    per-variant aggregate row. Metric fields are NaN when status is
    "failed" (and are then left out of aggregates and written as empty
    CSV cells).
    """

    variant: str
    seed: object
    g: float
    m: float
    iou: float
    w_iou: float
    params: int
    flops: int
    status: str

    @property
    def ok(self):
        return self.status == "ok"


def _image_hw(samples):
    first = samples[0]
    rgb = first.rgb if hasattr(first, "rgb") else first[0]
    return int(rgb.shape[-2]), int(rgb.shape[-1])


def run_ablation(train_set, eval_set, model_config, *, seeds,
                 variants=FUSION_MODES, epochs=5, schedule=None,
                 batch_size=4, void_label=255, augment_fn=None,
                 progress=None):
    """Train every variant with every seed; return one AblationRun per cell.

    train_set/eval_set are sample sequences (as accepted by training.train).
    model_config supplies everything except fusion_mode, which is overridden
    per variant. progress, if given, is called with a one-line string after
    each cell finishes.
    """
    if len(seeds) < 1:
        raise ConfigError("ablation needs at least one seed")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("ablation seeds must be distinct")
    for variant in variants:
        if variant not in FUSION_MODES:
            raise ConfigError(f"unknown ablation variant {variant!r}")
    if not train_set or not eval_set:
        raise ConfigError("ablation needs non-empty train and eval sets")
    schedule = schedule or TrainSchedule()
    height, width = _image_hw(train_set)

    runs = []
    for variant in variants:
        config = dataclasses.replace(model_config, fusion_mode=variant)
        for seed in seeds:
            started = time.monotonic()
            net = MmafNet(config, rng=np.random.default_rng(int(seed)))
            params = parameter_total(net)
            flops = count_flops(net, (1, height, width))
            try:
                train(net, train_set, [], epochs=epochs, schedule=schedule,
                      batch_size=batch_size, seed=int(seed),
                      augment_fn=augment_fn)
            except DivergenceError:
                run = AblationRun(variant, int(seed), math.nan, math.nan,
                                  math.nan, math.nan, params, flops, "failed")
            else:
                cm = evaluate_confusion(net, eval_set, void_label=void_label)
                scores = dataset_metrics(cm)
                run = AblationRun(variant, int(seed), scores.g, scores.m,
                                  scores.iou, scores.w_iou, params, flops,
                                  "ok")
            runs.append(run)
            if progress is not None:
                elapsed = time.monotonic() - started
                shown = "failed" if not run.ok else FLOAT_FORMAT % run.iou
                progress(f"{variant} seed={seed} IoU={shown} "
                         f"({elapsed:.1f}s)")
    return runs


def summarize_runs(runs):
    """One median row per variant, in first-seen variant order.

    Medians are over the runs that finished; a variant whose every seed
    failed gets NaN metrics and status "failed".
    """
    by_variant = {}
    for run in runs:
        if run.seed == "median":
            continue
        by_variant.setdefault(run.variant, []).append(run)

    summaries = []
    for variant, cells in by_variant.items():
        finished = [c for c in cells if c.ok]
        if finished:
            summaries.append(AblationRun(
                variant, "median",
                statistics.median(c.g for c in finished),
                statistics.median(c.m for c in finished),
                statistics.median(c.iou for c in finished),
                statistics.median(c.w_iou for c in finished),
                cells[0].params, cells[0].flops, "ok"))
        else:
            summaries.append(AblationRun(
                variant, "median", math.nan, math.nan, math.nan, math.nan,
                cells[0].params, cells[0].flops, "failed"))
    return summaries


def median_iou_by_variant(runs):
    """variant -> median IoU over finished seeds (NaN if none finished)."""
    return {row.variant: row.iou for row in summarize_runs(runs)}


def _metric_cell(run, value):
    return "" if not run.ok else FLOAT_FORMAT % value


def write_ablation_csv(path, runs):
    """CSV with one row per (variant, seed) then one median row per variant."""
    summaries = summarize_runs(runs)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(_CSV_HEADER)
        for run in list(runs) + summaries:
            writer.writerow((
                run.variant, run.seed,
                _metric_cell(run, run.g), _metric_cell(run, run.m),
                _metric_cell(run, run.iou), _metric_cell(run, run.w_iou),
                run.params, run.flops, run.status))
