"""Command line front end: `mmaf synth|train|eval|ablate|report`.

Anything that affects numbers lives in the INI config; flags only pick the
config file, output locations, and an optional seed override.  Every
command drops the fully resolved configuration (defaults included) next to
its outputs, so a result directory is always self-describing.

Exit codes: 0 success, 2 user or configuration error, 3 numeric failure
(training divergence).
"""

import argparse
import csv
import os
import sys

import numpy as np

from .ablation import run_ablation, write_ablation_csv
from .config import load_run_config, with_seed, write_resolved_config
from .data import AugmentConfig, augment_sample, load_manifest, load_sample
from .errors import (
    AllVoidImage,
    ConfigError,
    ContractError,
    DivergenceError,
    FormatError,
)
from .metrics import (
    ConfusionMatrix,
    bde_report,
    dataset_metrics,
    metric_cdf,
    per_image_metrics,
    write_bde_csv,
    write_cdf_csv,
    write_dataset_metrics_csv,
    write_per_image_csv,
)
from .model import MmafNet, load_checkpoint, predict, save_checkpoint
from .pnm import write_pgm
from .plots import write_cdf_svg
from .training import evaluate_confusion, train

__all__ = ["main", "console_main"]

_RESOLVED_NAME = "config.resolved.ini"
_CHECKPOINT_NAME = "checkpoint.bin"
_LOG_NAME = "train_log.csv"


def _load_config(args):
    config = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        config = with_seed(config, args.seed)
    return config


def _ensure_out(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    return out_dir


def _echo_config(config, out_dir):
    write_resolved_config(config, os.path.join(out_dir, _RESOLVED_NAME))


def _check_class_counts(model_classes, manifest):
    if model_classes != manifest.num_classes:
        raise ContractError(
            f"model expects {model_classes} classes but the dataset "
            f"manifest declares {manifest.num_classes}")


def _load_split(manifest, split):
    return [load_sample(manifest, sample_id)
            for sample_id in manifest.split_ids(split)]


def _augment_fn(config, samples):
    if not config.augment or not samples:
        return None
    height, width = samples[0].labels.shape
    aug = AugmentConfig(out_h=height, out_w=width)
    void = config.model.void_label

    def apply(sample, rng):
        return augment_sample(sample, aug, rng, void_label=void)

    return apply


def cmd_synth(args):
    config = _load_config(args)
    out_dir = args.out
    if os.path.isdir(out_dir) and any(os.scandir(out_dir)):
        raise ConfigError(f"refusing to write into non-empty directory {out_dir}")
    from .synth import synth_generate

    manifest = synth_generate(config.synth, out_dir)
    _echo_config(config, out_dir)
    sizes = {name: len(ids) for name, ids in manifest.splits.items()}
    print(f"wrote {sum(sizes.values())} images to {out_dir} (splits {sizes})")
    return 0


def cmd_train(args):
    config = _load_config(args)
    out_dir = _ensure_out(args.out)
    manifest = load_manifest(config.data_root)
    _check_class_counts(config.model.num_classes, manifest)

    train_samples = _load_split(manifest, config.train_split)
    val_samples = _load_split(manifest, config.val_split)

    checkpoint_path = os.path.join(out_dir, _CHECKPOINT_NAME)
    start_epoch = 1
    if os.path.exists(checkpoint_path):
        net, extra = load_checkpoint(checkpoint_path)
        if net.config != config.model:
            raise ConfigError(
                f"checkpoint {checkpoint_path} was trained with a different "
                f"[model] configuration; refusing to resume")
        start_epoch = int(extra.get("epoch", 0)) + 1
        if start_epoch > config.epochs:
            _echo_config(config, out_dir)
            print(f"checkpoint already at epoch {start_epoch - 1}; nothing to do")
            return 0
        print(f"resuming from epoch {start_epoch}")
    else:
        net = MmafNet(config.model, rng=np.random.default_rng(config.seed))

    history = train(
        net, train_samples, val_samples, epochs=config.epochs,
        schedule=config.schedule, batch_size=config.batch, seed=config.seed,
        log_path=os.path.join(out_dir, _LOG_NAME),
        checkpoint_path=checkpoint_path, start_epoch=start_epoch,
        augment_fn=_augment_fn(config, train_samples))
    _echo_config(config, out_dir)
    last = history[-1]
    print(f"trained to epoch {last.epoch}: loss {last.loss:.6f}, "
          f"val mIoU {last.val_miou:.6f}")
    return 0


def cmd_eval(args):
    config = _load_config(args)
    out_dir = _ensure_out(args.out)
    net, _extra = load_checkpoint(args.checkpoint)
    manifest = load_manifest(config.data_root)
    _check_class_counts(net.config.num_classes, manifest)

    ids = manifest.split_ids(config.eval_split)
    if not ids:
        raise ConfigError(f"split {config.eval_split!r} is empty")

    predictions_dir = os.path.join(out_dir, "predictions")
    os.makedirs(predictions_dir, exist_ok=True)

    num_classes = net.config.num_classes
    void = manifest.void_label
    cm = ConfusionMatrix(num_classes)
    per_image_rows = []
    bde_pairs = []
    excluded = 0
    batch = max(1, config.batch)
    for start in range(0, len(ids), batch):
        chunk = ids[start:start + batch]
        samples = [load_sample(manifest, sample_id) for sample_id in chunk]
        preds = predict(_forward(net, samples))
        for sample_id, sample, pred in zip(chunk, samples, preds):
            write_pgm(os.path.join(predictions_dir, sample_id + ".pgm"),
                      pred.astype(np.uint8))
            cm.accumulate(pred, sample.labels, void_label=void)
            try:
                scores = per_image_metrics(pred, sample.labels, num_classes,
                                           void_label=void)
            except AllVoidImage:
                excluded += 1
            else:
                per_image_rows.append((sample_id, scores))
            bde_pairs.append((sample_id, pred, sample.labels))

    scores = dataset_metrics(cm)
    write_dataset_metrics_csv(os.path.join(out_dir, "dataset_metrics.csv"),
                              scores)
    write_per_image_csv(os.path.join(out_dir, "per_image.csv"), per_image_rows)

    report = bde_report([(pred, gt) for _, pred, gt in bde_pairs], num_classes)
    bde_rows = [(class_id, bde_pairs[pair_index][0], value)
                for class_id, pair_index, value in report.records]
    write_bde_csv(os.path.join(out_dir, "bde.csv"), bde_rows)

    _echo_config(config, out_dir)
    print(f"evaluated {len(ids)} images ({excluded} without ground truth): "
          f"G {scores.g:.6f}, M {scores.m:.6f}, IoU {scores.iou:.6f}, "
          f"W_IoU {scores.w_iou:.6f}")
    return 0


def _forward(net, samples):
    from .autodiff import Tensor

    was_training = net.training
    net.eval()
    try:
        rgb = Tensor(np.stack([s.rgb for s in samples]).astype(net.dtype))
        depth = Tensor(np.stack([s.depth for s in samples]).astype(net.dtype))
        return net.forward(rgb if net.config.uses_rgb else None,
                           depth if net.config.uses_depth else None)
    finally:
        if was_training:
            net.train()


def _read_csv_rows(path, expected_header):
    if not os.path.exists(path):
        raise ConfigError(f"missing input {path}")
    with open(path, newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    if not rows or rows[0] != expected_header:
        raise ConfigError(f"{path}: expected header {','.join(expected_header)}")
    return rows[1:]


def cmd_report(args):
    config = _load_config(args)
    out_dir = _ensure_out(args.out)
    metrics_dir = args.metrics

    per_image = _read_csv_rows(os.path.join(metrics_dir, "per_image.csv"),
                               ["image_id", "G", "M", "IoU"])
    if not per_image:
        raise ConfigError(f"{metrics_dir}/per_image.csv has no data rows")

    columns = {"G": 1, "M": 2, "IoU": 3}
    for name, column in columns.items():
        cdf = metric_cdf([float(row[column]) for row in per_image])
        write_cdf_csv(os.path.join(out_dir, f"cdf_{name}.csv"), cdf)
        write_cdf_svg(os.path.join(out_dir, f"cdf_{name}.svg"), cdf,
                      title=f"{name} per image", x_label=name,
                      domain=(0.0, 1.0))

    bde_rows = _read_csv_rows(os.path.join(metrics_dir, "bde.csv"),
                              ["class_id", "image_id", "bde"])
    by_class = {}
    for class_id, _image_id, value in bde_rows:
        by_class.setdefault(int(class_id), []).append(float(value))
    for class_id in sorted(by_class):
        cdf = metric_cdf(by_class[class_id])
        write_cdf_svg(os.path.join(out_dir, f"bde_{class_id}.svg"), cdf,
                      title=f"boundary displacement, class {class_id}",
                      x_label="pixels")

    _echo_config(config, out_dir)
    print(f"wrote {len(columns)} metric CDFs and {len(by_class)} boundary "
          f"plots to {out_dir}")
    return 0


def cmd_ablate(args):
    config = _load_config(args)
    out_dir = _ensure_out(args.out)
    manifest = load_manifest(config.data_root)
    _check_class_counts(config.model.num_classes, manifest)

    train_samples = _load_split(manifest, config.train_split)
    eval_samples = _load_split(manifest, config.eval_split)
    runs = run_ablation(
        train_samples, eval_samples, config.model,
        seeds=config.ablation_seeds, variants=config.ablation_variants,
        epochs=config.effective_ablation_epochs, schedule=config.schedule,
        batch_size=config.batch,
        augment_fn=_augment_fn(config, train_samples),
        progress=print)
    write_ablation_csv(os.path.join(out_dir, "ablation.csv"), runs)
    _echo_config(config, out_dir)
    print(f"wrote {os.path.join(out_dir, 'ablation.csv')}")
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="mmaf",
        description="RGB-D segmentation with attention-based fusion: "
                    "dataset synthesis, training, evaluation, reporting.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=False):
        p.add_argument("--config", required=True, help="INI run configuration")
        p.add_argument("--out", required=True, help="output directory")
        if seed:
            p.add_argument("--seed", type=int, default=None,
                           help="override the configured seeds")

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p_synth, seed=True)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train a network")
    common(p_train, seed=True)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint file")
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = sub.add_parser("ablate", help="compare fusion variants")
    common(p_ablate, seed=True)
    p_ablate.set_defaults(func=cmd_ablate)

    p_report = sub.add_parser("report", help="render metric CDF plots")
    common(p_report)
    p_report.add_argument("--metrics", required=True,
                          help="directory holding eval CSVs")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ContractError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def console_main():
    sys.exit(main(sys.argv[1:]))
