"""On-disk dataset layout, sample loading, and joint geometric augmentation.

A dataset root holds `rgb/<id>.ppm`, `depth/<id>.pgm` (16-bit), and
`label/<id>.pgm` (8-bit, 255 = void), plus `splits/{train,val,test}.txt` and
a `manifest.ini` naming the class count and void label.
"""

import configparser
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError
from .pnm import read_pgm, read_ppm, write_pgm, write_ppm

__all__ = [
    "RgbdSample",
    "DatasetManifest",
    "AugmentConfig",
    "sample_paths",
    "save_sample",
    "load_sample",
    "write_manifest_ini",
    "load_manifest",
    "augment_sample",
]

SPLIT_NAMES = ("train", "val", "test")
DEPTH_SCALE = 65535.0


@dataclass
class RgbdSample:
    """One aligned color/depth/label triple in model units."""

    rgb: np.ndarray  # (3, h, w) float32 in [0, 1]
    depth: np.ndarray  # (1, h, w) float32 in [0, 1]; 0 where depth is missing
    labels: np.ndarray  # (h, w) int64; 255 = void
    no_valid_depth: bool = False

    def __post_init__(self):
        if self.rgb.shape[1:] != self.labels.shape or \
                self.depth.shape[1:] != self.labels.shape:
            raise ContractError(
                f"rgb {self.rgb.shape}, depth {self.depth.shape}, labels "
                f"{self.labels.shape} do not share one image size")
        if not np.all(np.isfinite(self.depth)):
            raise ContractError("depth contains non-finite values")


@dataclass
class DatasetManifest:
    root: str
    splits: dict
    num_classes: int
    void_label: int = 255

    def split_ids(self, name):
        if name not in SPLIT_NAMES:
            raise ContractError(f"unknown split {name!r}")
        return list(self.splits.get(name, ()))


def sample_paths(root, sample_id):
    return (os.path.join(root, "rgb", sample_id + ".ppm"),
            os.path.join(root, "depth", sample_id + ".pgm"),
            os.path.join(root, "label", sample_id + ".pgm"))


def save_sample(root, sample_id, rgb_u8, depth_u16, labels_u8):
    """Write one sample's three files, creating subdirectories as needed."""
    rgb_path, depth_path, label_path = sample_paths(root, sample_id)
    for p in (rgb_path, depth_path, label_path):
        os.makedirs(os.path.dirname(p), exist_ok=True)
    write_ppm(rgb_path, rgb_u8)
    write_pgm(depth_path, np.asarray(depth_u16, dtype=np.uint16))
    write_pgm(label_path, np.asarray(labels_u8, dtype=np.uint8))


def normalize_depth(raw):
    """Min-max normalize raw 16-bit depth over valid (non-zero) pixels.

    Raw zero is the missing-depth sentinel and stays exactly 0. Returns the
    normalized (h, w) float32 map and whether any valid pixel existed.
    """
    raw = np.asarray(raw)
    valid = raw > 0
    out = np.zeros(raw.shape, dtype=np.float32)
    if not valid.any():
        return out, False
    scaled = raw.astype(np.float64) / DEPTH_SCALE
    vmin = scaled[valid].min()
    span = scaled[valid].max() - vmin
    if span == 0.0:
        span = 1.0
    out[valid] = ((scaled[valid] - vmin) / span).astype(np.float32)
    return out, True


def load_sample(manifest, sample_id):
    """Load one sample by id from a manifest (or a bare root path)."""
    root = manifest.root if isinstance(manifest, DatasetManifest) else manifest
    rgb_path, depth_path, label_path = sample_paths(root, sample_id)
    rgb_u8 = read_ppm(rgb_path)
    depth_raw = read_pgm(depth_path)
    labels_u8 = read_pgm(label_path)
    if labels_u8.dtype != np.uint8:
        raise FormatError(f"{label_path}: label maps must be 8-bit")
    if rgb_u8.shape[1:] != labels_u8.shape or depth_raw.shape != labels_u8.shape:
        raise FormatError(
            f"{sample_id}: rgb {rgb_u8.shape[1:]}, depth {depth_raw.shape}, "
            f"labels {labels_u8.shape} disagree")
    depth, has_valid = normalize_depth(depth_raw)
    return RgbdSample(
        rgb=(rgb_u8.astype(np.float32) / 255.0),
        depth=depth[None],
        labels=labels_u8.astype(np.int64),
        no_valid_depth=not has_valid,
    )


def write_manifest_ini(root, num_classes, void_label=255, extra_sections=None):
    parser = configparser.ConfigParser()
    parser["dataset"] = {"num_classes": str(num_classes),
                         "void_label": str(void_label)}
    for name, section in (extra_sections or {}).items():
        parser[name] = {k: str(v) for k, v in section.items()}
    path = os.path.join(root, "manifest.ini")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        parser.write(fh)


def load_manifest(root):
    """Read manifest.ini and the split lists, validating the layout."""
    path = os.path.join(root, "manifest.ini")
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read or "dataset" not in parser:
        raise FormatError(f"{path}: missing or lacking a [dataset] section")
    try:
        num_classes = parser.getint("dataset", "num_classes")
        void_label = parser.getint("dataset", "void_label")
    except (configparser.Error, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc

    splits = {}
    seen = {}
    for name in SPLIT_NAMES:
        split_path = os.path.join(root, "splits", name + ".txt")
        ids = []
        if os.path.exists(split_path):
            with open(split_path, encoding="utf-8") as fh:
                ids = [line.strip() for line in fh if line.strip()]
        for sample_id in ids:
            if sample_id in seen:
                raise FormatError(
                    f"sample {sample_id!r} appears in splits "
                    f"{seen[sample_id]!r} and {name!r}")
            seen[sample_id] = name
            for p in sample_paths(root, sample_id):
                if not os.path.exists(p):
                    raise FormatError(f"split {name!r} lists {sample_id!r} "
                                      f"but {p} is missing")
        splits[name] = ids
    return DatasetManifest(root=str(root), splits=splits,
                           num_classes=num_classes, void_label=void_label)


@dataclass(frozen=True)
class AugmentConfig:
    """One joint geometric draw: scale, maybe flip, then crop to out size."""

    out_h: int
    out_w: int
    scale_range: tuple = (0.75, 1.25)
    flip_prob: float = 0.5


def _axis_positions(src, dst):
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    return np.maximum(pos, 0.0)


def resize_bilinear(arr, out_h, out_w):
    """Channelwise bilinear resample of (c, h, w) with half-pixel centers.

    Resizing to the source size reproduces the input bitwise.
    """
    c, h, w = arr.shape
    out = np.empty((c, out_h, out_w), dtype=arr.dtype)
    ys = _axis_positions(h, out_h)
    y0 = np.minimum(np.floor(ys).astype(np.int64), h - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ty = ys - y0
    xs = _axis_positions(w, out_w)
    x0 = np.minimum(np.floor(xs).astype(np.int64), w - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    tx = xs - x0
    rows_top = arr[:, y0, :]
    rows_bot = arr[:, y1, :]
    rows = rows_top * (1.0 - ty)[None, :, None] + rows_bot * ty[None, :, None]
    out[...] = rows[:, :, x0] * (1.0 - tx)[None, None, :] + \
        rows[:, :, x1] * tx[None, None, :]
    return out


def resize_nearest(labels, out_h, out_w):
    h, w = labels.shape
    ys = np.minimum(np.floor(_axis_positions(h, out_h) + 0.5).astype(np.int64), h - 1)
    xs = np.minimum(np.floor(_axis_positions(w, out_w) + 0.5).astype(np.int64), w - 1)
    return labels[np.ix_(ys, xs)]


def augment_sample(sample, config, rng, void_label=255):
    """Scale, maybe flip, and crop one sample jointly.

    Color and depth resample bilinearly, labels by nearest neighbor, and any
    area without source support is void (labels) / zero (color, depth). The
    draw order is fixed: scale, flip, row offset, column offset.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    h, w = sample.labels.shape
    lo, hi = config.scale_range
    scale = rng.uniform(lo, hi)
    flip = rng.random() < config.flip_prob
    sh = max(1, int(round(h * scale)))
    sw = max(1, int(round(w * scale)))

    if (sh, sw) == (h, w) and scale == 1.0:
        rgb, depth = sample.rgb.copy(), sample.depth.copy()
        labels = sample.labels.copy()
    else:
        rgb = resize_bilinear(sample.rgb, sh, sw)
        depth = resize_bilinear(sample.depth, sh, sw)
        labels = resize_nearest(sample.labels, sh, sw)
    if flip:
        rgb = rgb[:, :, ::-1]
        depth = depth[:, :, ::-1]
        labels = labels[:, ::-1]

    oh, ow = config.out_h, config.out_w
    if sh < oh or sw < ow:
        ph, pw = max(sh, oh), max(sw, ow)
        rgb_c = np.zeros((3, ph, pw), dtype=rgb.dtype)
        depth_c = np.zeros((1, ph, pw), dtype=depth.dtype)
        labels_c = np.full((ph, pw), void_label, dtype=labels.dtype)
        rgb_c[:, :sh, :sw] = rgb
        depth_c[:, :sh, :sw] = depth
        labels_c[:sh, :sw] = labels
        rgb, depth, labels = rgb_c, depth_c, labels_c
        sh, sw = ph, pw

    oy = int(rng.integers(0, sh - oh + 1))
    ox = int(rng.integers(0, sw - ow + 1))
    return RgbdSample(
        rgb=np.ascontiguousarray(rgb[:, oy:oy + oh, ox:ox + ow]),
        depth=np.ascontiguousarray(depth[:, oy:oy + oh, ox:ox + ow]),
        labels=np.ascontiguousarray(labels[oy:oy + oh, ox:ox + ow]),
        no_valid_depth=sample.no_valid_depth,
    )
