"""Synthetic RGB-D scene generator.

Each scene scatters flat shapes (rectangles, ellipses, triangles) over a
background; the class is the shape type. Depth is a constant layer per shape
painted far to near, so nearer shapes occlude farther ones and the depth
image keeps clean silhouettes. Color is a class-tinted albedo with per-shape
jitter plus pixel noise; optionally a random region of the color image is
multiplied by a small darkness factor, leaving depth and labels untouched —
the condition under which depth stays informative while color does not.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetManifest, save_sample, write_manifest_ini
from .errors import ConfigError, ContractError

__all__ = ["SynthConfig", "synth_generate", "SHAPE_KINDS", "LAYERING_RULES"]

SHAPE_KINDS = ("rectangle", "ellipse", "triangle")
LAYERING_RULES = ("banded", "ordinal")

# raw 16-bit depth plan: 0 is the missing sentinel, background is farthest
BACKGROUND_DEPTH = 55000
NEAREST_DEPTH = 10000
FARTHEST_SHAPE_DEPTH = 45000
DEPTH_JITTER = 2000

BACKGROUND_ALBEDO = (0.45, 0.45, 0.45)
CLASS_TINTS = ((0.80, 0.30, 0.30), (0.30, 0.75, 0.35), (0.30, 0.35, 0.80))
ALBEDO_JITTER = 0.10

MIN_VISIBLE_PIXELS = 16
PLACEMENT_RETRIES = 20


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    num_images: int = 200
    num_shape_classes: int = 2  # classes = background + this many shape kinds
    shapes_per_image: tuple = (1, 3)  # inclusive range
    p_dark: float = 0.0
    dark_strength: tuple = (0.02, 0.15)
    noise_std: float = 0.02
    depth_layering: str = "banded"
    split_fractions: tuple = (0.7, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 8:
            raise ConfigError("image_size must be >= 8")
        if self.num_images < 1:
            raise ConfigError("num_images must be >= 1")
        if not 1 <= self.num_shape_classes <= len(SHAPE_KINDS):
            raise ConfigError(
                f"num_shape_classes must be in [1, {len(SHAPE_KINDS)}]")
        lo, hi = self.shapes_per_image
        if lo < 0 or hi < lo:
            raise ConfigError("shapes_per_image must be a (lo, hi) range")
        if not 0.0 <= self.p_dark <= 1.0:
            raise ConfigError("p_dark must be in [0, 1]")
        dlo, dhi = self.dark_strength
        if not 0.0 < dlo <= dhi < 1.0:
            raise ConfigError("dark_strength must satisfy 0 < lo <= hi < 1")
        if self.depth_layering not in LAYERING_RULES:
            raise ConfigError(f"depth_layering must be one of {LAYERING_RULES}")
        if len(self.split_fractions) != 3 or min(self.split_fractions) < 0 or \
                abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError("split_fractions must be 3 values summing to 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")

    @property
    def num_classes(self):
        return self.num_shape_classes + 1


def _shape_mask(kind, size, rng):
    """Boolean mask for one randomly sized and placed shape."""
    lo = max(3, size // 6)
    hi = max(lo + 1, size // 2)
    sh = int(rng.integers(lo, hi + 1))
    sw = int(rng.integers(lo, hi + 1))
    r0 = int(rng.integers(0, size - sh + 1))
    c0 = int(rng.integers(0, size - sw + 1))
    mask = np.zeros((size, size), dtype=bool)
    if kind == "rectangle":
        mask[r0:r0 + sh, c0:c0 + sw] = True
        return mask
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "ellipse":
        cy, cx = r0 + (sh - 1) / 2.0, c0 + (sw - 1) / 2.0
        ry, rx = sh / 2.0, sw / 2.0
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        return mask
    # triangle: half of the bounding box cut along one of its diagonals
    orient = int(rng.integers(0, 4))
    box = (yy >= r0) & (yy < r0 + sh) & (xx >= c0) & (xx < c0 + sw)
    u = (yy - r0) * sw
    v = (xx - c0) * sh
    half = {0: u >= v, 1: u <= v,
            2: u + v <= sh * sw, 3: u + v >= sh * sw}[orient]
    return box & half


def _shape_depth(rule, class_id, index, count, rng):
    if rule == "banded":
        # each class owns a depth band; per-shape jitter stays inside it
        span = FARTHEST_SHAPE_DEPTH - NEAREST_DEPTH
        center = FARTHEST_SHAPE_DEPTH - (class_id - 1) * span // max(1, len(CLASS_TINTS) - 1) \
            if len(CLASS_TINTS) > 1 else (FARTHEST_SHAPE_DEPTH + NEAREST_DEPTH) // 2
        jitter = int(rng.integers(-DEPTH_JITTER, DEPTH_JITTER + 1))
        return int(np.clip(center + jitter, NEAREST_DEPTH, FARTHEST_SHAPE_DEPTH))
    # ordinal: evenly spaced by placement order, later shapes nearer
    if count == 1:
        return FARTHEST_SHAPE_DEPTH
    step = (FARTHEST_SHAPE_DEPTH - NEAREST_DEPTH) / (count - 1)
    return int(round(FARTHEST_SHAPE_DEPTH - index * step))


def _render_image(config, rng):
    """One scene: returns (rgb uint8, depth uint16, labels uint8, notes)."""
    size = config.image_size
    notes = []
    lo, hi = config.shapes_per_image
    count = int(rng.integers(lo, hi + 1))

    shapes = []
    for index in range(count):
        class_id = int(rng.integers(1, config.num_shape_classes + 1))
        kind = SHAPE_KINDS[class_id - 1]
        mask = None
        for _ in range(PLACEMENT_RETRIES):
            candidate = _shape_mask(kind, size, rng)
            if candidate.sum() >= MIN_VISIBLE_PIXELS:
                mask = candidate
                break
        if mask is None:
            notes.append(f"skipped shape {index} (class {class_id}): "
                         f"no placement after {PLACEMENT_RETRIES} tries")
            continue
        depth = _shape_depth(config.depth_layering, class_id, index, count, rng)
        albedo = np.clip(
            np.asarray(CLASS_TINTS[class_id - 1]) +
            rng.uniform(-ALBEDO_JITTER, ALBEDO_JITTER, 3),
            0.05, 0.95)
        shapes.append({"class_id": class_id, "mask": mask,
                       "depth": depth, "albedo": albedo, "index": index})

    # paint far to near so occlusion agrees with the depth values
    shapes.sort(key=lambda s: (-s["depth"], s["index"]))
    labels = np.zeros((size, size), dtype=np.uint8)
    depth_raw = np.full((size, size), BACKGROUND_DEPTH, dtype=np.uint16)
    albedo_map = np.empty((3, size, size), dtype=np.float64)
    albedo_map[...] = np.asarray(BACKGROUND_ALBEDO)[:, None, None] + \
        rng.uniform(-0.05, 0.05)
    for s in shapes:
        covered = np.zeros((size, size), dtype=bool)
        for later in shapes:
            if later["depth"] < s["depth"] or \
                    (later["depth"] == s["depth"] and later["index"] > s["index"]):
                covered |= later["mask"]
        visible = int((s["mask"] & ~covered).sum())
        if visible < MIN_VISIBLE_PIXELS:
            notes.append(f"dropped shape {s['index']} (class {s['class_id']}): "
                         f"only {visible} visible pixels")
            continue
        m = s["mask"]
        labels[m] = s["class_id"]
        depth_raw[m] = s["depth"]
        albedo_map[:, m] = s["albedo"][:, None]

    rgb = albedo_map + rng.normal(0.0, config.noise_std, (3, size, size))

    dark_note = None
    if rng.random() < config.p_dark:
        factor = rng.uniform(*config.dark_strength)
        r0 = int(rng.integers(0, size // 2))
        r1 = int(rng.integers(r0 + size // 4, size + 1))
        c0 = int(rng.integers(0, size // 2))
        c1 = int(rng.integers(c0 + size // 4, size + 1))
        rgb[:, r0:r1, c0:c1] *= factor
        dark_note = f"{factor:.6f},{r0},{r1},{c0},{c1}"

    rgb_u8 = np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    return rgb_u8, depth_raw, labels, notes, dark_note


def _split_sizes(n, fractions):
    train = int(round(n * fractions[0]))
    val = int(round(n * fractions[1]))
    train = min(train, n)
    val = min(val, n - train)
    return train, val, n - train - val


def synth_generate(config, out_dir):
    """Write a full synthetic dataset under out_dir and return its manifest.

    Output is byte-identical for identical (config, out_dir content absent):
    every draw comes from a per-image generator seeded by (seed, image index).
    Refuses to write into a directory that already holds a manifest.
    """
    if not isinstance(config, SynthConfig):
        raise ContractError("synth_generate expects a SynthConfig")
    out_dir = str(out_dir)
    if os.path.exists(os.path.join(out_dir, "manifest.ini")):
        raise ContractError(f"{out_dir} already holds a dataset; refusing to "
                            f"overwrite")
    os.makedirs(out_dir, exist_ok=True)

    ids = []
    all_notes = []
    dark_annotations = {}
    histograms = {}
    for index in range(config.num_images):
        rng = np.random.default_rng((config.seed, index))
        sample_id = f"img_{index:05d}"
        rgb_u8, depth_raw, labels, notes, dark_note = _render_image(config, rng)
        save_sample(out_dir, sample_id, rgb_u8, depth_raw, labels)
        ids.append(sample_id)
        all_notes.extend(f"{sample_id}: {n}" for n in notes)
        if dark_note is not None:
            dark_annotations[sample_id] = dark_note
        counts = np.bincount(labels.ravel(), minlength=config.num_classes)
        histograms[sample_id] = ":".join(str(int(c)) for c in
                                         counts[:config.num_classes])

    n_train, n_val, n_test = _split_sizes(config.num_images,
                                          config.split_fractions)
    splits = {"train": ids[:n_train],
              "val": ids[n_train:n_train + n_val],
              "test": ids[n_train + n_val:]}
    os.makedirs(os.path.join(out_dir, "splits"), exist_ok=True)
    for name, split_ids in splits.items():
        path = os.path.join(out_dir, "splits", name + ".txt")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(s + "\n" for s in split_ids)

    sections = {
        "synth": {
            "image_size": config.image_size,
            "num_images": config.num_images,
            "num_shape_classes": config.num_shape_classes,
            "shapes_per_image": f"{config.shapes_per_image[0]},"
                                f"{config.shapes_per_image[1]}",
            "p_dark": config.p_dark,
            "dark_strength": f"{config.dark_strength[0]},"
                             f"{config.dark_strength[1]}",
            "noise_std": config.noise_std,
            "depth_layering": config.depth_layering,
            "split_fractions": ",".join(str(f) for f in
                                        config.split_fractions),
            "seed": config.seed,
            "dark_images": len(dark_annotations),
        },
        "notes": {f"note_{i:04d}": text for i, text in enumerate(all_notes)},
        "darkness": dark_annotations,
        "histogram": histograms,
    }
    write_manifest_ini(out_dir, num_classes=config.num_classes,
                       void_label=255, extra_sections=sections)
    return DatasetManifest(root=out_dir, splits=splits,
                           num_classes=config.num_classes, void_label=255)
