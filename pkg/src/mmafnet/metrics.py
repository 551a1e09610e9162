"""Segmentation quality metrics.

Confusion-matrix accuracies (global, mean per-class, IoU, frequency-weighted
IoU), per-image scores, empirical CDFs over per-image values, and a per-class
boundary displacement error. Everything is computed in double precision and
is deterministic for a given input.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import AllVoidImage, ContractError

__all__ = [
    "ConfusionMatrix",
    "DatasetScores",
    "ImageScores",
    "MetricCdf",
    "BoundarySet",
    "BdeReport",
    "dataset_metrics",
    "per_image_metrics",
    "metric_cdf",
    "extract_boundary",
    "bde_directed",
    "bde_class",
    "bde_report",
    "write_dataset_metrics_csv",
    "write_per_image_csv",
    "write_bde_csv",
    "write_cdf_csv",
]

FLOAT_FORMAT = "%.6f"


def _as_label_map(arr, name):
    a = np.asarray(arr)
    if a.ndim != 2 or not np.issubdtype(a.dtype, np.integer):
        raise ContractError(f"{name} must be a 2-d integer label map, got "
                            f"shape {a.shape} dtype {a.dtype}")
    return a.astype(np.int64, copy=False)


class ConfusionMatrix:
    """Square count table: rows index ground-truth class, columns predicted."""

    def __init__(self, num_classes):
        if not isinstance(num_classes, int) or num_classes < 1:
            raise ContractError(f"num_classes must be a positive int, got {num_classes!r}")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred, gt, void_label=255):
        """Add one image's pixel counts; ground-truth void pixels are skipped."""
        pred = _as_label_map(pred, "pred")
        gt = _as_label_map(gt, "gt")
        if pred.shape != gt.shape:
            raise ContractError(f"pred shape {pred.shape} != gt shape {gt.shape}")
        valid = gt != void_label
        g = gt[valid]
        p = pred[valid]
        c = self.num_classes
        if g.size:
            if g.min() < 0 or g.max() >= c:
                raise ContractError("gt labels outside [0, num_classes) and not void")
            if p.min() < 0 or p.max() >= c:
                raise ContractError("pred labels outside [0, num_classes)")
            self.counts += np.bincount(g * c + p, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other):
        """Elementwise-sum two matrices into a new one."""
        if not isinstance(other, ConfusionMatrix) or other.num_classes != self.num_classes:
            raise ContractError("merge requires a ConfusionMatrix of the same size")
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self):
        return int(self.counts.sum())


@dataclass(frozen=True)
class DatasetScores:
    g: float
    m: float
    iou: float
    w_iou: float


@dataclass(frozen=True)
class ImageScores:
    g: float
    m: float
    iou: float


def _score_counts(counts):
    """(G, M, IoU, W_IoU) from a count table, excluding absent classes.

    Per-class accuracy is averaged over classes that appear in the ground
    truth (row sum > 0); IoU is averaged over classes that appear in either
    the ground truth or the prediction (row + column > 0); the weighted IoU
    weights each class IoU by its ground-truth pixel frequency.
    """
    counts = counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise ContractError("no counted pixels: metrics are undefined")
    diag = np.diag(counts)
    row = counts.sum(axis=1)
    col = counts.sum(axis=0)
    g = diag.sum() / total

    in_gt = row > 0
    m = np.mean(diag[in_gt] / row[in_gt])

    union = row + col - diag
    present = union > 0
    iou_present = diag[present] / union[present]
    iou = np.mean(iou_present)

    w_iou = np.sum((row[present] / total) * iou_present)
    return float(g), float(m), float(iou), float(w_iou)


def dataset_metrics(cm):
    """Summary scores over an accumulated confusion matrix."""
    if not isinstance(cm, ConfusionMatrix):
        raise ContractError("dataset_metrics expects a ConfusionMatrix")
    g, m, iou, w_iou = _score_counts(cm.counts)
    return DatasetScores(g=g, m=m, iou=iou, w_iou=w_iou)


def per_image_metrics(pred, gt, num_classes, void_label=255):
    """(G, M, IoU) for one image over the classes that image actually uses.

    The class alphabet is the union of classes present in the ground truth
    and in the prediction; classes outside it carry zero counts and are
    excluded by the row/column rules. A ground truth that is entirely void
    has no defined score and raises AllVoidImage so callers can exclude it.
    """
    cm = ConfusionMatrix(num_classes).accumulate(pred, gt, void_label=void_label)
    if cm.total == 0:
        raise AllVoidImage("ground truth contains no non-void pixels")
    g, m, iou, _ = _score_counts(cm.counts)
    return ImageScores(g=g, m=m, iou=iou)


@dataclass(frozen=True)
class MetricCdf:
    """Empirical distribution of per-image metric values.

    F(x) = (number of values <= x) / N over the sorted sample; summary
    statistics are double precision and std is the population deviation.
    """

    values: np.ndarray
    vmin: float
    vmax: float
    median: float
    mean: float
    std: float

    def fraction_at_most(self, x):
        return float(np.searchsorted(self.values, x, side="right")) / self.values.size

    def points(self):
        """(x, F(x)) at each distinct sample value, ascending in x."""
        xs = np.unique(self.values)
        return [(float(x), self.fraction_at_most(x)) for x in xs]


def metric_cdf(values):
    vals = np.sort(np.asarray(list(values), dtype=np.float64))
    if vals.size == 0:
        raise ContractError("metric_cdf requires at least one value")
    return MetricCdf(
        values=vals,
        vmin=float(vals[0]),
        vmax=float(vals[-1]),
        median=float(np.median(vals)),
        mean=float(np.mean(vals)),
        std=float(np.std(vals)),
    )


@dataclass(frozen=True)
class BoundarySet:
    """Boundary pixels of one class in one label map, in row-major order."""

    class_id: int
    coords: np.ndarray  # (k, 2) int64 rows of (row, col)

    def __len__(self):
        return int(self.coords.shape[0])


def extract_boundary(label_map, class_id):
    """Pixels of class_id with at least one in-image 4-neighbor of a
    different class. The image border alone does not make a pixel boundary.
    """
    m = _as_label_map(label_map, "label_map")
    mask = m == class_id
    edge = np.zeros_like(mask)
    neq_v = m[1:, :] != m[:-1, :]
    edge[1:, :] |= mask[1:, :] & neq_v
    edge[:-1, :] |= mask[:-1, :] & neq_v
    neq_h = m[:, 1:] != m[:, :-1]
    edge[:, 1:] |= mask[:, 1:] & neq_h
    edge[:, :-1] |= mask[:, :-1] & neq_h
    coords = np.argwhere(edge)  # row-major order
    return BoundarySet(class_id=int(class_id), coords=coords.astype(np.int64))


def _directed_mean(src, dst):
    """Mean over src pixels of the minimum Euclidean distance to dst pixels.

    Distances are exact on pixel centers; the per-pixel minima are collected
    in src (row-major) order before averaging, and src is processed in
    chunks only to bound memory, which leaves every value unchanged.
    """
    a = src.astype(np.float64)
    b = dst.astype(np.float64)
    mins = np.empty(a.shape[0], dtype=np.float64)
    step = max(1, 65536 // max(1, b.shape[0]))
    for start in range(0, a.shape[0], step):
        block = a[start:start + step]
        diff = block[:, None, :] - b[None, :, :]
        d = np.sqrt(np.sum(diff * diff, axis=2))
        mins[start:start + block.shape[0]] = d.min(axis=1)
    return float(np.mean(mins))


def bde_directed(pred, gt, class_id):
    """Both directed mean boundary distances (pred->gt, gt->pred) for one
    class, or None when either map has no boundary for that class.
    """
    bp = extract_boundary(pred, class_id)
    bg = extract_boundary(gt, class_id)
    if len(bp) == 0 or len(bg) == 0:
        return None
    return _directed_mean(bp.coords, bg.coords), _directed_mean(bg.coords, bp.coords)


def bde_class(pred, gt, class_id):
    """Boundary displacement error for one class: the two directed mean
    distances combined, so that a solid region shifted by one pixel scores
    exactly 1.0. None when the class has no boundary in either map.
    """
    pair = bde_directed(pred, gt, class_id)
    if pair is None:
        return None
    return pair[0] + pair[1]


@dataclass(frozen=True)
class BdeReport:
    """Per-class displacement distributions over a set of image pairs."""

    per_class: dict  # class_id -> MetricCdf | None (None when count is 0)
    counts: dict  # class_id -> number of images contributing a value
    records: list = field(default_factory=list)  # (class_id, pair_index, value)


def bde_report(pairs, num_classes):
    """Evaluate bde_class per class over (pred, gt) pairs.

    A pair contributes to a class only when the value is defined there;
    classes with no contributing image are reported with count 0 and no CDF.
    """
    pairs = list(pairs)
    if not pairs:
        raise ContractError("bde_report requires at least one image pair")
    per_class_values = {c: [] for c in range(num_classes)}
    records = []
    for index, (pred, gt) in enumerate(pairs):
        for c in range(num_classes):
            value = bde_class(pred, gt, c)
            if value is not None:
                per_class_values[c].append(value)
                records.append((c, index, value))
    per_class = {}
    counts = {}
    for c in range(num_classes):
        vals = per_class_values[c]
        counts[c] = len(vals)
        per_class[c] = metric_cdf(vals) if vals else None
    return BdeReport(per_class=per_class, counts=counts, records=records)


def _open_csv(path):
    return open(path, "w", newline="", encoding="utf-8")


def write_dataset_metrics_csv(path, scores):
    with _open_csv(path) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, value in (("G", scores.g), ("M", scores.m),
                            ("IoU", scores.iou), ("W_IoU", scores.w_iou)):
            w.writerow([name, FLOAT_FORMAT % value])


def write_per_image_csv(path, rows):
    """rows: iterable of (image_id, ImageScores)."""
    with _open_csv(path) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["image_id", "G", "M", "IoU"])
        for image_id, s in rows:
            w.writerow([image_id, FLOAT_FORMAT % s.g, FLOAT_FORMAT % s.m,
                        FLOAT_FORMAT % s.iou])


def write_bde_csv(path, rows):
    """rows: iterable of (class_id, image_id, value)."""
    with _open_csv(path) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["class_id", "image_id", "bde"])
        for class_id, image_id, value in rows:
            w.writerow([class_id, image_id, FLOAT_FORMAT % value])


def write_cdf_csv(path, cdf):
    with _open_csv(path) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["x", "F(x)"])
        for x, fx in cdf.points():
            w.writerow([FLOAT_FORMAT % x, FLOAT_FORMAT % fx])
