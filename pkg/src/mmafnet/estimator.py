"""Scikit-learn style estimator wrapping network construction, training,
and inference behind fit/predict.

X is either a single array of shape (n, 4, H, W) — three color channels
followed by one depth channel — or a (rgb, depth) pair of arrays with
shapes (n, 3, H, W) and (n, 1, H, W).  y holds integer label maps of shape
(n, H, W); the void label marks pixels without ground truth.  H and W must
be multiples of 32 (the encoder's total downsampling factor).

score() returns mean IoU rather than accuracy: segmentation quality is
dominated by how well small classes are recovered, which accuracy hides.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import ContractError
from .metrics import dataset_metrics
from .model import MmafNet, ModelConfig, predict as _logits_to_labels
from .ops import softmax_channels
from .autodiff import Tensor
from .training import TrainSchedule, evaluate_confusion, train

__all__ = ["MmafSegmenter", "split_rgbd", "check_label_maps"]

_STRIDE = 32  # total encoder downsampling; input sides must divide evenly


def split_rgbd(X):
    """Normalize X into float32 (rgb, depth) batches.

    Accepts a packed (n, 4, H, W) array or an (rgb, depth) pair with
    shapes (n, 3, H, W) and (n, 1, H, W).
    """
    if isinstance(X, (tuple, list)):
        if len(X) != 2:
            raise ContractError(
                f"X as a sequence must be (rgb, depth), got length {len(X)}")
        rgb = np.asarray(X[0], dtype=np.float32)
        depth = np.asarray(X[1], dtype=np.float32)
    else:
        packed = np.asarray(X, dtype=np.float32)
        if packed.ndim != 4 or packed.shape[1] != 4:
            raise ContractError(
                f"packed X must have shape (n, 4, H, W), got {packed.shape}")
        rgb = packed[:, :3]
        depth = packed[:, 3:4]

    if rgb.ndim != 4 or rgb.shape[1] != 3:
        raise ContractError(f"rgb must have shape (n, 3, H, W), got {rgb.shape}")
    if depth.ndim != 4 or depth.shape[1] != 1:
        raise ContractError(f"depth must have shape (n, 1, H, W), got {depth.shape}")
    if rgb.shape[0] != depth.shape[0] or rgb.shape[2:] != depth.shape[2:]:
        raise ContractError(
            f"rgb {rgb.shape} and depth {depth.shape} disagree on n or H, W")
    n, _, h, w = rgb.shape
    if n < 1:
        raise ContractError("X must contain at least one image")
    if h % _STRIDE or w % _STRIDE or h < _STRIDE or w < _STRIDE:
        raise ContractError(
            f"H and W must be positive multiples of {_STRIDE}, got {h}x{w}")
    if not (np.isfinite(rgb).all() and np.isfinite(depth).all()):
        raise ContractError("X must be finite")
    return rgb, depth


def check_label_maps(y, n, h, w, num_classes, void_label):
    """Validate y as (n, H, W) integer labels in [0, num_classes) or void."""
    labels = np.asarray(y)
    if labels.shape != (n, h, w):
        raise ContractError(
            f"y must have shape ({n}, {h}, {w}), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ContractError(f"y must be integer label maps, got {labels.dtype}")
    labels = labels.astype(np.int64)
    known = (labels >= 0) & (labels < num_classes)
    if not (known | (labels == void_label)).all():
        bad = labels[~(known | (labels == void_label))].flat[0]
        raise ContractError(
            f"labels must lie in [0, {num_classes}) or equal the void label "
            f"{void_label}, found {bad}")
    return labels


class MmafSegmenter(BaseEstimator):
    """Dense RGB-D segmentation with attention-based stream fusion.

    Parameters mirror the network and optimizer configuration; fit() builds
    a fresh network seeded by `seed`, so identical inputs give identical
    fitted models.
    """

    def __init__(self, num_classes=3, widths=(8, 16, 32, 64), decoder_width=8,
                 reduction=16, spatial_kernel=7, units_per_stage=2,
                 fusion_mode="mmaf", use_batchnorm=True, lr=0.01,
                 momentum=0.9, weight_decay=1e-4, epochs=5, batch_size=4,
                 seed=0, void_label=255):
        self.num_classes = num_classes
        self.widths = widths
        self.decoder_width = decoder_width
        self.reduction = reduction
        self.spatial_kernel = spatial_kernel
        self.units_per_stage = units_per_stage
        self.fusion_mode = fusion_mode
        self.use_batchnorm = use_batchnorm
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.void_label = void_label

    def _model_config(self):
        return ModelConfig(
            num_classes=self.num_classes,
            widths=tuple(self.widths),
            decoder_width=self.decoder_width,
            reduction=self.reduction,
            spatial_kernel=self.spatial_kernel,
            units_per_stage=self.units_per_stage,
            fusion_mode=self.fusion_mode,
            use_batchnorm=self.use_batchnorm,
            void_label=self.void_label,
        )

    def _samples(self, X, y=None):
        rgb, depth, labels = self._arrays(X, y)
        if labels is None:
            labels = np.zeros(rgb.shape[:1] + rgb.shape[2:], dtype=np.int64)
        return [(rgb[i], depth[i], labels[i]) for i in range(rgb.shape[0])]

    def _arrays(self, X, y):
        rgb, depth = split_rgbd(X)
        labels = None
        if y is not None:
            n, _, h, w = rgb.shape
            labels = check_label_maps(y, n, h, w, self.num_classes,
                                      self.void_label)
        return rgb, depth, labels

    def fit(self, X, y):
        """Train a fresh network on (X, y); returns self."""
        samples = self._samples(X, y)
        net = MmafNet(self._model_config(),
                      rng=np.random.default_rng(self.seed))
        schedule = TrainSchedule(lr=self.lr, momentum=self.momentum,
                                 weight_decay=self.weight_decay)
        history = train(net, samples, [], epochs=self.epochs,
                        schedule=schedule, batch_size=self.batch_size,
                        seed=self.seed)
        self.net_ = net
        self.classes_ = np.arange(self.num_classes)
        self.history_ = history
        return self

    def _forward_batches(self, X):
        check_is_fitted(self, "net_")
        rgb, depth, _ = self._arrays(X, None)
        net = self.net_
        was_training = net.training
        net.eval()
        try:
            outputs = []
            for start in range(0, rgb.shape[0], self.batch_size):
                r = Tensor(rgb[start:start + self.batch_size])
                d = Tensor(depth[start:start + self.batch_size])
                logits = net.forward(r if net.config.uses_rgb else None,
                                     d if net.config.uses_depth else None)
                outputs.append(logits)
            return outputs
        finally:
            if was_training:
                net.train()

    def predict(self, X):
        """Per-pixel class labels, shape (n, H, W)."""
        parts = [_logits_to_labels(logits) for logits in self._forward_batches(X)]
        return np.concatenate(parts, axis=0)

    def predict_proba(self, X):
        """Per-pixel class probabilities, shape (n, num_classes, H, W)."""
        parts = [softmax_channels(logits).data
                 for logits in self._forward_batches(X)]
        return np.concatenate(parts, axis=0).astype(np.float64)

    def score(self, X, y):
        """Mean IoU of predictions against y (higher is better)."""
        check_is_fitted(self, "net_")
        samples = self._samples(X, y)
        cm = evaluate_confusion(self.net_, samples,
                                void_label=self.void_label,
                                batch_size=self.batch_size)
        return dataset_metrics(cm).iou
