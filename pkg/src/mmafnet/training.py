"""Momentum SGD and the epoch-based training loop.

The loop shuffles deterministically per epoch, logs one CSV row per epoch
(`epoch,loss,val_miou,lr`), and rewrites the checkpoint after every finished
epoch so a later divergence always leaves the last good state on disk.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter, Tape, Tensor
from .errors import ContractError, DivergenceError
from .metrics import ConfusionMatrix, dataset_metrics
from .model import MmafNet, loss as segmentation_loss, predict, save_checkpoint

__all__ = ["SgdOptimizer", "TrainSchedule", "EpochStats", "train"]


class SgdOptimizer:
    """SGD with momentum and decoupled-from-nothing, classic weight decay:
    v <- momentum*v + grad + weight_decay*value; value <- value - lr*v.
    """

    def __init__(self, named_params, lr=0.01, momentum=0.9, weight_decay=1e-4):
        self.params = []
        for path, p in named_params:
            if not isinstance(p, Parameter):
                raise ContractError(f"{path} is not a Parameter")
            self.params.append((path, p))
        if not self.params:
            raise ContractError("optimizer needs at least one parameter")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = {path: np.zeros_like(p.data) for path, p in self.params}

    def step(self):
        """Apply one update to every parameter, then zero all gradients.

        All gradients are validated before anything is touched, so a
        non-finite gradient aborts the whole step with no partial update.
        """
        for path, p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise DivergenceError(f"non-finite gradient in {path}")
        for path, p in self.params:
            v = self.velocity[path]
            v *= self.momentum
            v += p.grad + self.weight_decay * p.data
            p.data -= self.lr * v
        self.zero_grads()

    def zero_grads(self):
        for _, p in self.params:
            p.grad[...] = 0.0


@dataclass(frozen=True)
class TrainSchedule:
    """Constant learning rate with optional step decay at given epochs."""

    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_epochs: tuple = ()
    decay_factor: float = 0.1

    def lr_at(self, epoch):
        lr = self.lr
        for e in sorted(self.decay_epochs):
            if epoch >= e:
                lr *= self.decay_factor
        return lr


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    val_miou: float
    lr: float


def _sample_arrays(sample):
    """Accept either an object with rgb/depth/labels or a plain 3-tuple."""
    if hasattr(sample, "rgb"):
        return sample.rgb, sample.depth, sample.labels
    rgb, depth, labels = sample
    return rgb, depth, labels


def _stack_batch(samples, dtype):
    rgbs, depths, labels = [], [], []
    for s in samples:
        r, d, y = _sample_arrays(s)
        rgbs.append(np.asarray(r, dtype=dtype))
        depths.append(np.asarray(d, dtype=dtype))
        labels.append(np.asarray(y))
    return (Tensor(np.stack(rgbs)), Tensor(np.stack(depths)),
            np.stack(labels).astype(np.int64))


def evaluate_confusion(net, samples, void_label=255, batch_size=8):
    """Confusion matrix over a sample set with the network in inference mode."""
    was_training = net.training
    net.eval()
    try:
        cm = ConfusionMatrix(net.config.num_classes)
        for start in range(0, len(samples), batch_size):
            rgb, depth, labels = _stack_batch(samples[start:start + batch_size],
                                              net.dtype)
            logits = net.forward(rgb if net.config.uses_rgb else None,
                                 depth if net.config.uses_depth else None)
            pred = predict(logits)
            for i in range(pred.shape[0]):
                cm.accumulate(pred[i], labels[i], void_label=void_label)
        return cm
    finally:
        if was_training:
            net.train()


def evaluate_miou(net, samples, void_label=255, batch_size=8):
    """Mean IoU over a sample set with the network in inference mode."""
    cm = evaluate_confusion(net, samples, void_label=void_label,
                            batch_size=batch_size)
    return dataset_metrics(cm).iou


def train(net, train_set, val_set, epochs, schedule=None, batch_size=4,
          seed=0, log_path=None, checkpoint_path=None, start_epoch=1,
          augment_fn=None):
    """Run `epochs` epochs of momentum SGD over `train_set`.

    Shuffling and augmentation draws are derived from (seed, epoch), so a
    resumed run (start_epoch > 1) sees the same per-epoch order as an
    uninterrupted one. The log file gains a header only when starting from
    epoch 1; later epochs append. The checkpoint is rewritten after each
    completed epoch with {"epoch": n} so an aborted run keeps its last good
    state. A non-finite batch loss or gradient raises DivergenceError.
    """
    if not isinstance(net, MmafNet):
        raise ContractError("train expects a MmafNet")
    train_set = list(train_set)
    val_set = list(val_set)
    if not train_set:
        raise ContractError("training set is empty")
    if epochs < 1:
        raise ContractError("epochs must be >= 1")
    if schedule is None:
        schedule = TrainSchedule()

    optimizer = SgdOptimizer(net.named_parameters(), lr=schedule.lr,
                             momentum=schedule.momentum,
                             weight_decay=schedule.weight_decay)
    log_file = None
    log_writer = None
    if log_path is not None:
        fresh = start_epoch == 1
        log_file = open(log_path, "w" if fresh else "a", newline="",
                        encoding="utf-8")
        log_writer = csv.writer(log_file, lineterminator="\n")
        if fresh:
            log_writer.writerow(["epoch", "loss", "val_miou", "lr"])
            log_file.flush()

    history = []
    try:
        net.train()
        for epoch in range(start_epoch, start_epoch + epochs):
            rng = np.random.default_rng((seed, epoch))
            order = rng.permutation(len(train_set))
            lr = schedule.lr_at(epoch)
            optimizer.lr = lr

            batch_losses = []
            for start in range(0, len(order), batch_size):
                picked = [train_set[i] for i in order[start:start + batch_size]]
                if augment_fn is not None:
                    picked = [augment_fn(s, rng) for s in picked]
                rgb, depth, labels = _stack_batch(picked, net.dtype)
                with Tape() as tape:
                    logits = net.forward(rgb if net.config.uses_rgb else None,
                                         depth if net.config.uses_depth else None)
                    batch_loss = segmentation_loss(
                        logits, labels, void_label=net.config.void_label)
                    value = float(batch_loss.data.item())
                    if not np.isfinite(value):
                        raise DivergenceError(
                            f"non-finite loss at epoch {epoch}")
                    tape.backward(batch_loss)
                try:
                    optimizer.step()
                except DivergenceError as exc:
                    raise DivergenceError(f"epoch {epoch}: {exc}") from exc
                batch_losses.append(value)

            epoch_loss = float(np.mean(np.asarray(batch_losses)))
            val_miou = evaluate_miou(net, val_set,
                                     void_label=net.config.void_label) \
                if val_set else float("nan")
            stats = EpochStats(epoch=epoch, loss=epoch_loss,
                               val_miou=val_miou, lr=lr)
            history.append(stats)
            if log_writer is not None:
                log_writer.writerow([epoch, "%.6f" % epoch_loss,
                                     "%.6f" % val_miou, "%.6f" % lr])
                log_file.flush()
            if checkpoint_path is not None:
                save_checkpoint(net, checkpoint_path, extra={"epoch": epoch})
    finally:
        if log_file is not None:
            log_file.close()
    return history
