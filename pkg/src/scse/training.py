"""Losses, SGD with momentum, the step learning-rate schedule and the training loop."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .data import Dataset, SegmentationSample, batch_iterator, split_to_arrays
from .metrics import DiceReport, dice_report
from .tensor import ShapeError, Tensor, as_tensor, backward, no_grad, softmax_channels
from .zoo import ArchSpec, Network, build_network, forward_segment

logger = logging.getLogger(__name__)

DICE_EPS = 1e-6


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 0.01
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 10
    momentum: float = 0.95
    weight_decay: float = 1e-4
    batch_size: int = 4
    max_epochs: int = 30
    convergence_patience: int = 5
    loss_mix: Optional[float] = None  # None -> 1 for sdnet, 0 otherwise
    seed: int = 0

    def __post_init__(self):
        if self.initial_lr <= 0 or self.lr_decay_factor <= 0 or self.lr_decay_every < 1:
            raise ValueError("learning-rate settings must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1 or self.convergence_patience < 1:
            raise ValueError("max_epochs and convergence_patience must be >= 1")

    def dice_weight(self, arch_kind: str) -> float:
        if self.loss_mix is not None:
            return float(self.loss_mix)
        return 1.0 if arch_kind == "sdnet" else 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimState:
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    lr: float = 0.0


# -----------------------------------------------------------------------------
# Class weights and losses
# -----------------------------------------------------------------------------


def median_frequency_weights(labels: Sequence[np.ndarray], num_classes: int) -> np.ndarray:
    """w_c = median(f) / f_c with f_c the global pixel frequency of class c."""
    flat = np.concatenate([np.asarray(l).ravel() for l in labels])
    if flat.size and (flat.min() < 0 or flat.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    counts = np.bincount(flat.astype(np.int64), minlength=num_classes).astype(np.float64)
    absent = np.flatnonzero(counts == 0)
    if absent.size:
        raise ValueError(f"class {int(absent[0])} never occurs; its median-frequency weight is undefined")
    # median(f) / f_c with the common total cancelled
    return np.median(counts) / counts


def _check_labels(labels: np.ndarray, logits_shape: tuple) -> np.ndarray:
    labels = np.asarray(labels)
    n, k, h, w = logits_shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits_shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.intp)


def weighted_logistic_loss(logits: Tensor, labels: np.ndarray, weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean over pixels of w[y] * -log softmax(logits)[y]."""
    logits = as_tensor(logits)
    if logits.ndim != 4:
        raise ShapeError(f"logits must be (N, K, H, W), got {logits.shape}")
    y = _check_labels(labels, logits.shape)
    k = logits.shape[1]
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (k,):
        raise ShapeError(f"class weights shape {w.shape} does not match K={k}")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, y[:, None], axis=1)[:, 0]
    wy = w[y]
    count = y.size
    loss = float((wy * -picked).sum() / count)

    def _bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, y[:, None], 1.0, axis=1)
        return (g * (wy[:, None] / count) * (p - onehot),)

    return Tensor._from_op(np.array(loss), (logits,), _bw, "weighted_logistic_loss")


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    return np.moveaxis(np.eye(num_classes)[labels], -1, 1)


def soft_dice_loss(probs: Tensor, labels: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """1 - mean over classes of (2 * soft overlap + eps) / (soft |P| + |G| + eps)."""
    probs = as_tensor(probs)
    if probs.ndim != 4:
        raise ShapeError(f"probs must be (N, K, H, W), got {probs.shape}")
    y = _check_labels(labels, probs.shape)
    k = probs.shape[1]
    target = one_hot(y, k)
    inter = (probs * target).sum(axis=(0, 2, 3))
    denom = probs.sum(axis=(0, 2, 3)) + (target.sum(axis=(0, 2, 3)) + eps)
    dice = (inter * 2.0 + eps) / denom
    return 1.0 - dice.mean()


def segmentation_loss(
    logits: Tensor, labels: np.ndarray, weights: Optional[np.ndarray], dice_weight: float
) -> Tensor:
    """Weighted logistic loss plus ``dice_weight`` times soft Dice."""
    ce = weighted_logistic_loss(logits, labels, weights)
    if dice_weight == 0:
        return ce
    return ce + soft_dice_loss(softmax_channels(logits), labels) * dice_weight


# -----------------------------------------------------------------------------
# Optimizer and schedule
# -----------------------------------------------------------------------------


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    lr = cfg.initial_lr
    for _ in range(epoch // cfg.lr_decay_every):
        lr *= cfg.lr_decay_factor  # repeated products land on the doubles nearest 1e-3, 1e-4
    return lr


def sgd_update(
    params: Dict[str, Tensor],
    grads: Dict[str, np.ndarray],
    state: OptimState,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """In-place SGD step with coupled weight decay.

    g' = g + weight_decay * p;  v <- momentum * v + g';  p <- p - lr * v
    """
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros(p.shape)
        elif v.shape != p.shape:
            raise ShapeError(f"velocity for {name!r} has shape {v.shape}, parameter has {p.shape}")
        v = momentum * v + (g + weight_decay * p.data)
        state.velocity[name] = v
        p.data -= lr * v
    state.lr = lr


# -----------------------------------------------------------------------------
# Training loop
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_dice: float


LOG_HEADER = "epoch,lr,train_loss,val_loss,val_dice"


def log_to_csv(log: Sequence[EpochRecord]) -> str:
    rows = [LOG_HEADER]
    for r in log:
        rows.append(f"{r.epoch},{r.lr!r},{r.train_loss!r},{r.val_loss!r},{r.val_dice!r}")
    return "\n".join(rows) + "\n"


@dataclass
class TrainResult:
    network: Network
    log: List[EpochRecord]
    best_epoch: int
    class_weights: np.ndarray


def predict(net: Network, images: np.ndarray, chunk: int = 8) -> np.ndarray:
    """Argmax label maps (N, H, W) for an (N, Cin, H, W) image stack."""
    out = []
    with no_grad():
        for i in range(0, len(images), chunk):
            out.append(forward_segment(net, images[i : i + chunk]).data.argmax(axis=1))
    return np.concatenate(out)


def evaluate(
    net: Network, samples: Sequence[SegmentationSample], exclude_background: bool = True
) -> DiceReport:
    images, labels = split_to_arrays(list(samples))
    preds = predict(net, images)
    return dice_report(list(preds), list(labels), net.spec.num_classes, exclude_background)


def _split_loss(net, images, labels, weights, dice_weight, chunk=8) -> float:
    total = 0.0
    with no_grad():
        for i in range(0, len(images), chunk):
            logits = forward_segment(net, images[i : i + chunk])
            total += segmentation_loss(logits, labels[i : i + chunk], weights, dice_weight).item() * len(
                images[i : i + chunk]
            )
    return total / len(images)


def _first_nonfinite(params: Dict[str, Tensor]) -> Optional[str]:
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return name
    return None


def train_loop(
    spec: ArchSpec,
    data: Dataset,
    cfg: TrainConfig,
    exclude_background: bool = True,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Train a freshly built network and return its best-validation weights.

    The shuffle order of every epoch derives from ``cfg.seed``, so identical
    inputs give bit-identical logs and weights. Training stops after
    ``max_epochs`` or once validation loss has not improved for
    ``convergence_patience`` consecutive epochs.
    """
    if not data.train or not data.val:
        raise ValueError("training needs non-empty train and validation splits")
    net = build_network(spec, cfg.seed)
    params = net.params
    weights = median_frequency_weights([s.label for s in data.train], spec.num_classes)
    dice_weight = cfg.dice_weight(spec.arch_kind)
    val_images, val_labels = split_to_arrays(data.val)

    state = OptimState()
    log: List[EpochRecord] = []
    best_loss, best_epoch, best_state = math.inf, -1, None
    stale = 0

    for epoch in range(cfg.max_epochs):
        lr = lr_at_epoch(cfg, epoch)
        state.epoch = epoch
        total, seen = 0.0, 0
        for images, labels in batch_iterator(data.train, cfg.batch_size, cfg.seed, epoch):
            loss = segmentation_loss(forward_segment(net, images), labels, weights, dice_weight)
            value = loss.item()
            backward(loss, net.parameters())
            if not math.isfinite(value):
                culprit = _first_nonfinite(params)
                where = f"first non-finite gradient in {culprit!r}" if culprit else "all gradients finite"
                raise NonFiniteLossError(f"epoch {epoch}: loss became {value} ({where})")
            culprit = _first_nonfinite(params)
            if culprit is not None:
                raise NonFiniteLossError(f"epoch {epoch}: non-finite gradient in parameter {culprit!r}")
            sgd_update(params, {k: p.grad for k, p in params.items()}, state, lr, cfg.momentum, cfg.weight_decay)
            total += value * len(images)
            seen += len(images)

        val_loss = _split_loss(net, val_images, val_labels, weights, dice_weight)
        val_dice = evaluate(net, data.val, exclude_background).mean
        rec = EpochRecord(epoch, lr, total / seen, val_loss, val_dice)
        log.append(rec)
        logger.info("epoch %d lr %.0e train %.4f val %.4f dice %.4f", epoch, lr, rec.train_loss, val_loss, val_dice)
        if on_epoch is not None:
            on_epoch(rec)

        if val_loss < best_loss:
            best_loss, best_epoch, best_state, stale = val_loss, epoch, copy.deepcopy(net.state_dict()), 0
        else:
            stale += 1
            if stale >= cfg.convergence_patience:
                break

    net.load_state_dict(best_state)
    return TrainResult(net, log, best_epoch, weights)
