"""Dual-head objective, dynamic loss balancing and the training loop."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .dataman import AgeGroup, Modality, assign_age_group
from .errors import DivergedLoss, EmptyBatch, EmptySplit, MissingClass
from .nnet.checkpoint import Checkpoint
from .nnet.network import Network, build_ocularnet
from .nnet.optim import AdamState, ScheduleState, adam_step, scheduled_lr
from .preproc import AugmentPolicy, augment, augment_strip, standardize

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


# -- losses -----------------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def focal_loss_batch(logits: np.ndarray, targets: np.ndarray, gamma: float = 2.0,
                     class_weights=(1.0, 1.0), smoothing: float = 0.0):
    """Mean one-vs-all sigmoid focal loss over samples and both logits.

    Each sample is weighted by the weight of its true class. Returns the
    loss and its gradient with respect to ``logits``.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.intp)
    n, k = z.shape
    onehot = np.eye(k)[y]
    t = onehot * (1.0 - smoothing) + (1.0 - onehot) * smoothing
    p = _sigmoid(z)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    bce = -(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))
    diff = np.abs(t - p)
    mod = diff ** gamma if gamma else np.ones_like(diff)
    w = np.asarray(class_weights, dtype=np.float64)[y][:, None]
    loss = float((w * mod * bce).sum() / (n * k))

    dbce = -t / pc + (1.0 - t) / (1.0 - pc)
    dmod = np.zeros_like(diff)
    if gamma:
        with np.errstate(divide="ignore", invalid="ignore"):
            dmod = np.where(diff > 0, gamma * diff ** (gamma - 1.0) * np.sign(p - t), 0.0)
    dz = w * (dmod * bce + mod * dbce) * p * (1.0 - p) / (n * k)
    return loss, dz


def focal_loss(class_logits, target_group: AgeGroup, gamma: float = 2.0,
               class_weights=(1.0, 1.0), smoothing: float = 0.0) -> float:
    loss, _ = focal_loss_batch(np.asarray(class_logits, dtype=np.float64)[None, :],
                               np.array([int(target_group)]), gamma, class_weights, smoothing)
    return loss


def mse_loss_batch(pred, true):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    true = np.asarray(true, dtype=np.float64).ravel()
    if pred.size == 0:
        raise EmptyBatch("mse_loss needs at least one pair")
    if pred.shape != true.shape:
        raise ValueError("prediction and target lengths differ")
    d = pred - true
    return float(np.mean(d * d)), 2.0 * d / d.size


def mse_loss(age_estimates, true_ages) -> float:
    return mse_loss_batch(age_estimates, true_ages)[0]


def total_loss(cls: float, reg: float, alpha: float) -> float:
    return cls + alpha * reg


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.25
    ema_cls: float | None = None
    ema_reg: float | None = None
    ema_decay: float = 0.9
    target_ratio: float = 0.25
    clamp: tuple = (0.01, 10.0)


def update_alpha(weights: LossWeights, batch_cls: float, batch_reg: float) -> LossWeights:
    """Fold new losses into the EMAs and rebalance alpha toward the target ratio."""
    d = weights.ema_decay
    if weights.ema_cls is None or weights.ema_reg is None:
        ema_cls, ema_reg = float(batch_cls), float(batch_reg)
    else:
        ema_cls = d * weights.ema_cls + (1 - d) * batch_cls
        ema_reg = d * weights.ema_reg + (1 - d) * batch_reg
    lo, hi = weights.clamp
    alpha = min(max(weights.target_ratio * ema_cls / max(ema_reg, 1e-8), lo), hi)
    return replace(weights, alpha=alpha, ema_cls=ema_cls, ema_reg=ema_reg)


def inverse_frequency_weights(train_labels: Sequence) -> tuple[float, float]:
    labels = np.asarray([int(g) for g in train_labels])
    n = labels.size
    counts = [int((labels == c).sum()) for c in (AgeGroup.YOUNG, AgeGroup.OLD)]
    if min(counts) == 0:
        raise MissingClass(f"both age groups must be present, got counts {counts}")
    return tuple(n / (2.0 * c) for c in counts)


# -- outputs ----------------------------------------------------------------

@dataclass(frozen=True)
class MultiTaskOutput:
    class_logits: tuple
    age_estimate: float

    @property
    def probabilities(self) -> tuple:
        z = np.asarray(self.class_logits, dtype=np.float64)
        e = np.exp(z - z.max())
        return tuple(e / e.sum())

    @property
    def confidence(self) -> float:
        return float(max(self.probabilities))

    @property
    def predicted_group(self) -> AgeGroup:
        return AgeGroup(int(np.argmax(self.class_logits)))


def outputs_from_array(raw: np.ndarray) -> list[MultiTaskOutput]:
    return [MultiTaskOutput((float(r[0]), float(r[1])), float(r[2])) for r in raw]


# -- data -------------------------------------------------------------------

@dataclass
class SampleSet:
    """Preprocessed inputs for one split.

    ``images`` holds eye images or iris strips as ``(N, H, W)`` arrays
    (uint8 or float in [0, 1]); iris sets also carry ``masks``.
    """

    images: np.ndarray
    ages: np.ndarray
    subjects: list
    ids: list
    modality: Modality = Modality.EYE
    masks: np.ndarray | None = None

    def __len__(self):
        return len(self.ages)

    @property
    def groups(self) -> np.ndarray:
        return np.array([int(assign_age_group(int(a))) for a in self.ages])

    @property
    def input_shape(self) -> tuple:
        c = 2 if self.modality is Modality.IRIS else 1
        return (c, *self.images.shape[1:])

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx, dtype=np.intp)
        return SampleSet(self.images[idx], self.ages[idx], [self.subjects[i] for i in idx],
                         [self.ids[i] for i in idx], self.modality,
                         None if self.masks is None else self.masks[idx])

    def _float(self, i) -> np.ndarray:
        img = self.images[i]
        if img.dtype == np.uint8:
            return img.astype(np.float32) / 255.0
        return img.astype(np.float32)

    def batch(self, idx, mean: float, std: float, policy: AugmentPolicy | None = None,
              seeds=None) -> np.ndarray:
        out = []
        for k, i in enumerate(idx):
            img = self._float(i)
            if policy is not None:
                fn = augment_strip if self.modality is Modality.IRIS else augment
                img = fn(img, policy, seeds[k])
            mask = None if self.masks is None else self.masks[i]
            out.append(standardize(img, mean, std, mask))
        return np.stack(out).astype(np.float32)


def predict(net: Network, data: SampleSet, mean: float, std: float, batch_size: int = 64) -> np.ndarray:
    """Eval-mode forward over a whole set; rows are ``[logit_young, logit_old, age]``."""
    outs = []
    for i in range(0, len(data), batch_size):
        idx = range(i, min(i + batch_size, len(data)))
        outs.append(net.forward(data.batch(idx, mean, std))[0])
    return np.concatenate(outs).astype(np.float64) if outs else np.zeros((0, 3))


# -- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 0.001
    weight_decay: float = 0.01
    patience: int = 5
    alpha0: float = 0.25
    label_smoothing: float = 0.05
    focal_gamma: float = 2.0
    seed: int = 42
    modality: Modality = Modality.EYE
    min_lr: float = 1e-5
    t0: int = 10
    t_mult: float = 2.0
    widths: tuple = (16, 32, 64, 128, 384)
    hidden: int = 192

    def __post_init__(self):
        for name in ("epochs", "batch_size", "patience", "t0", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("lr", "alpha0", "t_mult"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.focal_gamma < 0 or self.min_lr < 0:
            raise ValueError("weight_decay, focal_gamma and min_lr must be non-negative")
        if not 0.0 <= self.label_smoothing <= 0.2:
            raise ValueError("label_smoothing must lie in [0, 0.2]")
        if len(self.widths) < 1 or min(self.widths) < 1:
            raise ValueError("widths must be a non-empty list of positive channel counts")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_cls_loss: float
    val_reg_loss: float
    lr: float
    alpha: float


HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_cls_loss", "val_reg_loss", "lr", "alpha")


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for e in self.epochs:
            w.writerow([e.epoch] + [repr(float(getattr(e, c))) for c in HISTORY_COLUMNS[1:]])
        return buf.getvalue()

    def checksum(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()


class EarlyStopping:
    """Tracks the best validation loss; ``step`` returns True once patience runs out."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, loss: float) -> bool:
        if loss < self.best:
            self.best = loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def evaluate_losses(net: Network, data: SampleSet, mean, std, config: TrainConfig,
                    class_weights, alpha: float) -> tuple[float, float, float]:
    """Validation (total, classification, regression) losses in eval mode."""
    raw = predict(net, data, mean, std, config.batch_size)
    cls, _ = focal_loss_batch(raw[:, :2], data.groups, config.focal_gamma, class_weights,
                              config.label_smoothing)
    reg, _ = mse_loss_batch(raw[:, 2], data.ages)
    return total_loss(cls, reg, alpha), cls, reg


def train(config: TrainConfig, train_data: SampleSet, val_data: SampleSet,
          norm: tuple[float, float], policy: AugmentPolicy | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[Checkpoint, TrainHistory]:
    if len(train_data) == 0 or len(val_data) == 0:
        raise EmptySplit("training and validation sets must be non-empty")
    mean, std = norm
    rng = np.random.default_rng(config.seed)
    c, *hw = train_data.input_shape
    net = build_ocularnet(c, tuple(hw), widths=config.widths, hidden=config.hidden, seed=config.seed)
    net.layers[-1].params["reg_bias"][:] = np.float32(train_data.ages.mean())
    class_weights = inverse_frequency_weights(train_data.groups)
    train_groups = train_data.groups

    opt = AdamState()
    sched = ScheduleState(config.lr, config.min_lr, config.t0, config.t_mult)
    weights = LossWeights(alpha=config.alpha0)
    stopper = EarlyStopping(config.patience)
    history = TrainHistory()
    best = None
    n = len(train_data)

    for epoch in range(1, config.epochs + 1):
        lr = scheduled_lr(sched)
        alpha = weights.alpha
        perm = rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            seeds = rng.integers(0, 2**63 - 1, size=len(idx))
            x = train_data.batch(idx, mean, std, policy, seeds)
            out, cache = net.forward(x, training=True)
            cls, dlogits = focal_loss_batch(out[:, :2], train_groups[idx], config.focal_gamma,
                                            class_weights, config.label_smoothing)
            reg, dage = mse_loss_batch(out[:, 2], train_data.ages[idx])
            loss = total_loss(cls, reg, alpha)
            if not math.isfinite(loss):
                raise DivergedLoss(f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}: "
                                   f"cls={cls} reg={reg} alpha={alpha} lr={lr}")
            dy = np.concatenate([dlogits, alpha * dage[:, None]], axis=1).astype(out.dtype)
            net.zero_grad()
            grads, _ = net.backward(cache, dy)
            adam_step(net.named_params(), grads, opt, lr, weight_decay=config.weight_decay)
            net.bump()
            sums += np.array([loss, cls, reg]) * len(idx)
        train_loss, train_cls, train_reg = sums / n

        val_loss, val_cls, val_reg = evaluate_losses(net, val_data, mean, std, config,
                                                     class_weights, alpha)
        if not math.isfinite(val_loss):
            raise DivergedLoss(f"non-finite validation loss at epoch {epoch}")
        rec = EpochRecord(epoch, float(train_loss), float(val_loss), float(val_cls),
                          float(val_reg), float(lr), float(alpha))
        history.epochs.append(rec)
        log.info("epoch %d train %.4f val %.4f (cls %.4f reg %.4f) lr %.2e alpha %.4f",
                 epoch, train_loss, val_loss, val_cls, val_reg, lr, alpha)
        if on_epoch:
            on_epoch(rec)

        improved = val_loss < stopper.best
        stop = stopper.step(val_loss)
        if improved:
            history.best_epoch = epoch
            best = (net.copy(), AdamState(opt.step, {k: v.copy() for k, v in opt.m.items()},
                                          {k: v.copy() for k, v in opt.v.items()}), epoch, alpha)
        weights = update_alpha(weights, train_cls, train_reg)
        sched = sched.advance()
        if stop:
            history.stopped_early = True
            break

    best_net, best_opt, best_epoch, best_alpha = best
    meta = {
        "modality": config.modality.value,
        "norm_mean": float(mean),
        "norm_std": float(std),
        "class_weights": list(class_weights),
        "best_epoch": best_epoch,
        "best_val_loss": float(stopper.best),
        "alpha": float(best_alpha),
        "config": _config_json(config),
        "train_subjects": sorted(set(train_data.subjects)),
    }
    ckpt = Checkpoint(best_net, best_opt, best_epoch, rng.bit_generator.state, meta)
    return ckpt, history


def _config_json(config: TrainConfig) -> dict:
    d = asdict(config)
    d["modality"] = config.modality.value
    d["widths"] = list(config.widths)
    return d
