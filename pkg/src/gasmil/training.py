"""Losses, class-balanced sampling, noise augmentation, the training loop and evaluation."""

from __future__ import annotations

import csv
import logging
from itertools import combinations
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .bagio import DEFAULT_BAG_SIZE, FeatureBag, sample_or_pad
from .errors import ConfigError, NumericError, ParameterError
from .metrics import metrics_report
from .model import LOSS_KINDS, GasMil, GasMilConfig, predict_label
from .numerics import adamw_step, log_sigmoid, make_rng, row_softmax, sigmoid_map

logger = logging.getLogger(__name__)

MONITOR_METRICS = ("balanced_accuracy", "qwk", "weighted_f1", "loss")
TRAINLOG_HEADER = ("epoch", "train_loss", "val_accuracy", "val_balanced_accuracy", "val_qwk", "val_weighted_f1")


# ordinal targets


def ordinal_encode(grade, num_classes):
    """Cumulative encoding: grade ``g`` becomes ``g`` ones followed by zeros (length c-1)."""
    grade = np.asarray(grade, dtype=np.int64)
    if np.any(grade < 0) or np.any(grade >= num_classes):
        raise ParameterError(f"grade outside [0, {num_classes})")
    return (np.arange(num_classes - 1) < grade[..., None]).astype(np.float64)


def ordinal_decode(probs):
    """Grade from per-threshold probabilities: the number of entries above 0.5."""
    return np.sum(np.asarray(probs) > 0.5, axis=-1)


# losses; batched inputs are averaged over the leading axis


def bce_multilabel_loss(scores, target):
    """Mean binary cross-entropy on logits, and its gradient with respect to the logits."""
    z = np.asarray(scores, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if z.shape != t.shape:
        raise ParameterError(f"score shape {z.shape} does not match target shape {t.shape}")
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite scores passed to BCE loss")
    per = -(t * log_sigmoid(z) + (1.0 - t) * log_sigmoid(-z))
    return float(per.mean()), (sigmoid_map(z) - t) / z.size


def ce_loss(scores, target):
    """Softmax cross-entropy for class index ``target`` (one per row when batched)."""
    z = np.asarray(scores, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None] if single else z
    target = np.atleast_1d(np.asarray(target, dtype=np.int64))
    c = z2.shape[-1]
    if target.shape[0] != z2.shape[0] or np.any(target < 0) or np.any(target >= c):
        raise ParameterError(f"targets {target.tolist()} invalid for {c} classes")
    if not np.all(np.isfinite(z2)):
        raise NumericError("non-finite scores passed to CE loss")
    shifted = z2 - z2.max(axis=-1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=-1))
    rows = np.arange(z2.shape[0])
    loss = float(np.mean(log_norm - shifted[rows, target]))
    grad = row_softmax(z2)
    grad[rows, target] -= 1.0
    grad /= z2.shape[0]
    return loss, (grad[0] if single else grad)


def loss_and_grad(scores, labels, loss_kind, num_classes):
    if loss_kind == "ce":
        return ce_loss(scores, labels)
    return bce_multilabel_loss(scores, ordinal_encode(labels, num_classes))


def class_weights(labels):
    """Per-sample weights ``1 / count(label)`` for class-balanced sampling."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ParameterError("class weights need at least one label")
    _, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    return 1.0 / counts[inverse]


def weighted_draw(weights, size, rng):
    p = np.asarray(weights, dtype=np.float64)
    return rng.choice(p.size, size=size, replace=True, p=p / p.sum())


def augment_batch(features, noise_std, rng):
    """Add i.i.d. N(0, noise_std^2) to every entry, padding rows included."""
    if noise_std < 0:
        raise ParameterError(f"noise_std must be >= 0, got {noise_std}")
    features = np.asarray(features, dtype=np.float64)
    if noise_std == 0:
        return features.copy()
    return features + noise_std * rng.standard_normal(features.shape)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 0.001
    weight_decay: float = 0.05
    noise_std: float = 1.5
    patience: int = 10
    loss_kind: str = "ce"
    seed: int = 0
    monitor_metric: str = "balanced_accuracy"
    bag_size: int = DEFAULT_BAG_SIZE
    resample_each_epoch: bool = False
    eval_batch: int = 64

    def __post_init__(self):
        for name in ("epochs", "batch_size", "patience", "bag_size", "eval_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.monitor_metric not in MONITOR_METRICS:
            raise ConfigError(f"monitor_metric must be one of {MONITOR_METRICS}")

    @classmethod
    def field_names(cls):
        return {f.name for f in fields(cls)}


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float
    val_balanced_accuracy: float
    val_qwk: float
    val_weighted_f1: float
    val_loss: float = float("nan")


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRAINLOG_HEADER)
            for r in self.records:
                writer.writerow([r.epoch] + [repr(float(getattr(r, k))) for k in TRAINLOG_HEADER[1:]])


class EarlyStopper:
    """Tracks the best monitored value; ``update`` returns True when training should stop."""

    def __init__(self, patience, mode="max"):
        self.patience = patience
        self.mode = mode
        self.best = None
        self.best_epoch = 0
        self.stagnant = 0

    def improved(self, value):
        if value is None or np.isnan(value):
            return False
        if self.best is None:
            return True
        return value > self.best if self.mode == "max" else value < self.best

    def update(self, epoch, value):
        if self.improved(value):
            self.best, self.best_epoch, self.stagnant = value, epoch, 0
            return False
        self.stagnant += 1
        return self.stagnant >= self.patience


class BagSet:
    """A manifest split loaded into one ``(N, bag_size, m)`` array."""

    def __init__(self, manifest, tag, bag_size, rng, groups=None):
        self.entries = manifest.split(tag)
        if not self.entries:
            raise ConfigError(f"split {tag!r} of the manifest is empty")
        self.raw = [manifest.load_bag(e) for e in self.entries]
        if groups is not None:
            cols = manifest.layout.columns(groups)
            layout = manifest.layout.subset(groups)
            self.raw = [FeatureBag(b.bag_id, b.features[:, cols], b.label, layout) for b in self.raw]
        self.labels = np.array([b.label for b in self.raw], dtype=np.int64)
        self.bag_size = bag_size
        self.resample(rng)

    def resample(self, rng):
        self.features = np.stack([sample_or_pad(b, self.bag_size, rng).features for b in self.raw])

    def __len__(self):
        return len(self.raw)


def _batched_scores(model, params, features, eval_batch):
    chunks = [
        model.forward(features[i : i + eval_batch], params, training=False)[0]
        for i in range(0, len(features), eval_batch)
    ]
    return np.concatenate(chunks, axis=0)


def positive_scores(scores, loss_kind):
    """Probability-like score for class 1 of a binary task (used for AUC)."""
    if loss_kind == "ce":
        return row_softmax(scores)[:, 1]
    return sigmoid_map(scores[:, 0])


def evaluate_arrays(model, params, features, labels, num_classes, loss_kind, eval_batch=64):
    scores = _batched_scores(model, params, features, eval_batch)
    preds = predict_label(scores, loss_kind)
    auc_scores = positive_scores(scores, loss_kind) if num_classes == 2 else None
    report = metrics_report(labels, preds, num_classes, auc_scores)
    loss, _ = loss_and_grad(scores, labels, loss_kind, num_classes)
    return report, loss


def evaluate_split(manifest, tag, model, params, bag_size=DEFAULT_BAG_SIZE, seed=0, eval_batch=64, groups=None):
    """Metrics for one split in inference mode (no dropout, no noise).

    Bags larger than ``bag_size`` are subsampled with a fresh generator seeded
    from ``seed``, so repeated calls give identical reports.
    """
    model = _as_model(model)
    _check_compatible(manifest, model, groups)
    data = BagSet(manifest, tag, bag_size, make_rng(seed), groups)
    cfg = model.config
    report, _ = evaluate_arrays(model, params, data.features, data.labels, manifest.num_classes, cfg.loss_kind, eval_batch)
    return report


def _as_model(model):
    if isinstance(model, GasMilConfig):
        return GasMil(model)
    return model


def _check_compatible(manifest, model, groups=None):
    mcfg = model.config
    layout = manifest.layout if groups is None else manifest.layout.subset(groups)
    if mcfg.layout != layout:
        raise ConfigError(
            f"layout mismatch: model expects groups {list(mcfg.layout.names)} with widths "
            f"{list(mcfg.layout.dims)}, data has {list(layout.names)} with widths {list(layout.dims)}"
        )
    if mcfg.num_classes != manifest.num_classes:
        raise ConfigError(f"model has {mcfg.num_classes} classes, manifest has {manifest.num_classes}")


def fit(manifest, model, config, progress=None, groups=None):
    """Train ``model`` on the manifest's train split, early-stopping on val.

    ``groups`` optionally restricts training to a subset of the feature
    groups (the model's layout must then equal that subset).  Returns
    ``(params, log)`` with ``params`` restored to the best monitored epoch.
    Every random draw comes from ``config.seed``.
    """
    model = _as_model(model)
    mcfg = model.config
    if mcfg.loss_kind != config.loss_kind:
        raise ConfigError(f"model built for {mcfg.loss_kind!r} loss, training config says {config.loss_kind!r}")
    _check_compatible(manifest, model, groups)
    c = manifest.num_classes

    init_seq, data_seq, train_seq = np.random.SeedSequence(config.seed).spawn(3)
    params = model.init_params(make_rng(init_seq))
    data_rng = make_rng(data_seq)
    rng = make_rng(train_seq)
    train = BagSet(manifest, "train", config.bag_size, data_rng, groups)
    val = BagSet(manifest, "val", config.bag_size, make_rng(config.seed), groups)
    weights = class_weights(train.labels)
    steps = -(-len(train) // config.batch_size)

    mode = "min" if config.monitor_metric == "loss" else "max"
    stopper = EarlyStopper(config.patience, mode)
    log = TrainLog()
    best = params.snapshot()
    for epoch in range(1, config.epochs + 1):
        if config.resample_each_epoch and epoch > 1:
            train.resample(data_rng)
        total = 0.0
        for step in range(steps):
            idx = weighted_draw(weights, config.batch_size, rng)
            x = augment_batch(train.features[idx], config.noise_std, rng)
            scores, trace = model.forward(x, params, training=True, rng=rng)
            try:
                loss, dscores = loss_and_grad(scores, train.labels[idx], config.loss_kind, c)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {step + 1}: {exc}") from None
            if not np.isfinite(loss):
                raise NumericError(f"epoch {epoch}, batch {step + 1}: loss became {loss}")
            grads = model.backward(trace, dscores)
            for p in params:
                p.grad[...] = grads[p.name]
                try:
                    adamw_step(p, lr=config.lr, wd=config.weight_decay)
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch}, batch {step + 1}: {exc}") from None
            params.bump()
            total += loss
        report, val_loss = evaluate_arrays(model, params, val.features, val.labels, c, config.loss_kind, config.eval_batch)
        record = EpochRecord(
            epoch,
            total / steps,
            report.accuracy,
            report.balanced_accuracy,
            report.get("qwk"),
            report.weighted_f1,
            val_loss,
        )
        log.records.append(record)
        monitored = val_loss if config.monitor_metric == "loss" else report.get(config.monitor_metric)
        if stopper.improved(monitored):
            best = params.snapshot()
        stop = stopper.update(epoch, monitored)
        logger.debug("epoch %d loss %.5f val %s %.4f", epoch, record.train_loss, config.monitor_metric, monitored)
        if progress is not None:
            progress(record)
        if stop:
            log.stop_reason = f"no improvement in {config.patience} epochs"
            break
    else:
        log.stop_reason = "epoch limit"
    log.best_epoch = stopper.best_epoch
    params.load(best)
    return params, log


def write_report(path, report):
    Path(path).write_text(report.dumps() + "\n")


SWEEP_HEADER = ("k", "combo", "accuracy", "balanced_accuracy", "qwk", "weighted_f1")


def ensemble_sweep(manifest, make_model, config, sizes=None, split="test"):
    """Train one model per subset of feature groups and score it on ``split``.

    ``make_model(layout)`` builds a fresh model for a sub-layout.  Yields one
    row per subset, smallest subsets first, as a dict keyed by ``SWEEP_HEADER``.
    """
    K = manifest.layout.num_groups
    sizes = range(1, K + 1) if sizes is None else sizes
    for k in sizes:
        for combo in combinations(range(K), k):
            layout = manifest.layout.subset(combo)
            model = make_model(layout)
            params, _ = fit(manifest, model, config, groups=combo)
            report = evaluate_split(manifest, split, model, params, config.bag_size, config.seed, config.eval_batch, combo)
            yield {
                "k": k,
                "combo": "+".join(layout.names),
                "accuracy": report.accuracy,
                "balanced_accuracy": report.balanced_accuracy,
                "qwk": report.get("qwk"),
                "weighted_f1": report.weighted_f1,
            }
