"""Victim training: plain ERM, augmented ERM, MaxUp and DP-SGD."""

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import augment
from .augment import AugmentationPolicy
from .model import (
    Dense,
    Flatten,
    Model,
    ReLU,
    accuracy,
    cross_entropy,
    cross_entropy_rows,
    forward,
    grad_params,
    sgd_step,
)

DEFENSE_KINDS = ("none", "standard", "mixup", "cutmix", "cutout", "maxup", "dpsgd")


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class DefensePolicy:
    """Which defense the victim trains with.

    ``clip`` and ``sigma`` only matter for ``dpsgd``; noise has standard
    deviation ``sigma * clip / batch_size`` on the averaged clipped gradient.
    """

    kind: str = "standard"
    k: int = 2
    alpha: float = 1.0
    patch_side: int = 8
    m: int = 4
    base: str = "cutout"
    clip: float = 1.0
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ValueError(f"unknown defense kind {self.kind!r}")
        if self.kind == "dpsgd":
            if not self.clip > 0:
                raise ValueError("dpsgd needs clip > 0")
            if not self.sigma >= 0:
                raise ValueError("dpsgd needs sigma >= 0")
            if math.isinf(self.clip) and self.sigma > 0:
                raise ValueError("dpsgd noise is undefined for an infinite clip norm")
        else:
            self.augmentation  # validates the augmentation parameters

    @property
    def augmentation(self):
        if self.kind == "dpsgd":
            return AugmentationPolicy("standard")
        return AugmentationPolicy(self.kind, self.k, self.alpha, self.patch_side, self.m, self.base)

    @property
    def uses_base_augment(self):
        return self.kind != "none"

    def label(self):
        if self.kind == "dpsgd":
            return f"dpsgd(sigma={self.sigma:g})"
        return self.augmentation.label()

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    defense: DefensePolicy = field(default_factory=DefensePolicy)
    decay_epochs: tuple = ()
    decay_factor: float = 0.1
    base_augment: bool = True
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or not self.lr > 0:
            raise ValueError("epochs must be >= 0, batch size and lr positive")
        if not self.weight_decay >= 0:
            raise ValueError("weight decay must be nonnegative")

    def lr_at(self, epoch):
        return self.lr * self.decay_factor ** sum(epoch >= e for e in self.decay_epochs)

    def to_dict(self):
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass
class History:
    records: list = field(default_factory=list)
    soft_label_batches: int = 0
    max_clipped_norm: float = 0.0
    maxup_dominance_violations: int = 0

    @property
    def final_val_accuracy(self):
        return self.records[-1].val_accuracy if self.records else float("nan")

    def losses(self):
        return [r.train_loss for r in self.records]

    def to_csv(self, path, fingerprint=""):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_accuracy", "config_fingerprint"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_accuracy), fingerprint])


def read_history_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return History(
        [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_accuracy"])) for r in rows]
    )


# ------------------------------------------------------------------- maxup


def maxup_loss(model, images, labels, m, base, rng, patch_side=8):
    """Mean over examples of the worst loss among ``m`` augmented copies.

    Only each example's argmax copy (lowest index on ties) carries gradient.
    Returns ``(loss, copy_losses [B, m])``.
    """
    n_classes = model.n_classes
    copies, soft = augment.maxup_batch(images, labels, m, base, rng, n_classes, patch_side)
    rows = cross_entropy_rows(forward(model, copies), soft)
    per_copy = rows.data.reshape(-1, m)
    pick = per_copy.argmax(axis=1) + np.arange(len(per_copy)) * m
    worst = ad.take_rows(rows, pick)
    loss = ad.mul(ad.sum_(worst), 1.0 / len(pick))
    return loss, per_copy.copy()


# ------------------------------------------------------------------- DP-SGD


def per_example_grads(model, images, labels):
    """``[B, p]`` gradients, one backward pass per example."""
    images = np.asarray(images)
    labels = augment._soft(labels, model.n_classes)
    out = np.empty((len(images), model.n_params))
    for b in range(len(images)):
        loss = cross_entropy(forward(model, images[b : b + 1]), labels[b : b + 1])
        out[b] = grad_params(loss, model)
    return out


def clip_factors(norms, clip):
    with np.errstate(divide="ignore"):
        return np.minimum(1.0, clip / norms)


def dp_sgd_step(model, per_example, clip, sigma, lr, rng, momentum=0.0):
    """Clip each row to norm ``clip``, average, add N(0, (sigma*clip/B)^2), step.

    Returns the post-clip per-example norms.
    """
    g = np.asarray(per_example, dtype=np.float64)
    if not clip > 0:
        raise ValueError("clip must be positive")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite per-example gradients")
    norms = np.linalg.norm(g, axis=1)
    scale = clip_factors(norms, clip)
    update = (g * scale[:, None]).mean(axis=0)
    if sigma > 0:
        update = update + rng.normal(0.0, sigma * clip / len(g), size=update.shape)
    sgd_step(model, update, lr, momentum)
    return norms * scale


def _dense_only(model):
    return all(isinstance(layer, (Dense, ReLU, Flatten)) for layer in model.layers)


def fused_clipped_mean(model, images, labels, clip):
    """Clipped mean of per-example gradients for dense-only models, in one pass.

    For a dense layer the per-example weight gradient is ``outer(a_b, d_b)``,
    whose squared norm is ``|a_b|^2 |d_b|^2``; so norms and the clipped sum
    come from layer inputs ``a`` and output gradients ``d`` without
    materialising ``[B, p]``. Returns ``(mean_grad, post_clip_norms)``.
    """
    x = ad.as_tensor(np.asarray(images, dtype=np.float64))
    labels = augment._soft(labels, model.n_classes)
    taps = []
    for i, (layer, params) in enumerate(zip(model.layers, model._layer_params)):
        y = layer(x, params)
        if isinstance(layer, Dense):
            taps.append((i, x.data, y))
        x = y
    loss = ad.sum_(cross_entropy_rows(x, labels))
    deltas = ad.grad(loss, [t[2] for t in taps])
    sq = np.zeros(len(labels))
    for (_, a, _), d in zip(taps, deltas):
        sq += (a * a).sum(axis=1) * (d.data * d.data).sum(axis=1) + (d.data * d.data).sum(axis=1)
    norms = np.sqrt(sq)
    scale = clip_factors(norms, clip)
    flat = np.empty(model.n_params)
    pos = 0
    B = len(labels)
    for (_, a, _), d in zip(taps, deltas):
        sd = d.data * scale[:, None]
        gw = a.T @ sd / B
        gb = sd.sum(axis=0) / B
        for g in (gw, gb):
            flat[pos : pos + g.size] = g.ravel()
            pos += g.size
    return flat, norms * scale


def dp_gradient(model, images, labels, clip, sigma, rng):
    """Noised clipped-mean gradient; picks the fused path for dense-only models."""
    B = len(images)
    if _dense_only(model):
        mean, post = fused_clipped_mean(model, images, labels, clip)
    else:
        g = per_example_grads(model, images, labels)
        norms = np.linalg.norm(g, axis=1)
        scale = clip_factors(norms, clip)
        mean, post = (g * scale[:, None]).mean(axis=0), norms * scale
    if sigma > 0:
        mean = mean + rng.normal(0.0, sigma * clip / B, size=mean.shape)
    return mean, post


# ------------------------------------------------------------------- train


def _check_finite(loss, epoch, batch):
    if not np.isfinite(loss):
        raise TrainingAborted(f"non-finite loss at epoch {epoch}, batch {batch}")


def train_step(model, images, labels, config, rng, lr=None, history=None):
    """One defended update on a batch; returns the batch training loss."""
    lr = config.lr if lr is None else lr
    defense = config.defense
    n_classes = model.n_classes
    if config.base_augment and defense.uses_base_augment:
        images = augment.standard_batch(images, rng)
    kind = defense.kind
    if kind == "maxup":
        loss, copy_losses = maxup_loss(
            model, images, labels, defense.m, defense.base, rng, defense.patch_side
        )
        if history is not None and loss.item() < copy_losses.mean() - 1e-12:
            history.maxup_dominance_violations += 1
    elif kind == "dpsgd" and not math.isinf(defense.clip):
        with ad.Tape():
            grad, post = dp_gradient(model, images, labels, defense.clip, defense.sigma, rng)
        if history is not None:
            history.max_clipped_norm = max(history.max_clipped_norm, float(post.max()))
        with ad.no_grad():
            value = cross_entropy(forward(model, images), labels).item()
        if not np.isfinite(value):
            return value
        _step(model, grad, lr, config)
        return value
    else:
        images, soft = augment.apply_policy(defense.augmentation, images, labels, rng, n_classes)
        if defense.augmentation.mixes_labels and history is not None:
            history.soft_label_batches += 1
        loss = cross_entropy(forward(model, images), soft)
    value = loss.item()
    if not np.isfinite(value):
        return value
    _step(model, grad_params(loss, model), lr, config)
    return value


def _step(model, grad, lr, config):
    if config.weight_decay:
        grad = grad + config.weight_decay * model.params
    sgd_step(model, grad, lr, config.momentum)


def train(model, dataset, config, rng, val=None):
    """Train ``model`` in place on ``dataset``; returns a :class:`History`.

    ``val`` (a Dataset) is scored after every epoch when given.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    history = History()
    images, labels = dataset.images, dataset.labels
    n = len(dataset)
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for b, s in enumerate(range(0, n, config.batch_size)):
            idx = order[s : s + config.batch_size]
            if config.defense.kind == "mixup" and len(idx) < config.defense.k:
                continue
            loss = train_step(model, images[idx], labels[idx], config, rng, lr, history)
            _check_finite(loss, epoch, b)
            total += loss * len(idx)
            seen += len(idx)
        val_acc = accuracy(model, val.images, val.labels) if val is not None else float("nan")
        history.records.append(EpochRecord(epoch, total / max(seen, 1), val_acc))
    return history


# -------------------------------------------------------------- checkpoints


def save_checkpoint(model, path, meta=None):
    np.savez(
        path,
        params=model.params,
        model=np.str_(json.dumps(model.describe(), sort_keys=True)),
        meta=np.str_(json.dumps(meta or {}, sort_keys=True)),
    )


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        model = Model.from_description(json.loads(str(z["model"])))
        model.set_params(z["params"])
        meta = json.loads(str(z["meta"]))
    return model, meta
