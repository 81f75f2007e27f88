"""Optimization harness: cross-entropy, AdamW, cosine schedule, fit loops.

Both stages train the same way: shuffle sample order with a seeded
generator, accumulate gradients over a batch (per-sample backward scaled
by 1/batch), take one decoupled-weight-decay AdamW step per batch, and
anneal the learning rate with a cosine over total steps. Stage one fits
the full encoder (backbone plus attention module with its linear head) on
keyframe labels; stage two fits the consistency encoder on per-position
labels over embedding windows, with stage one untouched.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .errors import ConfigError, NumericalError
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 5
    batch_size: int = 8
    seed: int = 0
    mode: str = "offline"
    dropout: float = 0.0

    def __post_init__(self):
        if self.lr0 <= 0 or self.weight_decay <= 0:
            raise ConfigError("lr0 and weight_decay must be positive")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of the labeled class, log-sum-exp stable."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    z = logits.data
    if z.ndim != 2:
        raise ValueError(f"cross_entropy: logits must be 2-D, got {z.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    b, c = z.shape
    if b == 0:
        raise ValueError("cross_entropy: no rows")
    if labels.shape != (b,):
        raise ValueError(f"cross_entropy: {b} rows but labels shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(
            f"cross_entropy: labels outside [0, {c}): "
            f"min {labels.min()}, max {labels.max()}"
        )
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    losses = lse - z[np.arange(b), labels]
    value = np.float64(losses.mean())

    def backward(g):
        if logits.requires_grad:
            p = np.exp(z - lse[:, None])
            p[np.arange(b), labels] -= 1.0
            logits._accum(p * (float(g) / b))

    return tz._from_op(value, (logits,), backward)


def cosine_lr(step, total_steps, lr0):
    """Cosine decay from lr0 at step 0 to 0 at total_steps (clamped beyond)."""
    if total_steps < 1:
        raise ConfigError(f"total_steps must be >= 1, got {total_steps}")
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    s = min(step, total_steps)
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * s / total_steps))


class AdamWState:
    """First/second moment buffers keyed by parameter name, plus step count."""

    def __init__(self):
        self.step = 0
        self.m = {}
        self.v = {}


def adamw_step(named_params, state: AdamWState, lr, cfg: TrainConfig):
    """One decoupled-weight-decay Adam update over all named parameters.

    The decay multiplies the pre-update weights, separately from the
    bias-corrected adaptive step, so a zero gradient shrinks weights by
    exactly (1 - lr * weight_decay).
    """
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    for name, p in named_params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.isfinite(g).all():
            raise NumericalError(
                f"non-finite gradient in {name!r} at optimizer step {t}"
            )
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        # decay applied to the weights themselves, separate from the adaptive
        # step, so a zero gradient shrinks by exactly (1 - lr * weight_decay)
        p.data = p.data * (1.0 - lr * cfg.weight_decay) \
            - lr * mhat / (np.sqrt(vhat) + cfg.eps)
    return state


@dataclass
class EpochStats:
    epoch: int
    split: str
    loss: float
    accuracy: float
    lr: float


def write_history_csv(history, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "split", "loss", "accuracy", "lr"])
        for row in history:
            writer.writerow(
                [row.epoch, row.split, f"{row.loss:.12g}", f"{row.accuracy:.12g}",
                 f"{row.lr:.12g}"]
            )


def _batches(order, batch_size):
    for i in range(0, len(order), batch_size):
        yield order[i : i + batch_size]


def _fit(model_forward, named_params, dataset, cfg, eval_forward=None,
         val_dataset=None, stage="train"):
    """Shared batch loop. ``model_forward(sample, rng)`` returns
    (loss tensor, n_correct, n_items) with gradients flowing to
    ``named_params``."""
    n = len(dataset)
    if n == 0:
        raise ConfigError(f"{stage}: empty dataset")
    rng = np.random.default_rng(cfg.seed)
    state = AdamWState()
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    history = []
    global_step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        seen = 0
        lr = cfg.lr0
        max_grad_norm = 0.0
        for batch in _batches(order, cfg.batch_size):
            lr = cosine_lr(global_step, total_steps, cfg.lr0)
            for idx in batch:
                loss, n_correct, n_items = model_forward(dataset[int(idx)], rng)
                if not np.isfinite(loss.data):
                    raise NumericalError(
                        f"{stage}: non-finite loss at step {global_step}"
                    )
                tz.scale(loss, 1.0 / len(batch)).backward()
                loss_sum += loss.item() * n_items
                correct += n_correct
                seen += n_items
            sq = 0.0
            for p in named_params.values():
                if p.grad is not None:
                    sq += float((p.grad * p.grad).sum())
            max_grad_norm = max(max_grad_norm, math.sqrt(sq))
            adamw_step(named_params, state, lr, cfg)
            for p in named_params.values():
                p.zero_grad()
            global_step += 1
        stats = EpochStats(
            epoch=epoch, split="train", loss=loss_sum / seen,
            accuracy=correct / seen, lr=lr,
        )
        history.append(stats)
        log.info(
            "%s epoch %d: loss %.6f acc %.4f lr %.3g max|g| %.3g",
            stage, epoch, stats.loss, stats.accuracy, lr, max_grad_norm,
        )
        if val_dataset is not None and eval_forward is not None:
            vloss, vacc = _evaluate(eval_forward, val_dataset)
            history.append(
                EpochStats(epoch=epoch, split="val", loss=vloss, accuracy=vacc, lr=lr)
            )
            log.info("%s epoch %d: val loss %.6f acc %.4f", stage, epoch, vloss, vacc)
    return history


def _evaluate(eval_forward, dataset):
    loss_sum = 0.0
    correct = 0
    seen = 0
    with tz.no_grad():
        for i in range(len(dataset)):
            loss, n_correct, n_items = eval_forward(dataset[i])
            loss_sum += float(loss.data) * n_items
            correct += n_correct
            seen += n_items
    return loss_sum / seen, correct / seen


def fit_mtfe(dataset, cfg: TrainConfig, model, val_dataset=None):
    """Train the stage-one encoder end to end on keyframe labels.

    ``dataset[i]`` yields (pyramid frame stacks, keyframe label). Returns
    the per-epoch history; the model is updated in place.
    """
    named = model.named_parameters()

    def forward(sample, rng):
        frames, label = sample
        use_rng = rng if cfg.dropout > 0 else None
        _, logits = model.forward(frames, cfg.dropout, use_rng)
        loss = cross_entropy(logits, [label])
        pred = int(np.argmax(logits.data[0]))
        return loss, int(pred == label), 1

    def eval_forward(sample):
        frames, label = sample
        _, logits = model.forward(frames)
        loss = cross_entropy(logits, [label])
        pred = int(np.argmax(logits.data[0]))
        return loss, int(pred == label), 1

    return _fit(forward, named, dataset, cfg, eval_forward, val_dataset,
                stage="mtfe")


def fit_tcm(dataset, cfg: TrainConfig, encoder, val_dataset=None):
    """Train the consistency encoder on per-position window labels.

    ``dataset[i]`` yields (window embedding rows, per-position labels).
    Stage-one parameters are not touched; the encoder is updated in place.
    """
    named = encoder.named_parameters()

    def forward(sample, rng):
        window, labels = sample
        use_rng = rng if cfg.dropout > 0 else None
        logits = encoder.encode_window(window, cfg.dropout, use_rng)
        loss = cross_entropy(logits, labels)
        preds = logits.data.argmax(axis=1)
        return loss, int((preds == labels).sum()), len(labels)

    def eval_forward(sample):
        window, labels = sample
        logits = encoder.encode_window(window)
        loss = cross_entropy(logits, labels)
        preds = logits.data.argmax(axis=1)
        return loss, int((preds == labels).sum()), len(labels)

    return _fit(forward, named, dataset, cfg, eval_forward, val_dataset,
                stage="tcm")
