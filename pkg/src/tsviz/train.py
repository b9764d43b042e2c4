"""Losses, Adam, plateau learning-rate decay, early stopping and the classifier loop."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigurationError, DataError, NumericalError, TrainingDiverged

logger = logging.getLogger(__name__)

# relative slack when comparing an improvement against min_delta, so that an
# improvement of exactly min_delta is not lost to float rounding
_DELTA_SLACK = 1e-9


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 1024
    lr: float = 0.001
    lr_decay_factor: float = 0.5
    lr_patience: int = 4
    min_lr: float = 0.0001
    early_stop_min_delta: float = 0.0001
    early_stop_patience: int = 6
    dropout_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        for key in ("batch_size", "lr_patience", "early_stop_patience"):
            if getattr(self, key) < 1:
                raise ConfigurationError(f"{key} must be positive")
        if not (self.lr > 0 and self.min_lr > 0 and self.early_stop_min_delta >= 0):
            raise ConfigurationError("learning rates must be positive and min_delta non-negative")
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ConfigurationError("lr_decay_factor must lie in (0, 1)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must lie in [0, 1)")


# ---------------------------------------------------------------- losses


def class_weights(labels, n_classes):
    """``w_c = N / (C * N_c)`` for 0-based class indices."""
    labels = np.asarray(labels, dtype=int)
    counts = np.bincount(labels, minlength=n_classes)[:n_classes]
    for c, n in enumerate(counts):
        if n == 0:
            raise DataError(f"class {c} has no samples; cannot compute its weight")
    return labels.size / (n_classes * counts.astype(np.float64))


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def weighted_cross_entropy(probs, targets, weights):
    """Batch mean of ``-sum_c w_c t_c log(s_c)`` with the log argument clamped at 1e-12."""
    targets = np.asarray(targets, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if probs.shape != targets.shape or weights.shape != (probs.shape[-1],):
        raise ConfigurationError(f"loss shapes disagree: probs {probs.shape}, targets {targets.shape}, weights {weights.shape}")
    per_entry = ad.log(probs) * Tensor(weights * targets)
    return ad.neg(ad.sum(per_entry)) * (1.0 / probs.shape[0])


def cross_entropy(probs, targets):
    targets = np.asarray(targets, dtype=np.float64)
    return ad.neg(ad.sum(ad.log(probs) * Tensor(targets))) * (1.0 / probs.shape[0])


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8).

    ``params`` is a name -> tensor mapping; gradients are read from ``.grad``.
    ``constraints`` are called after every step (used for the TABL projections).
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, constraints=()):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros(p.shape) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in self.params.items()}
        self.t = 0
        self.constraints = list(constraints)

    def step(self, lr, grads=None):
        if grads is None:
            grads = {k: p.grad for k, p in self.params.items()}
        grads = {k: (np.zeros(p.shape) if grads.get(k) is None else grads[k]) for k, p in self.params.items()}
        for k, g in grads.items():
            if not np.isfinite(g).all():
                raise NumericalError(f"non-finite gradient for {k}; step aborted")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            m_hat = self.m[k] / corr1
            v_hat = self.v[k] / corr2
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        for fn in self.constraints:
            fn()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def adam_step(params, grads, state, lr):
    """Functional form: one Adam update of ``params`` (name -> tensor) in place."""
    if set(params) != set(state.params):
        raise ConfigurationError("optimizer state does not match the parameter set")
    state.step(lr, grads)
    return params


# ---------------------------------------------------------------- schedules


def _improved(best, value, min_delta):
    return best - value >= min_delta * (1.0 - _DELTA_SLACK)


class PlateauSchedule:
    """Multiply the rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr, factor=0.5, patience=4, min_lr=0.0001, min_delta=0.0001):
        self.lr = lr
        self.factor, self.patience, self.min_lr, self.min_delta = factor, patience, min_lr, min_delta
        self.best = np.inf
        self.wait = 0

    def update(self, loss):
        if _improved(self.best, loss, self.min_delta):
            self.best = loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.wait = 0
        return self.lr


class EarlyStopping:
    def __init__(self, min_delta=0.0001, patience=6):
        self.min_delta, self.patience = min_delta, patience
        self.best = np.inf
        self.wait = 0

    def update(self, loss):
        """Record one epoch's loss; returns True when training should stop."""
        if _improved(self.best, loss, self.min_delta):
            self.best = loss
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


def lr_schedule_update(schedule, monitored_loss):
    return schedule.update(monitored_loss)


def early_stop_update(stopper, monitored_loss):
    return "stop" if stopper.update(monitored_loss) else "continue"


# ---------------------------------------------------------------- loops


def epoch_batches(n, batch_size, seed, epoch):
    """Shuffled index batches for one epoch; the last partial batch is kept."""
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def emit(log, record):
    """Write one progress record as a JSON line to ``log`` (file-like or callable)."""
    line = json.dumps(record, sort_keys=True)
    if log is None:
        logger.debug(line)
    elif callable(log):
        log(line)
    else:
        log.write(line + "\n")


def fit(params, loss_fn, batches_fn, cfg, constraints=(), log=None, stage="classifier", checkpoint_fn=None):
    """Generic Adam loop with plateau decay and early stopping on the epoch loss.

    ``loss_fn(batch, epoch_rng)`` returns a scalar tensor recorded on the active
    tape; ``batches_fn(epoch)`` yields batches. Returns the per-epoch history.
    """
    opt = Adam(params, constraints=constraints)
    schedule = PlateauSchedule(cfg.lr, cfg.lr_decay_factor, cfg.lr_patience, cfg.min_lr, cfg.early_stop_min_delta)
    stopper = EarlyStopping(cfg.early_stop_min_delta, cfg.early_stop_patience)
    history = []
    last_good = {k: p.data.copy() for k, p in params.items()}
    lr = cfg.lr
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch, 1])
        total, count = 0.0, 0
        try:
            for batch in batches_fn(epoch):
                opt.zero_grad()
                with Tape() as tape:
                    loss = loss_fn(batch, rng)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericalError("loss is not finite")
                ad.backward(loss, tape)
                opt.step(lr)
                size = len(batch[0]) if isinstance(batch, tuple) else len(batch)
                total += value * size
                count += size
        except NumericalError as exc:
            for k, p in params.items():
                p.data = last_good[k].copy()
            ckpt = checkpoint_fn(epoch - 1) if checkpoint_fn else None
            raise TrainingDiverged(f"{stage} diverged in epoch {epoch}: {exc}", epoch, last_good, ckpt) from exc
        epoch_loss = total / max(count, 1)
        new_lr = schedule.update(epoch_loss)
        stop = stopper.update(epoch_loss)
        record = {
            "stage": stage,
            "epoch": epoch,
            "loss": epoch_loss,
            "lr": lr,
            "lr_wait": schedule.wait,
            "stop_wait": stopper.wait,
        }
        history.append(record)
        emit(log, record)
        last_good = {k: p.data.copy() for k, p in params.items()}
        lr = new_lr
        if stop:
            break
    return history


def train_classifier(net, data, cfg, log=None, checkpoint_fn=None):
    """Minimise the class-weighted cross-entropy of ``C(F(X))`` with Adam.

    ``data`` is a :class:`~tsviz.data.WindowedDataset`. Returns ``(net, history)``.
    """
    n_classes = net.n_classes
    weights = class_weights(data.y, n_classes)
    targets = one_hot(data.y, n_classes)
    X = data.X
    params = net.parameters("FC")
    saved = {k: p.requires_grad for k, p in params.items()}
    for p in params.values():
        p.requires_grad = True

    def loss_fn(idx, rng):
        x, _ = net._prepare(X[idx])
        probs = net.forward_C(net.forward_F(x, "train", rng))
        return weighted_cross_entropy(probs, targets[idx], weights)

    try:
        history = fit(
            params,
            loss_fn,
            lambda epoch: epoch_batches(len(X), cfg.batch_size, cfg.seed, epoch),
            cfg,
            constraints=[net.apply_constraints],
            log=log,
            stage="classifier",
            checkpoint_fn=checkpoint_fn,
        )
    finally:
        for k, p in params.items():
            p.requires_grad = saved[k]
    if cfg.epochs > 0:
        net.trained = True
    return net, history


def predict(net, X, batch_size=4096):
    """Class index with maximal probability for every sample of ``X``."""
    out = []
    with ad.no_grad():
        for i in range(0, len(X), batch_size):
            x, _ = net._prepare(X[i : i + batch_size])
            out.append(net.forward_C(net.forward_F(x)).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def config_dict(cfg):
    return asdict(cfg)
