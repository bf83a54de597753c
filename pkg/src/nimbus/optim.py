"""AdamW, early stopping, the epoch loop, and per-region orchestration.

Training is deterministic end to end: batch order comes from seeded
permutations, per-epoch seeds are derived with a stable hash, and the
optimizer touches parameters in their fixed iteration order.  Rerunning
with the same (seed, data, config) reproduces checkpoints bitwise.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
import zlib

import numpy as np

from . import data as D
from . import layers as L
from . import tensor as T
from .errors import ConfigError, PoisonedGradientError, StateError
from .model import _atomic_write, build_model, save_checkpoint


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 10
    patience: int = 3
    min_delta: float = 0.0
    seed: int = 0
    shuffle: bool = True
    loss: str = "bce_logits"
    lr: float = 1e-3
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    threshold: float = 0.2        # rain rate (mm/h) binarizing bce targets

    def __post_init__(self):
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("max_epochs, batch_size, and patience must be >= 1")
        if self.min_delta < 0 or self.lr < 0:
            raise ConfigError("min_delta and lr must be >= 0")
        if self.loss not in ("bce_logits", "mse"):
            raise ConfigError(f"unknown loss {self.loss!r}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class AdamW:
    """Adam with decoupled weight decay.

    Each step first shrinks every parameter by lr*weight_decay, then applies
    the bias-corrected Adam update; with zero gradients and fresh moments the
    step is therefore exactly multiplicative decay.  A step is refused whole
    if any gradient contains NaN or Inf.
    """

    def __init__(self, model, config):
        self.cfg = config
        self.step_count = 0
        self.m = {name: np.zeros_like(p) for name, p in model.named_params()}
        self.v = {name: np.zeros_like(p) for name, p in model.named_params()}

    def step(self, model, grads):
        params = dict(model.named_params())
        if set(grads) != set(self.m):
            raise StateError("gradient names do not match the optimizer state")
        for name, g in grads.items():
            if g is None or g.shape != params[name].shape:
                raise StateError(f"gradient for {name} is missing or misshapen")
            if not np.all(np.isfinite(g)):
                raise PoisonedGradientError(f"non-finite gradient in {name}; step refused")
        c = self.cfg
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - c.beta1 ** t
        bc2 = 1.0 - c.beta2 ** t
        for name, p in params.items():
            g = grads[name]
            dt = p.dtype.type
            if c.weight_decay:
                p *= (1 - dt(c.lr) * dt(c.weight_decay))
            m = self.m[name]
            v = self.v[name]
            m *= dt(c.beta1)
            m += dt(1 - c.beta1) * g
            v *= dt(c.beta2)
            v += dt(1 - c.beta2) * np.square(g)
            p -= dt(c.lr) * (m / dt(bc1)) / (np.sqrt(v / dt(bc2)) + dt(c.eps))


class EarlyStopper:
    """Stop after `patience` consecutive epochs without improving the best
    validation loss by more than min_delta; tracks the argmin epoch."""

    def __init__(self, patience, min_delta=0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.best_epoch = None
        self.stale = 0

    def update(self, epoch, val_loss):
        """Record one epoch; returns True when training should stop."""
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.best_epoch = epoch
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


def _epoch_seed(seed, epoch):
    return int(seed) ^ zlib.crc32(f"epoch:{epoch}".encode("utf-8"))


def batch_loss(model, x, y, config, train):
    """Forward one batch and score it on the fine target grid.

    The model emits crop-resolution logits; they are bilinearly upsampled to
    the target resolution before the loss, the same resolution change the
    evaluator applies.  Returns (loss, gradient wrt the model logits) with
    the gradient None in eval mode.
    """
    logits = model.forward(x, train=train)
    up = T.bilinear_resize(logits, y.shape[2], y.shape[3])
    if config.loss == "bce_logits":
        target = (y >= config.threshold).astype(up.dtype)
    else:
        target = y.astype(up.dtype, copy=False)
    value, g_up = L.loss(up, target, config.loss)
    if not train:
        return value, None
    return value, T.bilinear_resize_backward(g_up, logits.shape[2], logits.shape[3])


def train_epoch(model, batches, config, opt):
    """One optimization pass over an iterable of (x, y, ...) batches.

    Returns the mean train loss weighted by batch element count.
    """
    total = 0.0
    weight = 0
    for batch in batches:
        x, y = batch[0], batch[1]
        value, g_logits = batch_loss(model, x, y, config, train=True)
        grads = model.backward(g_logits)
        opt.step(model, grads)
        total += value * x.shape[0]
        weight += x.shape[0]
    if weight == 0:
        raise ConfigError("empty training split")
    return total / weight


def eval_loss(model, batches, config):
    """Mean loss over batches without touching parameters or state."""
    total = 0.0
    weight = 0
    for batch in batches:
        x, y = batch[0], batch[1]
        value, _ = batch_loss(model, x, y, config, train=False)
        total += value * x.shape[0]
        weight += x.shape[0]
    if weight == 0:
        raise ConfigError("empty validation split")
    return total / weight


def fit(model, train_batches, val_batches, config, history_path=None):
    """Train with early stopping; returns (model at best epoch, history).

    train_batches(epoch_seed) and val_batches() build fresh batch iterators;
    the train iterator reshuffles per epoch from a derived seed.  History is
    one record per epoch; when history_path is given the records are also
    written there as JSON lines.
    """
    opt = AdamW(model, config)
    stopper = EarlyStopper(config.patience, config.min_delta)
    history = []
    best_snapshot = None
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.monotonic()
        train_loss = train_epoch(model, train_batches(_epoch_seed(config.seed, epoch)),
                                 config, opt)
        val_loss = eval_loss(model, val_batches(), config)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                        "seconds": round(time.monotonic() - t0, 3), "lr": config.lr})
        stop = stopper.update(epoch, val_loss)
        if stopper.best_epoch == epoch:
            best_snapshot = {name: arr.copy() for name, arr in
                             list(model.named_params()) + list(model.named_states())}
        if stop:
            break
    if best_snapshot is None:
        raise StateError("validation loss never improved on +inf; refusing to pick a model")
    param_names = {n for n, _ in model.named_params()}
    for name, arr in best_snapshot.items():
        if name in param_names:
            model.set_param(name, arr)
        else:
            model.set_state(name, arr)
    if history_path is not None:
        lines = "".join(json.dumps(rec) + "\n" for rec in history)
        _atomic_write(history_path, lines.encode("utf-8"))
    return model, history


def _regional_loaders(manifest, samples, config, drop):
    """Build train/val loader factories for one job's sample pool.

    When the pool has no explicit val split, 10% (at least one sample) is
    carved off with a seeded permutation and held fixed for the whole run.
    """
    train = [s for s in samples if s.split == "train"]
    val = [s for s in samples if s.split == "val"]
    if not val and train:
        order = np.random.default_rng(config.seed).permutation(len(train))
        n_val = max(1, len(train) // 10)
        val = [train[i] for i in order[:n_val]]
        train = [train[i] for i in order[n_val:]]
    if manifest.filter_threshold > 0:
        train, _ = D.filter_non_rainy(manifest, train, manifest.filter_threshold)
        kept, _ = D.filter_non_rainy(manifest, val, manifest.filter_threshold)
        # A small pool can lose every val sample to the filter; monitoring on
        # unfiltered val samples then beats not training at all.
        val = kept or val
    if not train or not val:
        raise ConfigError("empty train or val split after filtering")

    def train_batches(epoch_seed):
        return D.batch_iter(manifest, train, config.batch_size, epoch_seed,
                            config.shuffle, drop)

    def val_batches():
        return D.batch_iter(manifest, val, config.batch_size, 0, False, drop)

    return train_batches, val_batches


def train_single(manifest, model_config, config, out_dir, drop=(), job=None):
    """Fit one model on a sample pool and write checkpoint plus history.

    `job` restricts the pool to one (region, year); None trains on all
    samples.  Returns the checkpoint path.
    """
    if job is None:
        samples = manifest.samples
        seed = config.seed
        stem = "model"
    else:
        region, year = job
        samples = [s for s in manifest.samples if s.region == region and s.year == year]
        if not samples:
            raise ConfigError(f"manifest has no samples for region {region!r} year {year}")
        seed = D.derive_seed(config.seed, region, year)
        stem = f"model-{region}-{year}"
    job_config = dataclasses.replace(config, seed=seed)
    train_batches, val_batches = _regional_loaders(manifest, samples, job_config, drop)
    model = build_model(model_config, seed)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"{stem}.smck")
    model, _ = fit(model, train_batches, val_batches, job_config,
                   history_path=os.path.join(out_dir, f"{stem}.history.jsonl"))
    save_checkpoint(model, path)
    return path


def train_regional(manifest, jobs, model_config, config, out_dir, drop=()):
    """Independent fit per (region, year); failures do not stop other jobs.

    Returns (checkpoint paths keyed by job, error strings keyed by job).
    """
    results = {}
    failures = {}
    for job in jobs:
        try:
            results[job] = train_single(manifest, model_config, config, out_dir,
                                        drop, job=job)
        except Exception as exc:  # noqa: BLE001 - per-job error report
            failures[job] = f"{type(exc).__name__}: {exc}"
    return results, failures
