"""Training loop with validation-based early stopping."""
from __future__ import annotations

import contextlib
import copy
import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .model import build_model, step_losses

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 4
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


class EarlyStopping:
    """Stop once the validation loss has not improved for ``patience`` epochs.

    Epochs are 1-based; only a strict decrease counts as improvement.
    """

    def __init__(self, patience=4):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = 0
        self.epoch = 0

    def step(self, val_loss):
        self.epoch += 1
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = self.epoch
            return False
        return self.epoch - self.best_epoch >= self.patience

    @property
    def improved(self):
        return self.best_epoch == self.epoch


def stopping_point(val_losses, patience=4, max_epochs=None):
    """(stop_epoch, best_epoch) that the rule yields on a given loss trace."""
    stopper = EarlyStopping(patience)
    for loss in val_losses[:max_epochs]:
        if stopper.step(loss):
            break
    return stopper.epoch, stopper.best_epoch


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float
    best: bool = False


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    @property
    def best_epoch(self):
        return min(self.records, key=lambda r: (r.val_loss, r.epoch)).epoch

    def write_csv(self, path):
        """Loss trace (epoch, train_loss, val_loss, best); reproducible byte for byte."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "best"])
            best = self.best_epoch if self.records else None
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), int(r.epoch == best)])

    def write_timing_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "seconds"])
            for r in self.records:
                w.writerow([r.epoch, f"{r.seconds:.3f}"])


def _as_tensors(arrays, dtype):
    return tuple(torch.as_tensor(np.asarray(a), dtype=dtype) for a in arrays)


@torch.no_grad()
def validate(model, arrays, batch_size=256):
    """Mean per-window loss with z fixed at the posterior mean."""
    dtype = next(model.parameters()).dtype
    frames, cmap, cvec = _as_tensors(arrays, dtype)
    if len(frames) == 0:
        raise TrainingError("validation set is empty")
    was_training = model.training
    model.eval()
    total = 0.0
    for i in range(0, len(frames), batch_size):
        sl = slice(i, i + batch_size)
        out = model(frames[sl], cmap[sl], cvec[sl], sample=False)
        total += step_losses(model.variant, frames[sl], out).mean(1).sum().item()
    model.train(was_training)
    return total / len(frames)


def check_no_test_windows(parents, assignment):
    leaked = sorted({p for p in parents if assignment.get(p) not in ("train", "val")})
    if leaked:
        raise TrainingError(f"training data includes non-train/val sequences: {leaked[:5]}")


def train(variant, train_arrays, val_arrays, config=None, arch=None, model=None):
    """Fit ``variant`` and return ``(best_model, TrainLog)``.

    ``*_arrays`` are ``(frames, condition_maps, condition_vectors)`` as built by
    :func:`thermad.dataset.stack_windows`.  Shuffling and reparameterisation
    noise come from one generator seeded with ``config.seed``.
    """
    config = config or TrainConfig()
    if model is None:
        model = build_model(variant, arch, seed=config.seed)
    dtype = next(model.parameters()).dtype
    frames, cmap, cvec = _as_tensors(train_arrays, dtype)
    n = len(frames)
    if n == 0:
        raise TrainingError("training set is empty")
    with _flush_denormals():
        return _fit(variant, model, frames, cmap, cvec, val_arrays, config)


@contextlib.contextmanager
def _flush_denormals():
    # saturated ReLU/sigmoid gradients drift into subnormal range and slow CPU math several-fold
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(False)


def _fit(variant, model, frames, cmap, cvec, val_arrays, config):
    dtype = frames.dtype
    n = len(frames)
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    stopper = EarlyStopping(config.patience)
    trainlog = TrainLog()
    best_state = copy.deepcopy(model.state_dict())

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        model.train()
        order = torch.randperm(n, generator=gen)
        running = 0.0
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            x = frames[idx]
            latent_shape = (len(idx), x.shape[1], model.arch.latent)
            eps = torch.randn(latent_shape, generator=gen, dtype=dtype)
            out = model(x, cmap[idx], cvec[idx], eps=eps)
            loss = step_losses(variant, x, out).mean()
            if not torch.isfinite(loss):
                raise TrainingError(f"{variant.name}: non-finite loss at epoch {epoch}, batch {i // config.batch_size}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_norm)
            opt.step()
            running += loss.item() * len(idx)
        val_loss = validate(model, val_arrays)
        if not np.isfinite(val_loss):
            raise TrainingError(f"{variant.name}: non-finite validation loss at epoch {epoch}")
        stop = stopper.step(val_loss)
        if stopper.improved:
            best_state = copy.deepcopy(model.state_dict())
        trainlog.records.append(EpochRecord(epoch, running / n, val_loss, time.perf_counter() - t0, stopper.improved))
        log.info("%s epoch %d train %.6g val %.6g", variant.name, epoch, running / n, val_loss)
        if stop:
            break

    model.load_state_dict(best_state)
    model.eval()
    return model, trainlog
