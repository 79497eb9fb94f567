"""End-to-end optimization: Adam with coupled L2 decay, step-decay schedule,
batch-size-1 loop, deterministic per-epoch shuffling/augmentation, and
checkpointed resume.

Epoch k draws its shuffle order and augmentation noise from an rng derived
from (seed, k), so training is a pure function of (initial parameters,
optimizer state, epoch index); resuming from an end-of-epoch checkpoint
reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_arrays, save_arrays
from .data import augment
from .errors import ConfigError, ContractError, NumericalError
from .metrics import sample_mean_dice
from .tensor import Tape, Tensor, backward

__all__ = ["TrainConfig", "AdamState", "adam_step", "lr_at", "train", "TrainLog"]


@dataclass
class TrainConfig:
    epochs: int = 50
    lr0: float = 1e-3
    decay_factor: float = 0.1
    decay_every: int = 20
    batch: int = 1
    lam: float = 2.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    checkpoint_every: int = 1

    def validate(self):
        if self.epochs < 1 or self.batch != 1:
            raise ConfigError("epochs must be >= 1 and batch fixed at 1")
        if min(self.lr0, self.decay_factor, self.eps) <= 0 or self.decay_every < 1:
            raise ConfigError("learning-rate schedule values must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.weight_decay < 0:
            raise ConfigError("bad optimizer coefficients")


def lr_at(epoch: int, config: TrainConfig) -> float:
    """lr0 scaled down by decay_factor every decay_every epochs."""
    return config.lr0 * config.decay_factor ** (epoch // config.decay_every)


class AdamState:
    """First/second moment buffers per parameter name, plus the step count."""

    def __init__(self):
        self.m = {}
        self.v = {}
        self.step = 0

    def to_arrays(self, prefix="optim.") -> dict:
        out = {f"{prefix}step": np.array(float(self.step))}
        for name, arr in self.m.items():
            out[f"{prefix}m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"{prefix}v.{name}"] = arr
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, prefix="optim.") -> "AdamState":
        state = cls()
        state.step = int(arrays[f"{prefix}step"])
        for key, arr in arrays.items():
            if key.startswith(f"{prefix}m."):
                state.m[key[len(prefix) + 2:]] = arr.copy()
            elif key.startswith(f"{prefix}v."):
                state.v[key[len(prefix) + 2:]] = arr.copy()
        return state


def adam_step(state: AdamState, named_params, lr: float, config: TrainConfig):
    """One bias-corrected Adam update; weight decay is added to the gradient."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in named_params:
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
        g = p.grad + config.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps)


def _first_nonfinite_op(tape: Tape):
    for entry in tape.entries:
        if not np.isfinite(entry.output.data).all():
            return entry.op
    return None


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)   # dicts per epoch
    best_epoch: int = -1
    best_val_dice: float = -1.0
    best_path: str = ""
    last_path: str = ""

    HEADER = "epoch\tlr\tl_seg1\tl_seg2\ttotal\tval_mean_dice"

    def to_tsv(self) -> str:
        lines = [self.HEADER]
        for r in self.rows:
            lines.append(f"{r['epoch']}\t{r['lr']:.8g}\t{r['l_seg1']:.8f}"
                         f"\t{r['l_seg2']:.8f}\t{r['total']:.8f}\t{r['val_mean_dice']:.6f}")
        return "\n".join(lines) + "\n"


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(epoch,)))


def train(model, train_samples, val_samples, config: TrainConfig, out_dir,
          resume_from=None, progress=None, extra_records=None) -> TrainLog:
    """Optimize ``model`` on the training split, validating every epoch.

    Writes ``last.ckpt`` every ``checkpoint_every`` epochs and ``best.ckpt``
    whenever the validation mean tissue Dice improves; the per-epoch log goes
    to ``train_log.tsv`` incrementally.  ``resume_from`` restores parameters,
    optimizer moments and the epoch counter from a checkpoint.
    """
    config.validate()
    if not train_samples or not val_samples:
        raise ConfigError("train and validation sets must be non-empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.tsv"

    state = AdamState()
    start_epoch = 0
    log = TrainLog()
    if resume_from is not None:
        arrays = load_arrays(resume_from)
        for name, p in model.named_parameters():
            p.data = arrays[name].copy()
        state = AdamState.from_arrays(arrays)
        start_epoch = int(arrays["trainer.epoch"])
        log.best_val_dice = float(arrays.get("trainer.best_val_dice", -1.0))
        log.best_epoch = int(arrays.get("trainer.best_epoch", -1.0))
    else:
        log_path.write_text(TrainLog.HEADER + "\n")

    named = list(model.named_parameters())

    def save(path, epoch):
        arrays = {name: p.data for name, p in named}
        arrays.update(state.to_arrays())
        arrays["trainer.epoch"] = np.array(float(epoch))
        arrays["trainer.best_val_dice"] = np.array(float(log.best_val_dice))
        arrays["trainer.best_epoch"] = np.array(float(log.best_epoch))
        for key, val in (extra_records or {}).items():
            arrays[key] = np.asarray(val, dtype=np.float64)
        save_arrays(path, arrays)

    for epoch in range(start_epoch, config.epochs):
        lr = lr_at(epoch, config)
        rng = _epoch_rng(config.seed, epoch)
        order = rng.permutation(len(train_samples))
        sums = {"l_seg1": 0.0, "l_seg2": 0.0, "total": 0.0}
        for idx in order:
            sample = augment(train_samples[idx], rng)
            image = Tensor(sample.image[None, None])
            model.zero_grad()
            with Tape() as tape:
                loss, report = model.training_loss(image, sample.label, lam=config.lam)
            if not np.isfinite(loss.data):
                op = _first_nonfinite_op(tape)
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}; first offending op: {op}")
            backward(loss)
            adam_step(state, named, lr, config)
            sums["l_seg1"] += report.l_seg1
            sums["l_seg2"] += report.l_seg2
            sums["total"] += report.total

        n = len(train_samples)
        val_dice = float(np.mean([
            sample_mean_dice(model.predict(s.image), s.label) for s in val_samples]))
        row = {"epoch": epoch, "lr": lr, "l_seg1": sums["l_seg1"] / n,
               "l_seg2": sums["l_seg2"] / n, "total": sums["total"] / n,
               "val_mean_dice": val_dice}
        log.rows.append(row)
        with open(log_path, "a") as f:
            f.write(f"{epoch}\t{lr:.8g}\t{row['l_seg1']:.8f}\t{row['l_seg2']:.8f}"
                    f"\t{row['total']:.8f}\t{val_dice:.6f}\n")
        if progress is not None:
            progress(row)

        if val_dice > log.best_val_dice:
            log.best_val_dice = val_dice
            log.best_epoch = epoch
            save(out_dir / "best.ckpt", epoch + 1)
            log.best_path = str(out_dir / "best.ckpt")
        if (epoch + 1) % config.checkpoint_every == 0 or epoch + 1 == config.epochs:
            save(out_dir / "last.ckpt", epoch + 1)
            log.last_path = str(out_dir / "last.ckpt")
    return log
