"""Supervised BPTT training over stack sequences."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence, TextIO

import numpy as np

from .autograd import Adam, Tensor, poly_lr
from .autograd import functional as F
from .events import Batch, StackSequence, batches
from .evaluation import evaluate, miou
from .network import SpikingEDN


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    poly_power: float = 0.9
    seed: int = 0
    seq_len: int = 4
    warmup: int = 1
    weight_decay: float = 0.0
    grad_clip: float | None = None
    precision: str = "float32"
    eval_every: int = 1

    def __post_init__(self):
        self.betas = tuple(self.betas)
        for name in ("epochs", "batch_size", "seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0 <= self.warmup < self.seq_len:
            raise ValueError("need 0 <= warmup < seq_len")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")


def cross_entropy_loss(scores: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over non-ignored pixels; raises if every pixel is ignored."""
    return F.cross_entropy(scores, labels)


def sequence_loss(model: SpikingEDN, batch: Batch) -> tuple[Tensor, list[dict[str, float]]]:
    """Average loss over the supervised steps of a batch, from zeroed neuron state."""
    run = model.unroll(batch.frames, batch.aug, batch.warmup)
    if not run.scores:
        raise ValueError("sequence has no supervised steps")
    total = None
    for k, sc in enumerate(run.scores):
        term = cross_entropy_loss(sc, batch.labels[:, k])
        total = term if total is None else total + term
    return total * (1.0 / len(run.scores)), run.rates


def mean_rate(rates: Sequence[dict[str, float]]) -> float:
    vals = [v for step in rates for v in step.values()]
    return float(np.mean(vals)) if vals else 0.0


def _diagnostics(model: SpikingEDN, rates, loss: float) -> str:
    lines = [f"non-finite loss {loss}"]
    last = rates[-1] if rates else {}
    for path, r in sorted(last.items()):
        lines.append(f"  rate {path}: {r:.4f}")
    for name, p in model.named_parameters():
        g = p.grad
        if g is not None:
            lines.append(f"  grad-norm {name}: {float(np.sqrt((g.astype(np.float64) ** 2).sum())):.4g}")
    return "\n".join(lines)


@dataclass
class History:
    records: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    def last(self, split: str = "train") -> dict | None:
        rows = [r for r in self.records if r["split"] == split]
        return rows[-1] if rows else None


def train(
    model: SpikingEDN,
    sequences: Sequence[StackSequence],
    cfg: TrainConfig,
    val_sequences: Sequence[StackSequence] | None = None,
    log: TextIO | None = None,
    on_epoch: Callable[[int, History], None] | None = None,
    max_steps: int | None = None,
) -> History:
    """Train ``model`` in place with Adam and poly decay; returns the metric history.

    Each batch starts from zero state, runs the warm-up steps without loss,
    averages the loss over the remaining steps and backpropagates through
    the whole sequence. ``tau_a`` is projected back into its range after
    every optimiser step.
    """
    if not sequences:
        raise ValueError("no training sequences")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), cfg.lr, cfg.betas, weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)
    per_epoch = -(-len(sequences) // cfg.batch_size)
    total_steps = cfg.epochs * per_epoch if max_steps is None else min(max_steps, cfg.epochs * per_epoch)
    hist = History()
    step = 0

    def emit(rec: dict) -> None:
        hist.records.append(rec)
        if log is not None:
            log.write(json.dumps(rec, sort_keys=True) + "\n")
            log.flush()

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        t0 = time.perf_counter()
        losses, frs = [], []
        for batch in batches(sequences, cfg.batch_size, rng):
            if step >= total_steps:
                break
            opt.lr = poly_lr(cfg.lr, step, total_steps, cfg.poly_power)
            opt.zero_grad()
            loss, rates = sequence_loss(model, batch)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(_diagnostics(model, rates, value))
            loss.backward()
            if not np.isfinite(opt.grad_norm()):
                raise TrainingDiverged(_diagnostics(model, rates, value))
            opt.step()
            model.project()
            step += 1
            losses.append(value)
            hist.step_losses.append(value)
            frs.append(mean_rate(rates))
        if not losses:
            break
        emit({"epoch": epoch, "split": "train", "loss": float(np.mean(losses)), "miou": None,
              "mean_fr": float(np.mean(frs)), "lr": opt.lr, "seed": cfg.seed,
              "seconds": round(time.perf_counter() - t0, 3)})
        if val_sequences and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            m, _ = miou(evaluate(model, val_sequences, cfg.batch_size))
            emit({"epoch": epoch, "split": "val", "loss": None, "miou": m, "mean_fr": None,
                  "lr": opt.lr, "seed": cfg.seed})
        if on_epoch is not None:
            on_epoch(epoch, hist)
    model.eval()
    return hist


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
