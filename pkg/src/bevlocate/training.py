"""Supervised training of encoder + renderer against map-crop labels."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .model import BevModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 4e-5
    epochs: int = 1
    batch_size: int = 1
    seed: int = 0
    loss: str = "mse"
    optimizer: str = "sgd"  # sgd | momentum | adam
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.loss != "mse":
            raise ValueError(f"unsupported loss {self.loss!r}")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def mse_loss(render: np.ndarray, label: np.ndarray):
    """Mean squared error and its gradient 2 (r - l) / N."""
    if render.shape != label.shape:
        raise ValueError(f"render {render.shape} and label {label.shape} differ")
    diff = render - label
    return float(np.mean(diff * diff)), (2.0 / diff.size) * diff


class Optimizer:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.state: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict):
        cfg = self.cfg
        if cfg.lr == 0:
            return
        self.t += 1
        for name, g in grads.items():
            p = params[name]
            if cfg.optimizer == "sgd":
                p -= (cfg.lr * g).astype(p.dtype)
            elif cfg.optimizer == "momentum":
                v = self.state.setdefault(name, np.zeros_like(p))
                v *= cfg.momentum
                v += g
                p -= (cfg.lr * v).astype(p.dtype)
            else:
                m, v = self.state.setdefault(name, (np.zeros_like(p), np.zeros_like(p)))
                b1, b2 = cfg.betas
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                mhat = m / (1 - b1 ** self.t)
                vhat = v / (1 - b2 ** self.t)
                p -= (cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.dtype)


def train_step(model: BevModel, batch, cfg: TrainConfig, opt: Optimizer) -> float:
    """One optimizer update over `batch`, a list of (window frames, label (H, W, 3)).

    Returns the mean loss over the batch.
    """
    model.store.zero_grad()
    total = 0.0
    for frames, label in batch:
        img, _, tape = model.forward(frames, training=True)
        value, g = mse_loss(img, np.asarray(label, dtype=img.dtype).transpose(2, 0, 1))
        if not np.isfinite(value):
            stats = {k: float(np.abs(v).max()) for k, v in model.store.params.items()}
            worst = sorted(stats.items(), key=lambda kv: -kv[1])[:5]
            raise FloatingPointError(f"non-finite loss {value}; largest parameters {worst}")
        grads = model.backward(tape, g / len(batch))
        model.store.accumulate(grads)
        total += value
    opt.step(model.store.params, model.store.grads)
    return total / len(batch)


def overfit_demo(model: BevModel, frames, label, cfg: TrainConfig, steps: int = 500) -> list[float]:
    """Repeat train_step on one fixed sample; returns the loss before each step."""
    opt = Optimizer(cfg)
    return [train_step(model, [(frames, label)], cfg, opt) for _ in range(steps)]


def train(model: BevModel, samples, cfg: TrainConfig, log_every: int = 10) -> list[float]:
    """Epoch loop over a list of (frames, label) pairs; returns per-step losses."""
    rng = np.random.default_rng(cfg.seed)
    opt = Optimizer(cfg)
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[start:start + cfg.batch_size]]
            losses.append(train_step(model, batch, cfg, opt))
            if len(losses) % log_every == 0:
                log.info("epoch %d step %d loss %.6f", epoch, len(losses), losses[-1])
    return losses


def write_loss_curve(path, losses):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("step", "loss"))
        for i, v in enumerate(losses):
            w.writerow((i, f"{v:.9g}"))
