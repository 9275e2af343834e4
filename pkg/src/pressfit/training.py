"""Optimization loop: AdamW, warmup + cosine decay, early stopping.

The loop trains any policy object exposing ``model`` (a Module) and
``loss(obs_batch, chunk_batch, rng) -> Tensor``.  Validation uses the
identical noise draws every epoch, so the validation curve is comparable
epoch to epoch and early stopping reacts to the model, not to noise.

Determinism: with a fixed (seed, dataset, config) the sequence of batches,
diffusion steps, and noise draws is fixed, so the loss log reproduces
exactly; only the wall-clock seconds column varies between runs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import ChunkDataset
from .errors import BadConfig, EmptyDataset, NonFiniteLoss

VAL_NOISE_SALT = 0x5EED_CAFE


@dataclass(frozen=True)
class TrainConfig:
    max_lr: float = 1e-4
    weight_decay: float = 1e-6
    warmup_steps: int = 500
    batch_size: int = 64
    max_epochs: int = 400
    steps_per_epoch: int = 100
    patience: int = 5
    seed: int = 0
    grad_clip: float | None = None    # max global norm; None disables

    def __post_init__(self):
        if min(self.max_lr, self.batch_size, self.max_epochs,
               self.steps_per_epoch) <= 0 or self.warmup_steps < 0:
            raise BadConfig("training sizes and rates must be positive")
        if self.weight_decay < 0:
            raise BadConfig("weight_decay must be non-negative")
        if self.patience < 1:
            raise BadConfig("patience must be at least 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise BadConfig("grad_clip must be positive when set")


class AdamW:
    """Adam with decoupled weight decay; beta=(0.9, 0.999), eps=1e-8."""

    def __init__(self, params, weight_decay: float = 1e-6,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data = (p.data * (1.0 - lr * self.weight_decay)
                      - lr * update).astype(p.data.dtype)


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def lr_at(step: int, config: TrainConfig, total_steps: int) -> float:
    """Linear warmup from 0 to max_lr, then cosine decay to 0 at total_steps."""
    if step < config.warmup_steps:
        return config.max_lr * step / config.warmup_steps
    span = max(total_steps - config.warmup_steps, 1)
    frac = min((step - config.warmup_steps) / span, 1.0)
    return config.max_lr * 0.5 * (1.0 + np.cos(np.pi * frac))


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


@dataclass
class TrainResult:
    log: list = field(default_factory=list)
    best_val: float = float("inf")
    best_epoch: int = -1
    epochs_run: int = 0
    stopped_early: bool = False


LOG_HEADER = "epoch,train_loss,val_loss,lr,seconds"
LOSS_LOG_HEADER = "epoch,train_loss,val_loss,lr"


def save_log(path, rows):
    lines = [LOG_HEADER]
    for r in rows:
        lines.append(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.lr!r},{r.seconds!r}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def save_loss_log(path, rows):
    """Timing-free projection of the log; identical runs write identical bytes."""
    lines = [LOSS_LOG_HEADER]
    for r in rows:
        lines.append(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.lr!r}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _validate(policy, batches, seed: int) -> float:
    from .tensor import no_grad
    total, count = 0.0, 0
    rng = np.random.default_rng(seed)     # same draws every epoch
    with no_grad():
        for obs, chunk in batches:
            loss = policy.loss(obs, chunk, rng)
            total += float(loss.data) * obs.shape[0]
            count += obs.shape[0]
    return total / count


def train(policy, dataset: ChunkDataset, config: TrainConfig) -> TrainResult:
    """Optimize the policy in place; leaves the best-validation weights loaded."""
    if len(dataset.train_pairs) == 0 or len(dataset.val_pairs) == 0:
        raise EmptyDataset("training needs non-empty train and validation splits")
    params = policy.model.parameters()
    opt = AdamW(params, weight_decay=config.weight_decay)
    batch_rng = np.random.default_rng(config.seed)
    noise_rng = np.random.default_rng(config.seed + 1)
    stream = dataset.train_batches(config.batch_size, batch_rng)
    val_batches = dataset.val_batches(config.batch_size)
    val_seed = config.seed ^ VAL_NOISE_SALT
    total_steps = config.max_epochs * config.steps_per_epoch

    result = TrainResult()
    best_state = None
    bad_epochs = 0
    step = 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.time()
        running = 0.0
        lr = 0.0
        for _ in range(config.steps_per_epoch):
            obs, chunk = next(stream)
            policy.model.zero_grad()
            loss = policy.loss(obs, chunk, noise_rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NonFiniteLoss(f"training loss became {value} at step {step}")
            loss.backward()
            if config.grad_clip is not None:
                clip_gradients(params, config.grad_clip)
            lr = lr_at(step, config, total_steps)
            opt.step(lr)
            running += value
            step += 1
        val_loss = _validate(policy, val_batches, val_seed)
        result.log.append(EpochRow(epoch, running / config.steps_per_epoch,
                                   val_loss, lr, time.time() - t0))
        result.epochs_run = epoch
        if val_loss < result.best_val:
            result.best_val = val_loss
            result.best_epoch = epoch
            best_state = {k: v.copy() for k, v in policy.model.state_dict().items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                result.stopped_early = True
                break
    if best_state is not None:
        policy.model.load_state_dict(best_state)
    return result
