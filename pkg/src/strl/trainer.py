"""Offline supervised training of either policy kind on expert trajectories."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .dataset import NormStats, Trajectory, batchify, fit_normalizer
from .numerics import Tensor
from .policy import Checkpoint, Policy

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr_max: float = 1e-3
    lr_min: float = 0.0
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.lr_max > self.lr_min >= 0:
            raise ValueError("need lr_max > lr_min >= 0")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        object.__setattr__(self, "betas", tuple(self.betas))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_loss_std: float
    train_acc: float
    val_loss: float
    val_acc: float
    seconds: float
    lr: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    if total_steps <= 0:
        return lr_max
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale every gradient by max_norm/||g|| when the joint L2 norm exceeds max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm > max_norm:
        c = max_norm / norm
        grads = {k: g * g.dtype.type(c) for k, g in grads.items()}
    return grads, norm


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    cfg: TrainConfig,
) -> dict[str, np.ndarray]:
    """One AdamW update with decoupled weight decay; returns new arrays."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {k} at step {state.t + 1}")
    state.t += 1
    b1, b2 = cfg.betas
    bc1 = 1 - b1**state.t
    bc2 = 1 - b2**state.t
    out = {}
    for k, theta in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(theta)
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        new = theta - lr * cfg.weight_decay * theta
        new = new - lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        out[k] = new.astype(theta.dtype)
    return out


def accuracy_counts(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> tuple[int, int]:
    pred = logits.argmax(axis=-1)
    return int(((pred == targets) & mask).sum()), int(mask.sum())


def evaluate_loss_acc(policy: Policy, trajs: Sequence[Trajectory], stats: NormStats, S: int, batch_size: int = 64) -> tuple[float, float]:
    """Teacher-forced loss (mean over unmasked positions) and accuracy."""
    total_loss = 0.0
    correct = n = 0
    with nx.no_grad():
        for batch in batchify(trajs, S, batch_size, None, stats):
            logits = policy(batch)
            k = batch.n_valid()
            total_loss += nx.cross_entropy_masked(logits, batch.target_actions, batch.mask).item() * k
            c, m = accuracy_counts(logits.data, batch.target_actions, batch.mask)
            correct += c
            n += m
    return total_loss / n, correct / n


@dataclass
class TrainResult:
    best: Checkpoint
    records: list[EpochRecord]
    batch_losses: list[tuple[int, int, float]]  # (epoch, batch, loss)
    diverged: bool = False


def train(
    policy: Policy,
    train_set: Sequence[Trajectory],
    val_set: Sequence[Trajectory],
    cfg: TrainConfig,
    S: int,
    stats: NormStats | None = None,
    meta: dict | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Masked cross-entropy training; keeps the checkpoint with the best val accuracy.

    Ties keep the earliest epoch. On a NaN loss or gradient the run stops and the
    last good best checkpoint is returned with ``diverged=True``.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation splits must be non-empty")
    if stats is None:
        stats = fit_normalizer([s for t in train_set for s in t.states])
    rng = np.random.default_rng(cfg.seed)
    n_batches = math.ceil(len(train_set) / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    opt = AdamState()
    step = 0
    records: list[EpochRecord] = []
    batch_losses: list[tuple[int, int, float]] = []
    best: Checkpoint | None = None
    best_acc = -1.0
    lr = cosine_lr(0, total_steps, cfg.lr_max, cfg.lr_min)
    diverged = False

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        correct = seen = 0
        try:
            for bi, batch in enumerate(batchify(train_set, S, cfg.batch_size, rng, stats)):
                lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min)
                policy.zero_grad()
                logits = policy(batch)
                loss = nx.cross_entropy_masked(logits, batch.target_actions, batch.mask)
                loss.backward()
                grads = {k: p.grad for k, p in policy.params.items() if p.grad is not None}
                grads, _ = clip_global_norm(grads, cfg.grad_clip)
                new = adamw_step({k: p.data for k, p in policy.params.items()}, grads, opt, lr, cfg)
                for k, arr in new.items():
                    policy.params[k].data = arr
                step += 1
                lv = loss.item()
                losses.append(lv)
                batch_losses.append((epoch, bi, lv))
                c, m = accuracy_counts(logits.data, batch.target_actions, batch.mask)
                correct += c
                seen += m
        except (nx.NonFiniteError, TrainingDiverged) as exc:
            log.error("training diverged in epoch %d: %s", epoch, exc)
            diverged = True
            break
        val_loss, val_acc = evaluate_loss_acc(policy, val_set, stats, S)
        rec = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            train_loss_std=float(np.std(losses)),
            train_acc=correct / seen,
            val_loss=val_loss,
            val_acc=val_acc,
            seconds=time.perf_counter() - t0,
            lr=lr,
        )
        records.append(rec)
        log.info("epoch %d: train loss %.4f acc %.4f | val loss %.4f acc %.4f (%.1fs)",
                 epoch, rec.train_loss, rec.train_acc, val_loss, val_acc, rec.seconds)
        if on_epoch is not None:
            on_epoch(rec)
        if val_acc > best_acc:
            best_acc = val_acc
            snapshot = Policy(policy.kind, policy.cfg, policy.lif,
                              {k: Tensor(v.data.copy(), requires_grad=True, dtype=v.data.dtype) for k, v in policy.params.items()})
            best = Checkpoint(snapshot, stats, dict(meta or {}, epoch=epoch, val_acc=val_acc, val_loss=val_loss))

    if best is None:
        raise TrainingDiverged("training diverged before the first epoch finished")
    return TrainResult(best, records, batch_losses, diverged)
