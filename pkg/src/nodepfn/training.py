"""Pre-training on streams of freshly sampled synthetic tasks.

Every task is drawn from its own generator seeded by its stream position
``(seed, 0, epoch, step, slot)``, so the data order is a pure function of the
seed and a checkpoint only has to record where the run stopped.  The frozen
validation pool lives on the disjoint branch ``(seed, 1, i)``.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .graph import Task
from .io import Checkpoint, save_checkpoint
from .model import ModelConfig, batch_loss, forward_batch, init_params, make_batch
from .numerics import GradTape, NonFiniteError, Tensor
from .priors import PriorSamplingError, task_rng

log = logging.getLogger(__name__)

LEARNING_RATES = (1.5e-5, 5e-4, 1e-4)
STREAM_TRAIN = 0
STREAM_VALIDATION = 1
STREAM_DROPOUT = 2


class NumericalError(RuntimeError):
    """Training produced non-finite losses beyond the retry budget."""


@dataclass
class TrainConfig:
    epochs: int = 30
    steps_per_epoch: int = 1024
    batch_size: int = 8
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    epsilon: float = 1e-8
    lr_schedule: str = "cosine"
    warmup_steps: int | None = None
    seed: int = 0
    checkpoint_every: int = 0
    grad_clip: float = 1.0
    precision: str = "float32"
    val_pool_size: int = 256
    val_every: int = 0
    max_retries: int = 3

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if min(self.epochs, self.steps_per_epoch, self.batch_size) < 1:
            raise ValueError("epochs, steps_per_epoch and batch_size must be positive")
        # lr = 0 is accepted on purpose: it freezes the parameters (used as a check)
        if not self.learning_rate >= 0.0:
            raise ValueError("learning_rate must be non-negative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must be in [0, 1)")
        if self.weight_decay < 0 or self.epsilon <= 0:
            raise ValueError("weight_decay must be >= 0 and epsilon > 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.checkpoint_every < 0 or self.val_every < 0 or self.val_pool_size < 0:
            raise ValueError("checkpoint_every, val_every and val_pool_size must be >= 0")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0 (0 disables clipping)")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @property
    def effective_warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return int(math.ceil(0.02 * self.total_steps))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    skipped: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate for the 0-based optimizer step ``step``."""
    warm = cfg.effective_warmup
    if step < warm:
        return cfg.learning_rate * (step + 1) / warm
    if cfg.lr_schedule == "constant":
        return cfg.learning_rate
    span = max(cfg.total_steps - warm, 1)
    progress = min((step - warm) / span, 1.0)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


def task_loss(logits, task: Task) -> Tensor:
    """Mean test-node cross-entropy of one task under the C-restricted softmax."""
    if not isinstance(logits, Tensor):
        logits = Tensor(np.asarray(logits, dtype=np.float64))
    m = len(task.test_ids)
    if m == 0:
        raise ValueError("task has no test nodes")
    if logits.shape[0] != m:
        raise ValueError(f"expected {m} logit rows, got {logits.shape[0]}")
    return nx.restricted_cross_entropy(
        logits, task.test_labels, np.full(m, task.graph.C), np.full(m, 1.0 / m)
    )


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def adamw_step(params: dict, grads: dict, state: OptimizerState, cfg: TrainConfig, lr: float | None = None):
    """Decoupled-weight-decay Adam update, in place.

    Returns ``(params, state)``.  A non-finite gradient skips the update and
    increments ``state.skipped`` instead.
    """
    if set(grads) != set(params):
        raise ValueError("gradient names do not match parameter names")
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape mismatch for {k}: {g.shape} vs {params[k].shape}")
    if not all(np.isfinite(g).all() for g in grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient; optimizer step skipped (%d so far)", state.skipped)
        return params, state
    lr = cfg.learning_rate if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if lr == 0.0:
            continue
        update = (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
        p *= 1.0 - lr * cfg.weight_decay
        p -= (lr * update).astype(p.dtype, copy=False)
    return params, state


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale gradients in place to global norm ``max_norm``; returns the original norm."""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm and math.isfinite(norm):
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


def sample_batch(prior, seed: int, epoch: int, step: int, batch_size: int, attempt: int = 0) -> list[Task]:
    tasks = []
    for b in range(batch_size):
        path = (STREAM_TRAIN, epoch, step, b) if attempt == 0 else (STREAM_TRAIN, epoch, step, b, attempt)
        tasks.append(prior.sample_task(task_rng(seed, *path)))
    return tasks


def validation_pool(prior, seed: int, size: int) -> list[Task]:
    return [prior.sample_task(task_rng(seed, STREAM_VALIDATION, i)) for i in range(size)]


def evaluate_loss(params: dict, model_cfg: ModelConfig, tasks, dtype=np.float64, chunk: int = 16) -> float:
    """Mean per-task test cross-entropy (no gradients)."""
    total = 0.0
    tasks = list(tasks)
    for lo in range(0, len(tasks), chunk):
        part = tasks[lo : lo + chunk]
        batch = make_batch(part, model_cfg, dtype=dtype)
        loss = batch_loss(forward_batch(params, model_cfg, batch), batch)
        total += float(loss.data) * len(part)
    return total / max(len(tasks), 1)


def _checkpoint(params, state, model_cfg, train_cfg, prior, global_step, extra_meta) -> Checkpoint:
    spe = train_cfg.steps_per_epoch
    meta = {"train_config": train_cfg.to_dict(), "prior_config": prior.to_dict()}
    meta.update(extra_meta or {})
    return Checkpoint(
        model_config=model_cfg.to_dict(),
        params={k: v.copy() for k, v in params.items()},
        meta=meta,
        opt_step=state.step,
        opt_skipped=state.skipped,
        opt_m={k: v.copy() for k, v in state.m.items()},
        opt_v={k: v.copy() for k, v in state.v.items()},
        epoch=global_step // spe,
        step_in_epoch=global_step % spe,
        global_step=global_step,
        seed=train_cfg.seed,
    )


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    task_digests: list = field(default_factory=list)


def train(
    prior,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    resume: Checkpoint | None = None,
    checkpoint_dir=None,
    metrics_path=None,
    stop_after: int | None = None,
    record_digests: bool = False,
    callback: Callable[[int, dict, OptimizerState], None] | None = None,
    extra_meta: dict | None = None,
) -> TrainResult:
    """Run (or continue) pre-training and return the final checkpoint.

    ``prior`` is any object with ``sample_task(rng)`` and ``to_dict()``.
    ``stop_after`` ends the run once that global step count is reached, as if
    interrupted; resuming from the returned checkpoint continues the exact
    same trajectory.  ``callback(global_step, params, state)`` runs after
    every step.
    """
    dtype = np.dtype(train_cfg.precision).type
    total = train_cfg.total_steps
    spe = train_cfg.steps_per_epoch
    if resume is not None:
        if not resume.has_optimizer:
            raise ValueError("checkpoint has no optimizer state; cannot resume")
        if resume.seed != train_cfg.seed:
            raise ValueError("resume checkpoint was trained with a different seed")
        params = {k: v.astype(dtype, copy=True) for k, v in resume.params.items()}
        state = OptimizerState(
            {k: v.astype(dtype, copy=True) for k, v in resume.opt_m.items()},
            {k: v.astype(dtype, copy=True) for k, v in resume.opt_v.items()},
            resume.opt_step,
            resume.opt_skipped,
        )
        start = resume.global_step
    else:
        params = init_params(model_cfg, seed=train_cfg.seed, dtype=dtype)
        state = OptimizerState.zeros_like(params)
        start = 0
    end = total if stop_after is None else min(total, stop_after)

    val_tasks = []
    if train_cfg.val_every and train_cfg.val_pool_size:
        val_tasks = validation_pool(prior, train_cfg.seed, train_cfg.val_pool_size)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    metrics = open(metrics_path, "a", encoding="utf-8") if metrics_path is not None else None
    result = TrainResult(checkpoint=None)
    t0 = time.perf_counter()
    running = 0.0
    try:
        for gstep in range(start, end):
            epoch, step = divmod(gstep, spe)
            drop_rng = task_rng(train_cfg.seed, STREAM_DROPOUT, epoch, step) if model_cfg.dropout > 0 else None
            for attempt in range(train_cfg.max_retries + 1):
                try:
                    tasks = sample_batch(prior, train_cfg.seed, epoch, step, train_cfg.batch_size, attempt)
                    batch = make_batch(tasks, model_cfg, dtype=dtype)
                    tensors = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
                    with GradTape() as tape:
                        loss = batch_loss(forward_batch(tensors, model_cfg, batch, drop_rng), batch)
                    g = nx.backward(loss, tape, wrt=list(tensors.values()))
                    grads = {k: g[t] for k, t in tensors.items()}
                    break
                except (NonFiniteError, PriorSamplingError) as exc:
                    log.warning("step %d attempt %d failed: %s", gstep, attempt, exc)
            else:
                raise NumericalError(f"step {gstep}: no finite loss after {train_cfg.max_retries + 1} attempts")
            if record_digests:
                result.task_digests.extend(t.digest() for t in tasks)
            loss_value = float(loss.data)
            clip_gradients(grads, train_cfg.grad_clip)
            lr = lr_at(gstep, train_cfg)
            adamw_step(params, grads, state, train_cfg, lr)
            result.losses.append(loss_value)
            n_done = gstep - start + 1
            running += (loss_value - running) / n_done
            record = {
                "step": gstep + 1,
                "loss": loss_value,
                "running_loss": running,
                "lr": lr,
                "wallclock": time.perf_counter() - t0,
            }
            if val_tasks and (gstep + 1) % train_cfg.val_every == 0:
                vl = evaluate_loss(params, model_cfg, val_tasks, dtype=dtype)
                record["val_loss"] = vl
                result.val_losses.append((gstep + 1, vl))
            if metrics is not None:
                metrics.write(json.dumps(record) + "\n")
                metrics.flush()
            if ckpt_dir is not None and train_cfg.checkpoint_every and (gstep + 1) % train_cfg.checkpoint_every == 0:
                ck = _checkpoint(params, state, model_cfg, train_cfg, prior, gstep + 1, extra_meta)
                save_checkpoint(ckpt_dir / f"step_{gstep + 1:08d}.ckpt", ck)
            if callback is not None:
                callback(gstep + 1, params, state)
    finally:
        if metrics is not None:
            metrics.close()
    result.checkpoint = _checkpoint(params, state, model_cfg, train_cfg, prior, end, extra_meta)
    if ckpt_dir is not None:
        save_checkpoint(ckpt_dir / "last.ckpt", result.checkpoint)
    return result
