"""Optimizer and training loop."""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as tn
from .backbone import DiffusionRWKV
from .checkpoint import Checkpoint, checkpoint_save
from .data import Dataset, hflip, image_write, make_grid
from .diffusion import (EmaState, NoiseSchedule, SamplerConfig, ema_update,
                        linear_schedule, sample_loop, training_loss)
from .rng import Rng

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "loss", "mse", "vlb", "lr", "ema_decay"]


class TrainingDiverged(FloatingPointError):
    pass


class AdamW:
    """Adam with decoupled weight decay; moments kept in float32."""

    def __init__(self, params: dict, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = 0

    def step(self, params: dict, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for n, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[n], self.v[n]
            m *= np.float32(b1)
            m += np.float32(1 - b1) * g
            v *= np.float32(b2)
            v += np.float32(1 - b2) * (g * g)
            upd = (m / np.float32(c1)) / (np.sqrt(v / np.float32(c2)) + np.float32(self.eps))
            if self.weight_decay:
                upd = upd + np.float32(self.weight_decay) * p.data
            p.data = (p.data - np.float32(lr) * upd).astype(p.data.dtype)


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 1e-4
    lr_late: float = 3e-5
    lr_switch: float = 0.8        # fraction of steps after which lr_late applies
    ema_decay: float = 0.9999
    p_drop: float = 0.1
    weight_decay: float = 0.0
    flip: bool = True
    log_interval: int = 10
    save_interval: int = 500
    sample_interval: int = 0      # 0 disables the periodic sample grid
    sample_steps: int = 50
    seed: int = 0
    time_budget: Optional[float] = None  # seconds; stop early when exceeded

    def lr_at(self, step: int) -> float:
        return self.lr if step <= int(round(self.lr_switch * self.steps)) else self.lr_late


@dataclass
class TrainResult:
    history: list = field(default_factory=list)  # one stats dict per step
    step: int = 0
    completed: bool = True
    elapsed: float = 0.0
    ema: Optional[EmaState] = None
    opt: Optional[AdamW] = None


def _param_report(model: DiffusionRWKV) -> str:
    worst = []
    for n, p in model.named_parameters():
        bad = not np.all(np.isfinite(p.data)) or (p.grad is not None and not np.all(np.isfinite(p.grad)))
        if bad:
            worst.append(n)
    return f"non-finite parameters/grads: {worst[:5]}" if worst else "parameters finite"


def _ema_model(model: DiffusionRWKV, ema: EmaState) -> DiffusionRWKV:
    m = DiffusionRWKV(model.config)
    m.load_arrays(ema.shadow)
    return m


def write_samples(model, out_path: str, n: int, steps: int, schedule: NoiseSchedule, seed: int = 0) -> None:
    cfg = model.config
    c = (np.arange(n) % cfg.num_classes) if cfg.num_classes else None
    mode = "learned" if cfg.learn_sigma else "fixed_small"
    x = sample_loop(model, (n, cfg.C, cfg.H, cfg.W), c, SamplerConfig(steps, 1.0, mode, seed), schedule)
    image_write(out_path, make_grid(x))


def train_loop(model: DiffusionRWKV, dataset: Dataset, cfg: TrainConfig, out_dir: Optional[str] = None,
               schedule: Optional[NoiseSchedule] = None, resume: Optional[Checkpoint] = None,
               callback: Optional[Callable] = None, stop_after: Optional[int] = None) -> TrainResult:
    """Train for ``cfg.steps`` steps (continuing from ``resume`` if given).

    Step ``s`` draws everything it needs from ``Rng(cfg.seed, s)``, so a
    resumed run replays exactly the batches of an uninterrupted one.
    ``stop_after`` ends the run early at that step (the LR plan still
    follows ``cfg.steps``).
    """
    schedule = schedule or linear_schedule(model.config.T)
    params = model.parameters()
    ema = EmaState.from_params(params, cfg.ema_decay)
    opt = AdamW(params, cfg.lr, weight_decay=cfg.weight_decay)
    start = 1
    if resume is not None:
        model.load_arrays(resume.model)
        if resume.ema:
            ema.shadow = {n: a.copy() for n, a in resume.ema.items()}
        if resume.opt_m:
            opt.m = {n: a.copy() for n, a in resume.opt_m.items()}
            opt.v = {n: a.copy() for n, a in resume.opt_v.items()}
            opt.t = int(resume.header.get("opt.t", resume.step))
        start = resume.step + 1
    conditional = model.config.num_classes > 0
    if conditional and dataset.labels is None:
        raise ValueError("class-conditional model needs a labelled dataset")

    metrics = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        mpath = os.path.join(out_dir, "metrics.csv")
        fresh = resume is None or not os.path.exists(mpath)
        metrics = open(mpath, "w" if fresh else "a", newline="")
        writer = csv.writer(metrics)
        if fresh:
            writer.writerow(METRICS_HEADER)

    result = TrainResult(step=start - 1, ema=ema, opt=opt)
    t0 = time.perf_counter()
    try:
        for step in range(start, cfg.steps + 1):
            rng = Rng(cfg.seed, stream=step)
            idx = rng.integers(0, len(dataset), (cfg.batch_size,))
            x0 = dataset.images[idx]
            if cfg.flip:
                x0 = hflip(x0, rng.bernoulli(0.5, (cfg.batch_size,)))
            c = dataset.labels[idx] if conditional else None
            try:
                loss, stats = training_loss(model, x0, c, rng, schedule, cfg.p_drop)
                model.zero_grad()
                tn.backward(loss)
            except tn.NonFiniteError as e:
                tn.current_record().clear()
                raise TrainingDiverged(f"step {step}: {e}; {_param_report(model)}") from e
            if not np.isfinite(stats["loss"]):
                raise TrainingDiverged(f"step {step}: loss {stats['loss']}; {_param_report(model)}")
            lr = cfg.lr_at(step)
            opt.step(params, lr)
            ema_update(ema, params)
            stats.update(step=step, lr=lr, ema_decay=cfg.ema_decay)
            result.history.append(stats)
            result.step = step
            if metrics and (step % cfg.log_interval == 0 or step == cfg.steps):
                writer.writerow([step, repr(stats["loss"]), repr(stats["mse"]), repr(stats["vlb"]),
                                 repr(lr), repr(cfg.ema_decay)])
                metrics.flush()
            if step % cfg.log_interval == 0:
                log.info("step %d loss %.5f mse %.5f vlb %.5f", step, stats["loss"], stats["mse"], stats["vlb"])
            if out_dir and (step % cfg.save_interval == 0 or step == cfg.steps):
                checkpoint_save(os.path.join(out_dir, f"ckpt_{step:06d}.drwk"), model, ema, opt, step,
                                {f"schedule.{k}": v for k, v in schedule.params().items()})
            if out_dir and cfg.sample_interval and step % cfg.sample_interval == 0:
                write_samples(_ema_model(model, ema), os.path.join(out_dir, f"samples_{step:06d}.pgm"
                              if model.config.C == 1 else f"samples_{step:06d}.ppm"),
                              8, cfg.sample_steps, schedule, cfg.seed)
            if callback:
                callback(step, stats)
            if stop_after is not None and step >= stop_after:
                result.completed = step == cfg.steps
                break
            if cfg.time_budget is not None and time.perf_counter() - t0 > cfg.time_budget:
                result.completed = step == cfg.steps
                break
    finally:
        if metrics:
            metrics.close()
    result.elapsed = time.perf_counter() - t0
    return result


def running_average(values, window: int = 50) -> np.ndarray:
    """Trailing mean over up to ``window`` values ending at each position."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    i = np.arange(1, v.size + 1)
    lo = np.maximum(0, i - window)
    return (c[i] - c[lo]) / (i - lo)
