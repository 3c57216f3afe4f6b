"""Desk-scale design-space ablations: patch size, long skips, conditioning mode.

Every variant trains from the same seed on the same two-blob set and is
scored by the noise-prediction MSE on a fixed held-out batch with fixed
timesteps and noise, so differences come from the architecture alone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tn
from .backbone import DiffusionRWKV, ModelConfig
from .data import synth_two_blobs
from .diffusion import linear_schedule, q_sample
from .rng import Rng
from .train import TrainConfig, running_average, train_loop

log = logging.getLogger(__name__)

BASE = ModelConfig(L=5, D=64, E=4, p=2, H=8, W=8, C=1, num_classes=2)

VARIANTS = {
    "p2": {},
    "p4": {"p": 4},
    "p8": {"p": 8},
    "skip_none": {"skip": "none"},
    "in_context": {"cond_mode": "in_context"},
}

# (better, worse) pairs expected from the published trends
ORDERINGS = [("p2", "p4"), ("p4", "p8"), ("p2", "skip_none"), ("p2", "in_context")]


@dataclass
class AblationResult:
    name: str
    config: ModelConfig
    eval_mse: float
    final_train_loss: float


def eval_mse(model: DiffusionRWKV, n: int = 256, seed: int = 12345) -> float:
    """Noise-prediction MSE on a fixed held-out batch over evenly spread timesteps."""
    cfg = model.config
    ds = synth_two_blobs(n, cfg.H, cfg.W, seed=seed, channels=cfg.C)
    s = linear_schedule(cfg.T)
    rng = Rng(seed, stream=0xE7)
    t = np.linspace(1, cfg.T, n).round().astype(np.int64)
    eps = rng.normal(ds.images.shape)
    x_t = q_sample(ds.images, t, eps, s)
    total = 0.0
    with tn.no_grad():
        for i in range(0, n, 64):
            sl = slice(i, i + 64)
            c = ds.labels[sl] if cfg.num_classes else None
            pred, _ = model(x_t[sl], t[sl], c)
            total += float(((pred.data - eps[sl]) ** 2).sum())
    return total / eps.size


def run_ablation(steps: int = 300, batch_size: int = 32, seed: int = 0, variants=None,
                 base: ModelConfig = BASE) -> dict:
    ds = synth_two_blobs(512, base.H, base.W, seed=seed, channels=base.C)
    tc = TrainConfig(steps=steps, batch_size=batch_size, lr=1e-3, lr_late=3e-4, ema_decay=0.999, seed=seed)
    results = {}
    for name in variants or VARIANTS:
        cfg = replace(base, **VARIANTS[name])
        model = DiffusionRWKV(cfg, seed=seed)
        r = train_loop(model, ds, tc)
        ra = running_average([h["loss"] for h in r.history])
        results[name] = AblationResult(name, cfg, eval_mse(model), float(ra[-1]))
        log.info("ablation %s: eval mse %.5f, train loss %.5f", name, results[name].eval_mse,
                 results[name].final_train_loss)
    return results


def orderings(results: dict) -> list[tuple[str, str, bool]]:
    """``(better, worse, holds)`` for each expected ordering whose variants were run."""
    out = []
    for a, b in ORDERINGS:
        if a in results and b in results:
            out.append((a, b, results[a].eval_mse <= results[b].eval_mse))
    return out


def format_report(results: dict) -> str:
    lines = ["variant      eval_mse   train_loss"]
    for r in results.values():
        lines.append(f"{r.name:<12} {r.eval_mse:9.5f}  {r.final_train_loss:9.5f}")
    for a, b, ok in orderings(results):
        lines.append(f"{a} <= {b}: {'holds' if ok else 'does not hold'}")
    return "\n".join(lines)
