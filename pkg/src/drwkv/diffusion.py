"""DDPM machinery: noise schedule, corruption, loss, ancestral sampler, guidance, EMA.

Timesteps are 1-based throughout (``t = 1..T``); array entry ``t - 1`` holds
the step-``t`` value.  A respaced schedule keeps the original timestep of
each of its steps in ``timesteps`` so the network is always conditioned on
the training-time index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as tn
from .rng import Rng
from .tensor import Tensor

SIGMA_MODES = ("fixed_small", "fixed_large", "learned")
LN2 = math.log(2.0)


@dataclass
class NoiseSchedule:
    beta: np.ndarray
    timesteps: np.ndarray = None  # original 1-based timestep of each step
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)
    alpha_bar_prev: np.ndarray = field(init=False)
    posterior_var: np.ndarray = field(init=False)
    posterior_log_var: np.ndarray = field(init=False)  # clipped at step 1
    sigma: np.ndarray = field(init=False)  # fixed_small standard deviation

    def __post_init__(self):
        b = np.asarray(self.beta, dtype=np.float64)
        if b.ndim != 1 or b.size == 0 or np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must be a non-empty vector inside (0, 1)")
        self.beta = b
        if self.timesteps is None:
            self.timesteps = np.arange(1, b.size + 1)
        self.timesteps = np.asarray(self.timesteps, dtype=np.int64)
        self.alpha = 1.0 - b
        self.alpha_bar = np.cumprod(self.alpha)
        self.alpha_bar_prev = np.concatenate([[1.0], self.alpha_bar[:-1]])
        self.posterior_var = b * (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar)
        # the step-1 posterior variance is 0; borrow step 2's so the log stays finite
        pv = self.posterior_var
        self.posterior_log_var = np.log(np.concatenate([pv[1:2], pv[1:]]) if b.size > 1 else b)
        self.sigma = np.sqrt(pv)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def index(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep outside [1, {self.T}]")
        return t - 1

    def params(self) -> dict:
        return {"T": self.T, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Betas linearly spaced from ``beta_start`` to ``beta_end`` inclusive."""
    if T < 1:
        raise ValueError("T must be positive")
    if not 0 < beta_start < beta_end < 1:
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


def respace(schedule: NoiseSchedule, num_steps: int) -> NoiseSchedule:
    """Uniform-stride subsequence of ``num_steps`` steps with rescaled betas.

    The kept steps keep their cumulative products; each new beta is
    ``1 - alpha_bar[t] / alpha_bar[t_prev]``.
    """
    T = schedule.T
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must be in [1, {T}]")
    if num_steps == T:
        return schedule
    if num_steps == 1:
        keep = np.array([T - 1])
    else:
        keep = np.unique(np.round(np.linspace(0, T - 1, num_steps)).astype(np.int64))
    ab = schedule.alpha_bar[keep]
    prev = np.concatenate([[1.0], ab[:-1]])
    return NoiseSchedule(1.0 - ab / prev, timesteps=schedule.timesteps[keep])


def _per_item(a: np.ndarray, idx, ndim: int) -> np.ndarray:
    vals = a[idx]
    return np.reshape(vals, np.shape(vals) + (1,) * (ndim - np.ndim(vals)))


def q_sample(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps; ``t`` is a scalar or one per batch item."""
    x0 = np.asarray(x0)
    idx = schedule.index(t)
    ab = _per_item(schedule.alpha_bar, idx, x0.ndim)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps)).astype(x0.dtype)


def q_step(x_prev, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """One forward step: sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps."""
    x_prev = np.asarray(x_prev)
    b = _per_item(schedule.beta, schedule.index(t), x_prev.ndim)
    return np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * np.asarray(eps)


def learned_log_var(sigma_raw, t, schedule: NoiseSchedule) -> np.ndarray:
    """v log(beta_t) + (1 - v) log(posterior var), v = (tanh(raw) + 1) / 2."""
    raw = np.asarray(sigma_raw, dtype=np.float64)
    idx = schedule.index(t)
    lo = _per_item(schedule.posterior_log_var, idx, raw.ndim)
    hi = _per_item(np.log(schedule.beta), idx, raw.ndim)
    v = (np.tanh(raw) + 1.0) / 2.0
    return v * hi + (1.0 - v) * lo


def step_std(t, schedule: NoiseSchedule, sigma_mode: str, sigma_raw=None, ndim: int = 4) -> np.ndarray:
    idx = schedule.index(t)
    if sigma_mode == "fixed_small":
        return _per_item(schedule.sigma, idx, ndim)
    if sigma_mode == "fixed_large":
        return _per_item(np.sqrt(schedule.beta), idx, ndim)
    if sigma_mode == "learned":
        if sigma_raw is None:
            raise ValueError("learned variance needs the model's variance output")
        return np.exp(0.5 * learned_log_var(sigma_raw, t, schedule))
    raise ValueError(f"unknown sigma mode {sigma_mode!r}; expected one of {SIGMA_MODES}")


def p_sample_step(x_t, t, eps_hat, sigma_raw, z, schedule: NoiseSchedule,
                  sigma_mode: str = "fixed_small") -> np.ndarray:
    """x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_t) + sigma_t z"""
    x_t = np.asarray(x_t)
    idx = schedule.index(t)
    nd = x_t.ndim
    a = _per_item(schedule.alpha, idx, nd)
    b = _per_item(schedule.beta, idx, nd)
    ab = _per_item(schedule.alpha_bar, idx, nd)
    mean = (x_t - b / np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(a)
    std = step_std(t, schedule, sigma_mode, sigma_raw, nd)
    return (mean + std * np.asarray(z)).astype(x_t.dtype)


def cfg_combine(eps_cond, eps_uncond, s: float):
    """eps_uncond + s (eps_cond - eps_uncond); exact at s = 0 and s = 1."""
    if s < 0:
        raise ValueError("guidance scale must be non-negative")
    if s == 1:
        return eps_cond
    if s == 0:
        return eps_uncond
    return eps_uncond + s * (eps_cond - eps_uncond)


# --- training objective --------------------------------------------------------------

def _gaussian_kl(mean1, logvar1, mean2, logvar2: Tensor) -> Tensor:
    """KL(N(mean1, e^logvar1) || N(mean2, e^logvar2)); only ``logvar2`` is differentiable."""
    sq = (mean1 - mean2) ** 2
    d = tn.sub(logvar2, logvar1)
    return tn.mul(0.5, tn.add(tn.add(d, -1.0),
                              tn.add(tn.exp(tn.neg(d)), tn.mul(sq, tn.exp(tn.neg(logvar2))))))


def training_loss(model, x0, c, rng: Rng, schedule: NoiseSchedule, p_drop: float = 0.1):
    """Noise-prediction MSE, plus the variational bound on the learned variance.

    Returns ``(loss, stats)`` where ``loss`` is a recorded scalar and ``stats``
    holds the float ``loss``, ``mse`` and ``vlb`` parts.  Draw order from
    ``rng``: timesteps, noise, label drops.
    """
    x0 = np.asarray(x0, dtype=np.float32)
    B = x0.shape[0]
    t = rng.integers(1, schedule.T + 1, (B,))
    eps = rng.normal(x0.shape)
    labels = None
    if c is not None:
        labels = np.array(c, dtype=np.int64).reshape(-1)
        drop = rng.bernoulli(p_drop, (B,))
        labels[drop] = model.config.num_classes
    x_t = q_sample(x0, t, eps, schedule)
    eps_hat, raw = model(x_t, schedule.timesteps[t - 1], labels)
    mse = tn.mse(eps_hat, eps)
    if raw is None:
        return mse, {"loss": mse.item(), "mse": mse.item(), "vlb": 0.0}
    idx = t - 1
    nd = x0.ndim
    ab = _per_item(schedule.alpha_bar, idx, nd)
    abp = _per_item(schedule.alpha_bar_prev, idx, nd)
    a = _per_item(schedule.alpha, idx, nd)
    b = _per_item(schedule.beta, idx, nd)
    lo = _per_item(schedule.posterior_log_var, idx, nd)
    hi = _per_item(np.log(schedule.beta), idx, nd)
    x0d, xtd = x0.astype(np.float64), x_t.astype(np.float64)
    true_mean = (np.sqrt(abp) * b * x0d + np.sqrt(a) * (1 - abp) * xtd) / (1 - ab)
    model_mean = (xtd - b / np.sqrt(1 - ab) * eps_hat.data.astype(np.float64)) / np.sqrt(a)
    v = tn.mul(tn.add(tn.tanh(raw), 1.0), 0.5)
    logvar = tn.add(tn.mul(v, (hi - lo).astype(np.float32)), lo.astype(np.float32))
    kl = _gaussian_kl(true_mean.astype(np.float32), lo.astype(np.float32),
                      model_mean.astype(np.float32), logvar)
    vlb = tn.mul(tn.mean(kl), 1.0 / LN2)
    loss = tn.add(mse, vlb)
    return loss, {"loss": loss.item(), "mse": mse.item(), "vlb": vlb.item()}


# --- sampling ------------------------------------------------------------------------

@dataclass
class SamplerConfig:
    num_steps: int = 250
    guidance_scale: float = 1.0
    sigma_mode: str = "fixed_small"
    seed: int = 0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be at least 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be non-negative")
        if self.sigma_mode not in SIGMA_MODES:
            raise ValueError(f"unknown sigma mode {self.sigma_mode!r}")


def _denoiser(model) -> Callable:
    return model.predict if hasattr(model, "predict") else model


def sample_loop(model, shape, c, sampler: SamplerConfig, schedule: NoiseSchedule) -> np.ndarray:
    """Ancestral sampling from pure noise over a respaced schedule.

    ``model`` is a network with ``predict(x_t, t, c) -> (eps, raw)`` or a plain
    callable with that signature.  Item ``i`` of the batch draws its start
    noise and every step's noise from its own stream ``Rng(seed, i)``, so a
    sample does not depend on the batch it was drawn in.  With guidance the
    unconditional pass uses ``c=None``.
    """
    predict = _denoiser(model)
    sch = respace(schedule, sampler.num_steps)
    B = shape[0]
    rngs = [Rng(sampler.seed, stream=i) for i in range(B)]
    draw = lambda: np.stack([r.normal(shape[1:]) for r in rngs]).astype(np.float32)
    x = draw()
    s = sampler.guidance_scale
    guided = c is not None and s != 1
    for step in range(sch.T, 0, -1):
        tt = np.full(B, sch.timesteps[step - 1])
        eps, raw = predict(x, tt, c)
        if guided:
            eps_u, _ = predict(x, tt, None)
            eps = cfg_combine(eps, eps_u, s)
        z = draw() if step > 1 else np.zeros_like(x)
        x = p_sample_step(x, step, eps, raw, z, sch, sampler.sigma_mode)
    return np.clip(x, -1.0, 1.0)


def point_denoiser(x0_star, schedule: NoiseSchedule):
    """Exact noise predictor for a dataset holding the single point ``x0_star``."""
    x0_star = np.asarray(x0_star, dtype=np.float64)
    ab_of = {int(t): schedule.alpha_bar[t - 1] for t in schedule.timesteps}

    def predict(x_t, t, c=None):
        ab = np.array([ab_of[int(s)] for s in np.asarray(t).reshape(-1)])
        ab = ab.reshape((-1,) + (1,) * (np.ndim(x_t) - 1))
        return (np.asarray(x_t) - np.sqrt(ab) * x0_star) / np.sqrt(1 - ab), None

    return predict


# --- EMA -----------------------------------------------------------------------------

@dataclass
class EmaState:
    shadow: dict
    decay: float = 0.9999

    @classmethod
    def from_params(cls, params: dict, decay: float = 0.9999) -> "EmaState":
        return cls({n: np.array(_arr(p), dtype=np.float32) for n, p in params.items()}, decay)


def _arr(p) -> np.ndarray:
    return p.data if isinstance(p, Tensor) else np.asarray(p)


def ema_update(ema: EmaState, model_params: dict, d: Optional[float] = None) -> EmaState:
    """shadow <- d * shadow + (1 - d) * param for every parameter, in place."""
    d = ema.decay if d is None else d
    if set(model_params) != set(ema.shadow):
        raise ValueError("EMA and model parameter names differ")
    for name, p in model_params.items():
        p = _arr(p)
        sh = ema.shadow[name]
        if sh.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {sh.shape} vs {p.shape}")
        if d == 0:
            sh[...] = p
        elif d != 1:
            sh *= np.float32(d)
            sh += np.float32(1 - d) * p
    return ema
