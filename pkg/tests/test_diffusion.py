import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drwkv import tensor as tn
from drwkv.backbone import DiffusionRWKV, ModelConfig
from drwkv.diffusion import (EmaState, SamplerConfig, cfg_combine, ema_update, learned_log_var, linear_schedule,
                             p_sample_step, point_denoiser, q_sample, q_step, respace, sample_loop, step_std,
                             training_loss)
from drwkv.rng import Rng
from drwkv.tensor import Tensor
from drwkv.train import AdamW
from drwkv.verify import rel_err, sampler_oracle_errors


@pytest.fixture(scope="module")
def sched():
    return linear_schedule()


def tiny(**kw):
    base = dict(L=3, D=16, E=2, p=2, H=8, W=8, C=1, num_classes=2)
    base.update(kw)
    return ModelConfig(**base)


def test_schedule_endpoints(sched):
    assert sched.beta[0] == 1e-4 and sched.beta[-1] == 2e-2
    assert sched.alpha_bar[0] == pytest.approx(0.9999, abs=1e-15)
    assert math.prod(1 - b for b in np.linspace(1e-4, 2e-2, 1000)) < 1e-4
    assert sched.alpha_bar[-1] < 1e-4


def test_schedule_monotone(sched):
    assert np.all(np.diff(sched.beta) > 0) and np.all(sched.beta > 0) and np.all(sched.beta < 1)
    assert np.all(np.diff(sched.alpha_bar) < 0)
    one_minus = 1 - sched.alpha_bar
    assert np.all((one_minus > 0) & (one_minus < 1))
    assert np.all(np.isfinite(sched.posterior_log_var))


def test_schedule_bad_bounds():
    for lo, hi in [(0, 0.02), (0.02, 0.01), (1e-4, 1.0)]:
        with pytest.raises(ValueError):
            linear_schedule(1000, lo, hi)


def test_q_sample_branches(sched):
    x0 = Rng(0).normal((2, 1, 4, 4))
    eps = Rng(1).normal((2, 1, 4, 4))
    t = np.array([1, 700])
    ab = sched.alpha_bar[t - 1].reshape(2, 1, 1, 1)
    assert np.allclose(q_sample(x0, t, np.zeros_like(x0), sched), np.sqrt(ab) * x0)
    assert np.allclose(q_sample(np.zeros_like(x0), t, eps, sched), np.sqrt(1 - ab) * eps)
    with pytest.raises(ValueError):
        q_sample(x0, 0, eps, sched)
    with pytest.raises(ValueError):
        q_sample(x0, 1001, eps, sched)


@pytest.mark.parametrize("t", [1, 100, 500, 1000])
def test_q_sample_monte_carlo_variance(sched, t):
    eps = Rng(2, t).normal(100_000, np.float64)
    x = q_sample(np.full(100_000, 0.7), t, eps, sched)
    var = x.var()
    assert abs(var - (1 - sched.alpha_bar[t - 1])) <= 0.03 * (1 - sched.alpha_bar[t - 1])


@pytest.mark.parametrize("t", [20, 300])
def test_iterated_one_step_matches_closed_form(sched, t):
    rng = Rng(3, t)
    x = np.full(100_000, 0.5)
    for s in range(1, t + 1):
        x = q_step(x, s, rng.normal(100_000, np.float64), sched)
    ab = sched.alpha_bar[t - 1]
    assert abs(x.mean() - np.sqrt(ab) * 0.5) <= 0.03 * max(np.sqrt(ab) * 0.5, np.sqrt(1 - ab))
    assert abs(x.var() - (1 - ab)) <= 0.03 * (1 - ab)


class EpsOracle:
    """Returns the true noise, recovered from x_t and x0."""

    def __init__(self, x0, sched, learn_sigma=True):
        self.x0, self.sched = x0, sched
        self.config = tiny(learn_sigma=learn_sigma)
        self.raw = None

    def __call__(self, x_t, t, c=None):
        ab = self.sched.alpha_bar[np.asarray(t) - 1].reshape(-1, 1, 1, 1)
        eps = (x_t.astype(np.float64) - np.sqrt(ab) * self.x0) / np.sqrt(1 - ab)
        self.raw = Tensor(np.zeros_like(x_t), requires_grad=True)
        return Tensor(eps), self.raw


class Zero:
    def __init__(self, cfg):
        self.config = cfg

    def __call__(self, x_t, t, c=None):
        return Tensor(np.zeros_like(x_t)), None


def test_training_loss_perfect_predictor(sched):
    x0 = Rng(4).uniform((8, 1, 8, 8)) * 2 - 1
    loss, stats = training_loss(EpsOracle(x0, sched), x0, None, Rng(5), sched)
    assert stats["mse"] <= 1e-10
    assert np.isfinite(stats["vlb"]) and stats["vlb"] >= -1e-6


def test_training_loss_zero_predictor(sched):
    x0 = np.zeros((1024, 1, 8, 8), np.float32)
    _, stats = training_loss(Zero(tiny(learn_sigma=False)), x0, None, Rng(6), sched)
    # replay the loss's own draws: timesteps first, then noise
    rng = Rng(6)
    rng.integers(1, 1001, (1024,))
    eps = rng.normal(x0.shape)
    assert stats["mse"] == pytest.approx(float(np.mean(eps.astype(np.float64) ** 2)), rel=1e-5)
    # mean of 65536 squared normals: standard error 0.0055
    assert stats["mse"] == pytest.approx(1.0, abs=0.025)
    assert stats["vlb"] == 0.0


def test_training_loss_labels_ignored_when_all_dropped(sched):
    m = DiffusionRWKV(tiny(), seed=0)
    m.randomize_(1, 0.1)
    x0 = Rng(7).uniform((4, 1, 8, 8)) * 2 - 1
    a, _ = training_loss(m, x0, np.array([0, 0, 0, 0]), Rng(8), sched, p_drop=1.0)
    tn.current_record().clear()
    b, _ = training_loss(m, x0, np.array([1, 1, 0, 1]), Rng(8), sched, p_drop=1.0)
    tn.current_record().clear()
    assert a.item() == b.item()
    c, _ = training_loss(m, x0, np.array([1, 1, 0, 1]), Rng(8), sched, p_drop=0.0)
    tn.current_record().clear()
    assert c.item() != a.item()


def test_vlb_gradient_reaches_the_variance_channels(sched):
    x0 = Rng(9).uniform((4, 1, 8, 8)) * 2 - 1
    oracle = EpsOracle(x0, sched)
    loss, stats = training_loss(oracle, x0, None, Rng(10), sched)
    tn.backward(loss)
    assert oracle.raw.grad is not None and np.any(oracle.raw.grad)


def test_p_sample_zero_noise_prediction(sched):
    x = Rng(11).normal((2, 1, 4, 4))
    out = p_sample_step(x, 500, np.zeros_like(x), None, np.zeros_like(x), sched)
    assert np.allclose(out, x / np.sqrt(sched.alpha[499]), rtol=1e-6)
    with pytest.raises(ValueError):
        p_sample_step(x, 0, x, None, x, sched)


def test_p_sample_final_step_inverts_corruption(sched):
    rng = Rng(12)
    x0 = rng.uniform((3, 1, 4, 4)) * 2 - 1
    eps = rng.normal((3, 1, 4, 4), np.float64)
    back = p_sample_step(q_sample(x0, 1, eps, sched), 1, eps, None, np.zeros_like(x0), sched, "fixed_small")
    assert rel_err(back, x0, 1e-12) <= 1e-5


def test_learned_variance_endpoints(sched):
    t = np.array([1, 10, 999])
    lo = learned_log_var(np.full((3, 1), -1e3), t, sched)
    hi = learned_log_var(np.full((3, 1), 1e3), t, sched)
    assert np.allclose(np.exp(hi[:, 0]), sched.beta[t - 1])
    assert np.allclose(np.exp(lo[1:, 0]), sched.posterior_var[t[1:] - 1])
    std = step_std(500, sched, "fixed_large", ndim=1)
    assert std[0] == pytest.approx(np.sqrt(sched.beta[499]))
    with pytest.raises(ValueError):
        step_std(500, sched, "learned")
    with pytest.raises(ValueError):
        step_std(500, sched, "other")


def test_respace_identity_and_compression(sched):
    assert respace(sched, 1000) is sched
    r = respace(sched, 250)
    assert r.T == 250 and r.timesteps[0] == 1 and r.timesteps[-1] == 1000
    assert np.allclose(r.alpha_bar, sched.alpha_bar[r.timesteps - 1], rtol=1e-12)
    with pytest.raises(ValueError):
        respace(sched, 0)
    a = sample_loop(point_denoiser(np.zeros((1, 2, 2)), sched), (2, 1, 2, 2), None,
                    SamplerConfig(1000, seed=3), sched)
    short = linear_schedule(40)
    assert np.array_equal(
        sample_loop(point_denoiser(np.full((1, 2, 2), 0.3), short), (2, 1, 2, 2), None, SamplerConfig(40, seed=1), short),
        sample_loop(point_denoiser(np.full((1, 2, 2), 0.3), respace(short, 40)), (2, 1, 2, 2), None,
                    SamplerConfig(40, seed=1), short))
    assert a.shape == (2, 1, 2, 2)


def test_sampling_is_deterministic_and_batch_independent():
    m = DiffusionRWKV(tiny(), seed=1)
    m.randomize_(2, 0.05)
    s = linear_schedule()
    cfg = SamplerConfig(5, 1.0, "learned", seed=9)
    a = sample_loop(m, (3, 1, 8, 8), np.array([0, 1, 0]), cfg, s)
    b = sample_loop(m, (3, 1, 8, 8), np.array([0, 1, 0]), cfg, s)
    assert np.array_equal(a, b)
    assert np.all(np.abs(a) <= 1)
    first = sample_loop(m, (1, 1, 8, 8), np.array([0]), cfg, s)
    assert np.array_equal(first[0], a[0])


def test_point_denoiser_concentrates_and_converges():
    errs = sampler_oracle_errors()
    assert errs[250] < 0.05
    assert errs[250] <= errs[50] <= errs[10]


def test_cfg_examples():
    e_c, e_u = np.array([1.0, 3.0]), np.array([0.0, -1.0])
    assert cfg_combine(e_c, e_u, 1.0) is e_c
    assert cfg_combine(e_c, e_u, 0.0) is e_u
    assert cfg_combine(np.array(1.0), np.array(0.0), 2.0) == 2.0
    with pytest.raises(ValueError):
        cfg_combine(e_c, e_u, -0.5)
    with pytest.raises(ValueError):
        SamplerConfig(10, -1.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.integers(0, 10 ** 6))
def test_cfg_is_affine_in_scale(s1, s2, seed):
    rng = Rng(seed)
    e_c, e_u = rng.normal(16, np.float64), rng.normal(16, np.float64)
    lhs = cfg_combine(e_c, e_u, s1) + cfg_combine(e_c, e_u, s2)
    rhs = 2 * cfg_combine(e_c, e_u, (s1 + s2) / 2)
    assert np.max(np.abs(lhs - rhs)) <= 1e-6 * max(1.0, s1 + s2)


def test_guidance_one_skips_unconditional_pass():
    calls = []

    def den(x, t, c):
        calls.append(c)
        return np.zeros_like(x), None

    s = linear_schedule(20)
    sample_loop(den, (2, 1, 2, 2), np.array([0, 1]), SamplerConfig(20, 1.0), s)
    assert all(c is not None for c in calls) and len(calls) == 20
    calls.clear()
    sample_loop(den, (2, 1, 2, 2), np.array([0, 1]), SamplerConfig(20, 3.0), s)
    assert sum(c is None for c in calls) == 20


def test_ema_examples():
    p = {"a": np.ones(3, np.float32)}
    ema = EmaState({"a": np.zeros(3, np.float32)}, 0.9999)
    ema_update(ema, p)
    assert np.allclose(ema.shadow["a"], 1e-4, rtol=1e-4)
    ema_update(ema, p, d=1.0)
    assert np.allclose(ema.shadow["a"], 1e-4, rtol=1e-4)
    ema_update(ema, p, d=0.0)
    assert np.array_equal(ema.shadow["a"], p["a"])
    with pytest.raises(ValueError):
        ema_update(ema, {"a": np.ones(4, np.float32)})
    with pytest.raises(ValueError):
        ema_update(ema, {"b": np.ones(3, np.float32)})


def test_adamw_zero_gradient_leaves_params():
    m = DiffusionRWKV(tiny(), seed=0)
    params = m.parameters()
    before = {n: p.data.copy() for n, p in params.items()}
    for p in params.values():
        p.grad = np.zeros_like(p.data)
    AdamW(params, lr=1e-4).step(params)
    assert all(np.array_equal(before[n], p.data) for n, p in params.items())


def test_ema_differs_from_live_after_update():
    m = DiffusionRWKV(tiny(), seed=0)
    params = m.parameters()
    ema = EmaState.from_params(params, 0.9999)
    loss, _ = training_loss(m, Rng(13).uniform((4, 1, 8, 8)) * 2 - 1, np.array([0, 1, 0, 1]), Rng(14),
                            linear_schedule())
    tn.backward(loss)
    AdamW(params, lr=1e-3).step(params)
    ema_update(ema, params)
    changed = [n for n, p in params.items() if not np.array_equal(p.data, ema.shadow[n])]
    assert changed
