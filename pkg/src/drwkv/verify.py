"""Self-verification suites: every oracle, round trip and identity the library relies on.

Each suite returns a list of ``Check`` results; :func:`run_verify` prints one
line per suite and reports overall success.
"""

from __future__ import annotations

import math
import os
import tempfile
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import tensor as tn
from . import wkv
from .backbone import (PRESETS, DiffusionRWKV, ModelConfig, model_flops, patchify,
                       timestep_embed, unpatchify)
from .bench import run_bench
from .block import Modulation, block_forward, init_block_weights, quad_shift, TokenGrid
from .checkpoint import checkpoint_load, checkpoint_save, encode, decode
from .data import encode_pixmap, synth_two_blobs, cifar10_load, CIFAR_RECORD
from .diffusion import (SamplerConfig, linear_schedule, p_sample_step, point_denoiser,
                        q_sample, q_step, sample_loop, training_loss)
from .rng import Rng
from .train import TrainConfig, running_average, train_loop
from .wkv import WkvParams, wkv_backward, wkv_bidirectional, wkv_causal, wkv_oracle


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""


@dataclass
class SuiteResult:
    name: str
    checks: list = field(default_factory=list)
    seconds: float = 0.0
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None and all(c.ok for c in self.checks)


def rel_err(a, b, floor: float = 1e-6) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / (np.abs(b) + floor))) if a.size else 0.0


def grad_close(analytic: float, numeric: float, rtol: float = 1e-3,
               atol: float = 1e-2, small: float = 1e-4) -> bool:
    """Relative agreement, with an absolute floor for gradients smaller than ``small``."""
    mag = max(abs(analytic), abs(numeric))
    if mag < small:
        return abs(analytic - numeric) <= atol
    return abs(analytic - numeric) <= rtol * mag


# --- kernel ----------------------------------------------------------------------

def random_wkv_case(rng: Rng, J: int, D: int, k_range: float = 80.0):
    k = (rng.uniform((J, D)) * 2 - 1) * k_range
    v = rng.uniform((J, D)) * 2 - 1
    w = rng.uniform(D) * 4
    u = (rng.uniform(D) * 2 - 1) * 4
    return k, v, WkvParams(w, u, normalize_decay=bool(rng.uniform() < 0.5))


def kernel_oracle_equivalence(cases: int = 500, seed: int = 0) -> Check:
    """Random J in 1..64, D in 1..16, k in [-80, 80]: scan vs quadratic oracle."""
    rng = Rng(seed, stream=0x0C)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(cases):
        J = int(rng.integers(1, 65))
        D = int(rng.integers(1, 17))
        k, v, params = random_wkv_case(rng, J, D)
        h = wkv_bidirectional(k.astype(np.float32), v.astype(np.float32), params)
        ref = wkv_oracle(k.astype(np.float32), v.astype(np.float32), params)
        if not np.all(np.isfinite(h)):
            return Check("scan == oracle (500 cases)", False, "non-finite scan output")
        worst = max(worst, rel_err(h, ref))
    dt = time.perf_counter() - t0
    return Check(f"scan == oracle ({cases} cases)", worst <= 1e-5 and dt < 30,
                 f"max rel err {worst:.2e}, {dt:.1f}s")


def suite_kernel() -> list[Check]:
    out = [kernel_oracle_equivalence()]
    rng = Rng(1, stream=0x0D)
    worst = 0.0
    for _ in range(100):
        J, D = int(rng.integers(1, 65)), int(rng.integers(1, 17))
        k, v, params = random_wkv_case(rng, J, D)
        worst = max(worst, rel_err(wkv_causal(k, v, params), wkv_oracle(k, v, params, causal=True)))
    out.append(Check("causal scan == causal oracle", worst <= 1e-5, f"max rel err {worst:.2e}"))
    k, v, params = random_wkv_case(rng, 40, 8, 50)
    shifted = wkv_bidirectional(k + 17.0, v, params)
    out.append(Check("shift invariance in k", rel_err(shifted, wkv_bidirectional(k, v, params)) <= 1e-5))
    k, v, _ = random_wkv_case(rng, 33, 5)
    h = wkv_bidirectional(k, v, WkvParams.zeros(5))
    out.append(Check("decay-free output constant over tokens", rel_err(h, h[:1].repeat(33, 0)) <= 1e-6))
    k = np.full((24, 3), 80.0, dtype=np.float32)
    v = rng.uniform((24, 3)).astype(np.float32)
    h = wkv_bidirectional(k, v, params_like(3, rng))
    out.append(Check("finite at k = +80 in float32", bool(np.all(np.isfinite(h)))))
    return out


def params_like(D: int, rng: Rng) -> WkvParams:
    return WkvParams(rng.uniform(D), rng.uniform(D) - 0.5)


# --- gradients ---------------------------------------------------------------------

def wkv_gradient_check(J: int = 16, D: int = 4, seed: int = 0, h: float = 1e-6) -> Check:
    rng = Rng(seed, stream=0x6D)
    k, v, params = random_wkv_case(rng, J, D, 5.0)
    params.w = params.w + 0.1
    G = rng.uniform((J, D)) * 2 - 1
    loss = lambda kk, vv, pp: float((wkv_bidirectional(kk, vv, pp) * G).sum())
    dk, dv, dw, du = wkv_backward(k, v, params, G)
    bad, n = 0, 0
    for arr, grad, kind in ((k, dk, "k"), (v, dv, "v")):
        for idx in np.ndindex(arr.shape):
            a = arr.copy(); a[idx] += h
            b = arr.copy(); b[idx] -= h
            num = ((loss(a, v, params) - loss(b, v, params)) if kind == "k"
                   else (loss(k, a, params) - loss(k, b, params))) / (2 * h)
            bad += not grad_close(grad[idx], num); n += 1
    for name, grad in (("w", dw), ("u", du)):
        for i in range(D):
            plus, minus = replace_param(params, name, i, h), replace_param(params, name, i, -h)
            num = (loss(k, v, plus) - loss(k, v, minus)) / (2 * h)
            bad += not grad_close(grad[i], num); n += 1
    return Check(f"WKV adjoints vs finite differences ({n} entries)", bad == 0, f"{bad} mismatches")


def replace_param(params: WkvParams, name: str, i: int, delta: float) -> WkvParams:
    w, u = params.w.copy(), params.u.copy()
    (w if name == "w" else u)[i] += delta
    return WkvParams(w, u, params.normalize_decay)


def gradcheck_config() -> ModelConfig:
    return ModelConfig(L=3, D=16, E=2, p=2, H=4, W=4, C=1, num_classes=2)


def model_gradient_check(config: Optional[ModelConfig] = None, n_params: int = 200, seed: int = 0,
                         h: float = 1e-5) -> Check:
    """Full-model backward vs central differences at randomly chosen scalar parameters.

    Both sides are evaluated in float64 so the comparison measures the
    adjoints rather than float32 rounding; the float32 backward is compared
    against the same differences and its worst error is reported alongside.
    """
    cfg = config or gradcheck_config()
    model = DiffusionRWKV(cfg, seed=seed)
    model.randomize_(seed + 1, 0.3)
    rng = Rng(seed, stream=0x6E)
    B = 2
    x = rng.normal((B, cfg.C, cfg.H, cfg.W))
    t = rng.integers(1, cfg.T + 1, (B,))
    c = rng.integers(0, cfg.num_classes + 1, (B,)) if cfg.num_classes else None
    R1 = rng.normal((B, cfg.C, cfg.H, cfg.W))
    R2 = rng.normal((B, cfg.C, cfg.H, cfg.W))

    def objective():
        eps, raw = model(x, t, c)
        out = tn.sum(tn.mul(eps, R1))
        return out if raw is None else tn.add(out, tn.sum(tn.mul(tn.tanh(raw), R2)))

    params = model.named_parameters()
    # at least one entry from every tensor, the rest uniformly over all scalars
    picks = [(i, int(rng.integers(0, p.size))) for i, (_, p) in enumerate(params)]
    sizes = np.array([p.size for _, p in params], dtype=np.float64)
    while len(picks) < n_params:
        i = int(np.searchsorted(np.cumsum(sizes) / sizes.sum(), rng.uniform(), side="right"))
        picks.append((i, int(rng.integers(0, params[i][1].size))))

    def analytic_grads():
        model.zero_grad()
        tn.backward(objective())
        return [float(params[i][1].grad.reshape(-1)[j]) for i, j in picks]

    saved = {n: p.data for n, p in params}
    g32 = analytic_grads()
    with tn.precision(np.float64):
        for _, p in params:
            p.data = p.data.astype(np.float64)
        g64 = analytic_grads()
        numeric = []
        with tn.no_grad():
            for i, j in picks:
                flat = params[i][1].data.reshape(-1)
                orig = flat[j]
                flat[j] = orig + h
                lp = float(objective().data)
                flat[j] = orig - h
                lm = float(objective().data)
                flat[j] = orig
                numeric.append((lp - lm) / (2 * h))
    for n, p in params:
        p.data = saved[n]
        p.grad = None
    bad = [(params[i][0], j, a, nm) for (i, j), a, nm in zip(picks, g64, numeric) if not grad_close(a, nm)]
    rel32 = max(abs(a - nm) / max(abs(nm), 1e-4) for a, nm in zip(g32, numeric))
    detail = f"{len(bad)} mismatches" + (f", e.g. {bad[0]}" if bad else "") + f"; float32 worst rel {rel32:.1e}"
    return Check(f"model backward vs finite differences ({len(picks)} params)", not bad, detail)


def _row(y, i: int):
    return tn.reshape(tn.split(y, [1] * y.shape[0], axis=0)[i], (y.shape[1],))


def op_gradient_check(seed: int = 0, h: float = 1e-3, dtype=np.float32) -> Check:
    """Each differentiable primitive (backward in ``dtype``) against float64 central differences."""
    rng = Rng(seed, stream=0x6F)
    bad = []
    x0 = rng.normal((3, 4), dtype=np.float64)
    y0 = rng.normal((3, 4), dtype=np.float64)
    W0 = rng.normal((4, 5), dtype=np.float64)
    R = rng.normal((3, 5), dtype=np.float64)
    cases = {
        "add": lambda x, y: tn.add(x, y), "sub": lambda x, y: tn.sub(x, y),
        "mul": lambda x, y: tn.mul(x, y), "exp": lambda x, y: tn.exp(x),
        "tanh": lambda x, y: tn.tanh(x), "sigmoid": lambda x, y: tn.sigmoid(x),
        "relu_sq": lambda x, y: tn.relu_sq(x), "silu": lambda x, y: tn.silu(x),
        "maximum": lambda x, y: tn.maximum(x, y),
        "layer_norm": lambda x, y: tn.layer_norm(x, _row(y, 0), _row(y, 1), 1e-6),
        "concat/split": lambda x, y: tn.split(tn.concat([x, y], axis=-1), [3, 5])[1],
        "transpose": lambda x, y: tn.mul(tn.transpose(x, (1, 0)), tn.transpose(y, (1, 0))),
        "mean": lambda x, y: tn.mul(tn.mean(x, axis=0), _row(y, 0)),
        "mse": lambda x, y: tn.mse(x, y),
        "matmul": None,
    }
    for name, f in cases.items():
        fn = (lambda a, b: tn.matmul(a, b)) if name == "matmul" else f
        ydata = W0 if name == "matmul" else y0

        def scalar(a, b):
            out = fn(a, b)
            wt = R if name == "matmul" else np.cos(np.arange(out.size)).reshape(out.shape)
            return tn.sum(tn.mul(out, wt))

        with tn.precision(dtype):
            X = tn.Tensor(x0, requires_grad=True)
            Y = tn.Tensor(ydata, requires_grad=True)
            tn.backward(scalar(X, Y))
        with tn.precision(np.float64), tn.no_grad():
            for T_, base in ((X, x0), (Y, ydata)):
                if T_.grad is None:
                    continue
                for idx in list(np.ndindex(base.shape))[:8]:
                    a, b = base.copy(), base.copy()
                    a[idx] += h
                    b[idx] -= h
                    args_p = (a, ydata) if T_ is X else (x0, a)
                    args_m = (b, ydata) if T_ is X else (x0, b)
                    num = (float(scalar(*map(tn.Tensor, args_p)).data)
                           - float(scalar(*map(tn.Tensor, args_m)).data)) / (2 * h)
                    if not grad_close(float(T_.grad[idx]), num):
                        bad.append(name)
    return Check("primitive adjoints vs finite differences", not bad, f"failing: {sorted(set(bad))}")


def suite_gradients() -> list[Check]:
    t0 = time.perf_counter()
    out = [op_gradient_check(), wkv_gradient_check(), model_gradient_check()]
    dt = time.perf_counter() - t0
    out.append(Check("gradient checks finish within 2 min", dt < 120, f"{dt:.1f}s"))
    return out


# --- operation counts ----------------------------------------------------------------

def flops_report(preset: str, H: int = 32, W: int = 32, p: int = 2, C: int = 4) -> str:
    """One line per component plus the published reference figure for the preset."""
    cfg = ModelConfig.preset(preset, H=H, W=W, p=p, C=C, learn_sigma=True)
    parts = model_flops(cfg)
    total = parts["total"]
    ref = PRESETS[preset][3]
    lines = [f"preset {preset}: L={cfg.L} D={cfg.D} E={cfg.E} J={cfg.J} (H={H} W={W} p={p} C={C})"]
    for k, v in parts.items():
        if k != "total":
            lines.append(f"  {k:<14} {v / 1e9:10.4f} Gflops  ({100 * v / total:5.2f}%)")
    lines.append(f"  wkv per call   {wkv.wkv_flops(cfg.J, cfg.D):,} flops (13*J*D)")
    lines.append(f"  kernel share   {100 * parts['wkv'] / total:.3f}%")
    dev = (total / 1e9 - ref) / ref
    lines.append(f"  total {total / 1e9:.2f} Gflops | reference {ref:.2f} Gflops | deviation {100 * dev:+.1f}%")
    return "\n".join(lines)


def suite_flops() -> list[Check]:
    out = [
        Check("wkv_flops(256, 768) == 2,555,904", wkv.wkv_flops(256, 768) == 2_555_904),
        Check("wkv_flops(256, 384) == 1,277,952", wkv.wkv_flops(256, 384) == 1_277_952),
        Check("wkv_flops(1024, 384) == 5,111,808", wkv.wkv_flops(1024, 384) == 5_111_808),
        Check("wkv_flops(1, 1) == 13", wkv.wkv_flops(1, 1) == 13),
    ]
    cfg = ModelConfig.preset("B", H=32, W=32, C=4)
    big = replace(cfg, H=64, W=32)
    out.append(Check("doubling J doubles the kernel term",
                     model_flops(big)["wkv"] == 2 * model_flops(cfg)["wkv"]))
    refs = {"S": "1.72", "B": "3.32", "M": "5.90", "L": "19.65", "H": "34.95"}
    for name, ref in refs.items():
        out.append(Check(f"{name} report shows reference {ref}", f"reference {ref} Gflops" in flops_report(name)))
    return out


# --- complexity --------------------------------------------------------------------

def suite_complexity() -> list[Check]:
    t0 = time.perf_counter()
    r = run_bench()
    dt = time.perf_counter() - t0
    return [
        Check("scan log-log slope < 1.4", r.scan_slope < 1.4, f"{r.scan_slope:.3f}"),
        Check("oracle log-log slope > 1.7", r.oracle_slope > 1.7, f"{r.oracle_slope:.3f}"),
        Check("benchmark within 2 min", dt < 120, f"{dt:.1f}s"),
    ]


# --- schedule --------------------------------------------------------------------

def suite_schedule() -> list[Check]:
    s = linear_schedule(1000, 1e-4, 2e-2)
    direct = 1.0
    for a in 1.0 - s.beta:
        direct *= a
    out = [
        Check("beta_1 == 1e-4 and beta_1000 == 2e-2", s.beta[0] == 1e-4 and abs(s.beta[-1] - 2e-2) < 1e-15),
        Check("beta strictly increasing", bool(np.all(np.diff(s.beta) > 0))),
        Check("alpha_bar strictly decreasing", bool(np.all(np.diff(s.alpha_bar) < 0))),
        Check("1 - alpha_bar in (0, 1)", bool(np.all((1 - s.alpha_bar > 0) & (1 - s.alpha_bar < 1)))),
        Check("alpha_bar_1 == 0.9999", abs(s.alpha_bar[0] - 0.9999) < 1e-15),
        Check("alpha_bar_1000 < 1e-4 (direct product)", direct < 1e-4 and abs(s.alpha_bar[-1] - direct) < 1e-12,
              f"{direct:.4e}"),
    ]
    rng = Rng(0, stream=0x5C)
    n = 100_000
    x0 = 0.7
    for t in (10, 300):
        xt = q_sample(np.full(n, x0), t, rng.normal(n, dtype=np.float64), s)
        var = xt.var()
        out.append(Check(f"Monte-Carlo var of x_{t} within 3%", abs(var / (1 - s.alpha_bar[t - 1]) - 1) < 0.03,
                         f"{var:.5f} vs {1 - s.alpha_bar[t - 1]:.5f}"))
        x = np.full(n, x0)
        for step in range(1, t + 1):
            x = q_step(x, step, rng.normal(n, dtype=np.float64), s)
        mean_ok = abs(x.mean() - math.sqrt(s.alpha_bar[t - 1]) * x0) < 0.03 * max(1.0, abs(x.mean()))
        var_ok = abs(x.var() / (1 - s.alpha_bar[t - 1]) - 1) < 0.03
        out.append(Check(f"iterated one-step marginal at t={t}", mean_ok and var_ok))
    return out


# --- sampler ---------------------------------------------------------------------

def sampler_oracle_errors(steps=(10, 50, 250), n: int = 64, seed: int = 0) -> dict:
    s = linear_schedule()
    x0 = (Rng(seed, stream=0x5A).uniform((1, 8, 8)) * 1.8 - 0.9).astype(np.float32)
    den = point_denoiser(x0, s)
    errs = {}
    for k in steps:
        x = sample_loop(den, (n, 1, 8, 8), None, SamplerConfig(k, 1.0, "fixed_small", seed), s)
        errs[k] = float(np.abs(x - x0).mean())
    return errs


def suite_sampler() -> list[Check]:
    errs = sampler_oracle_errors()
    s = linear_schedule()
    rng = Rng(3, stream=0x5B)
    x0 = rng.uniform((2, 1, 4, 4)) * 2 - 1
    eps = rng.normal((2, 1, 4, 4), dtype=np.float64)
    x1 = q_sample(x0, 1, eps, s)
    back = p_sample_step(x1, 1, eps, None, np.zeros_like(x1), s, "fixed_small")
    return [
        Check("64 samples at 250 steps: mean abs error < 0.05", errs[250] < 0.05, f"{errs[250]:.3e}"),
        Check("error non-increasing 10 -> 50 -> 250 steps", errs[250] <= errs[50] <= errs[10],
              ", ".join(f"{k}: {v:.3e}" for k, v in errs.items())),
        Check("t=1 step inverts q_sample", rel_err(back, x0, 1e-12) <= 1e-5),
    ]


# --- identities and round trips ------------------------------------------------------

def tiny_config(**kw) -> ModelConfig:
    base = dict(L=3, D=16, E=2, p=2, H=8, W=8, C=1, num_classes=2)
    base.update(kw)
    return ModelConfig(**base)


def resume_equivalence(k: int = 5, extra: int = 10, seed: int = 0) -> tuple[float, float]:
    """Final losses of (train k, save, resume for extra steps) and (train k + extra straight)."""
    ds = synth_two_blobs(64, 8, 8, seed=seed)
    cfg = tiny_config()
    tc = TrainConfig(steps=k + extra, batch_size=8, lr=1e-3, save_interval=k, log_interval=5, seed=seed)
    with tempfile.TemporaryDirectory() as d:
        straight = train_loop(DiffusionRWKV(cfg, seed), ds, tc)
        train_loop(DiffusionRWKV(cfg, seed), ds, tc, out_dir=d, stop_after=k)
        ck = checkpoint_load(os.path.join(d, f"ckpt_{k:06d}.drwk"))
        resumed = train_loop(DiffusionRWKV(cfg, seed), ds, tc, resume=ck)
    return resumed.history[-1]["loss"], straight.history[-1]["loss"]


def suite_identities() -> list[Check]:
    out = []
    cfg = tiny_config()
    model = DiffusionRWKV(cfg, seed=0)
    rng = Rng(0, stream=0x1D)
    x = rng.normal((3, 1, 8, 8))
    eps, raw = model.predict(x, np.array([1, 500, 1000]), np.array([0, 1, 2]))
    out.append(Check("adaLN-Zero output bitwise zero at init",
                     bool(np.all(eps == 0) and np.all(raw == 0) and not np.signbit(eps).any())))
    wts = init_block_weights(rng, 16, 2, zero_out=False)
    tok = tn.Tensor(rng.normal((2, 16, 16)))
    zero = np.zeros((2, 1, 16), np.float32)
    m = Modulation(tn.Tensor(rng.normal((2, 1, 16))), tn.Tensor(rng.normal((2, 1, 16))),
                   tn.Tensor(rng.normal((2, 1, 16))), tn.Tensor(rng.normal((2, 1, 16))),
                   tn.Tensor(zero), tn.Tensor(zero))
    with tn.no_grad():
        y = block_forward(tok, wts, 4, 4, m)
    out.append(Check("alpha = 0 block is the identity bitwise", bool(np.array_equal(y.data, tok.data))))
    img = rng.normal((2, 3, 8, 12))
    out.append(Check("unpatchify(patchify(x)) == x bitwise",
                     bool(np.array_equal(unpatchify(patchify(img, 2), 2, 3, 8, 12), img))))
    # checkpoint round trip
    model.randomize_(1)
    with tempfile.TemporaryDirectory() as d:
        p1, p2 = os.path.join(d, "a.drwk"), os.path.join(d, "b.drwk")
        checkpoint_save(p1, model, step=7)
        ck = checkpoint_load(p1)
        m2 = DiffusionRWKV(ck.config)
        m2.load_arrays(ck.model)
        checkpoint_save(p2, m2, step=ck.step)
        same = all(np.array_equal(a.view(np.uint32), ck.model[n].view(np.uint32))
                   for n, a in model.state_arrays().items())
        with open(p1, "rb") as f1, open(p2, "rb") as f2:
            out.append(Check("checkpoint round trip bitwise", same and f1.read() == f2.read()))
    a, b = resume_equivalence()
    out.append(Check("resume == straight training (final loss)", abs(a - b) <= 1e-6, f"{a!r} vs {b!r}"))
    return out


# --- data fixtures ---------------------------------------------------------------------

def suite_data() -> list[Check]:
    out = []
    pix = encode_pixmap(np.array([[[-1.0, 1.0], [0.0, 0.5]]]))
    out.append(Check("2x2 grey pixmap bytes", pix == b"P5\n2 2\n255\n" + bytes([0, 255, 128, 191])))
    rgb = np.zeros((3, 1, 2))
    rgb[0] = 1.0
    rgb[2, 0, 1] = -1.0
    out.append(Check("1x2 colour pixmap bytes",
                     encode_pixmap(rgb) == b"P6\n2 1\n255\n" + bytes([255, 128, 128, 255, 128, 0])))
    rec = np.zeros((2, CIFAR_RECORD), np.uint8)
    rec[0, 0], rec[1, 0] = 3, 9
    rec[0, 1:] = np.arange(3072) % 256
    rec[1, 1:] = 255
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "data_batch_1.bin")
        rec.tofile(p)
        ds = cifar10_load(p)
    expect0 = (np.arange(3072) % 256).reshape(3, 32, 32).astype(np.float32) / np.float32(127.5) - 1
    out.append(Check("two-record CIFAR fixture",
                     list(ds.labels) == [3, 9] and np.array_equal(ds.images[0], expect0)
                     and np.all(ds.images[1] == np.float32(255) / np.float32(127.5) - 1)))
    a, b = synth_two_blobs(100, 8, 8, seed=4), synth_two_blobs(100, 8, 8, seed=4)
    out.append(Check("two-blob set deterministic", a.images.tobytes() == b.images.tobytes()))
    big = synth_two_blobs(1000, 8, 8, seed=0)
    means = [big.images[big.labels == c].mean() for c in (0, 1)]
    out.append(Check("two-blob balance and brightness order",
                     int((big.labels == 0).sum()) == 500 and means[0] > means[1]))
    hdr = {"step": 3, "x": 0.1}
    ent = {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}
    h2, e2 = decode(encode(hdr, ent))
    out.append(Check("checkpoint codec round trip", h2["step"] == "3" and np.array_equal(e2["w"], ent["w"])))
    return out


# --- model probes ---------------------------------------------------------------------

def suite_model() -> list[Check]:
    out = []
    cfg = tiny_config(L=3, D=16, H=8, W=8)
    model = DiffusionRWKV(cfg, seed=1)
    model.randomize_(2, 0.3)
    rng = Rng(5, stream=0x70)
    x = rng.normal((1, 1, 8, 8))
    base, _ = model.predict(x, [300], [0])
    x2 = x.copy()
    x2[0, 0, 0:2, 0:2] += 1.0  # patch 0
    pert, _ = model.predict(x2, [300], [0])
    delta = np.abs(patchify(base - pert, cfg.p)[0]).max(axis=-1)
    out.append(Check("one-patch perturbation reaches every output patch", bool(np.all(delta > 0)),
                     f"min change {delta.min():.2e}"))
    feats = timestep_embed(np.arange(1001), 256)
    distinct = len({f.tobytes() for f in feats}) == 1001
    out.append(Check("timestep features distinct over 0..1000", distinct))

    class Zero:
        config = cfg

        def __call__(self, x_t, t, c):
            z = tn.Tensor(np.zeros_like(x_t, dtype=np.float32))
            return z, None

    s = linear_schedule()
    x0 = np.zeros((4096, 1, 4, 4), np.float32)
    _, stats = training_loss(Zero(), x0, None, Rng(0, 1), s)
    out.append(Check("zero predictor: MSE ~ 1", abs(stats["mse"] - 1) < 0.02, f"{stats['mse']:.4f}"))
    model.zero_grad()
    loss, _ = training_loss(model, rng.normal((4, 1, 8, 8)), np.array([0, 1, 0, 1]), Rng(1, 1), s)
    tn.backward(loss)
    dead = [n for n, p in model.named_parameters() if p.grad is None or not np.any(p.grad)]
    out.append(Check("every parameter receives gradient", not dead, f"dead: {dead[:4]}"))
    return out


def suite_training(steps: int = 150) -> list[Check]:
    """Reduced-scale training oracle (the full-scale run is a separate acceptance test)."""
    cfg = ModelConfig(L=5, D=64, E=4, p=2, H=8, W=8, C=1, num_classes=2)
    ds = synth_two_blobs(256, 8, 8, seed=0)
    r = train_loop(DiffusionRWKV(cfg, 0), ds, TrainConfig(steps=steps, batch_size=32, lr=1e-3, lr_late=3e-4))
    ra = running_average([h["loss"] for h in r.history])
    return [Check(f"tiny model loss falls >= 50% from step 50 within {steps} steps",
                  ra[-1] <= 0.5 * ra[49], f"{ra[49]:.4f} -> {ra[-1]:.4f}")]


SUITES: dict[str, Callable[[], list]] = {
    "kernel-oracle": suite_kernel,
    "gradients": suite_gradients,
    "flops": suite_flops,
    "complexity": suite_complexity,
    "schedule": suite_schedule,
    "sampler-oracle": suite_sampler,
    "init-identities": suite_identities,
    "data-fixtures": suite_data,
    "model-probes": suite_model,
    "training-smoke": suite_training,
}


def run_suite(name: str) -> SuiteResult:
    res = SuiteResult(name)
    t0 = time.perf_counter()
    try:
        res.checks = SUITES[name]()
    except Exception as e:  # a crashing suite is a failing suite
        res.error = f"{type(e).__name__}: {e}"
    res.seconds = time.perf_counter() - t0
    return res


def run_verify(suites=None, fault: Optional[str] = None, echo=print) -> list[SuiteResult]:
    wkv.inject_fault(fault)
    try:
        results = []
        for name in suites or SUITES:
            r = run_suite(name)
            results.append(r)
            echo(f"{'PASS' if r.ok else 'FAIL'} {name} ({r.seconds:.1f}s)")
            for c in r.checks:
                echo(f"    [{'ok' if c.ok else 'FAIL'}] {c.name}" + (f": {c.detail}" if c.detail else ""))
            if r.error:
                echo(f"    [FAIL] suite raised {r.error}")
        return results
    finally:
        wkv.inject_fault(None)
