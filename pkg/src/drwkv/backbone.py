"""The noise-prediction network: tokenization, Bi-RWKV stack with long skips, decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import tensor as tn
from .block import (LN_EPS, BlockWeights, Modulation, block_forward,
                    init_block_weights, named_tensors)
from .rng import Rng
from .tensor import Tensor
from .wkv import wkv_flops

COND_MODES = ("in_context", "adaln", "adaln_zero")
SKIP_MODES = ("concat", "add", "none")
FREQ_DIM = 256

# name -> (L, D, E, reference Gflops)
PRESETS = {
    "S": (25, 384, 4, 1.72),
    "B": (25, 768, 4, 3.32),
    "M": (49, 768, 4, 5.90),
    "L": (49, 1024, 4, 19.65),
    "H": (49, 1536, 4, 34.95),
}


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    L: int = 25
    D: int = 384
    E: int = 4
    p: int = 2
    H: int = 32
    W: int = 32
    C: int = 3
    cond_mode: str = "adaln_zero"
    num_classes: int = 0
    learn_sigma: bool = True
    T: int = 1000
    skip: str = "concat"
    normalize_decay: bool = True

    def __post_init__(self):
        if self.p < 1 or self.H % self.p or self.W % self.p:
            raise ConfigError(f"image {self.H}x{self.W} is not divisible by patch size {self.p}")
        if self.L < 1 or self.L % 2 == 0:
            raise ConfigError(f"depth L={self.L} must be odd (shallow + central + deep)")
        if self.D < 4 or self.D % 4:
            raise ConfigError(f"hidden size D={self.D} must be a positive multiple of 4")
        if self.E < 1 or self.C < 1 or self.T < 1 or self.num_classes < 0:
            raise ConfigError("E, C, T must be positive and num_classes non-negative")
        if self.cond_mode not in COND_MODES:
            raise ConfigError(f"cond_mode must be one of {COND_MODES}")
        if self.skip not in SKIP_MODES:
            raise ConfigError(f"skip must be one of {SKIP_MODES}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        try:
            L, D, E, _ = PRESETS[name]
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        return cls(**{"L": L, "D": D, "E": E, **overrides})

    @property
    def rows(self) -> int:
        return self.H // self.p

    @property
    def cols(self) -> int:
        return self.W // self.p

    @property
    def J(self) -> int:
        return self.rows * self.cols

    @property
    def patch_dim(self) -> int:
        return self.p * self.p * self.C

    @property
    def out_channels(self) -> int:
        return self.C * (2 if self.learn_sigma else 1)

    @property
    def n_cond(self) -> int:
        """Conditioning tokens prepended in in-context mode (timestep, plus class if any)."""
        if self.cond_mode != "in_context":
            return 0
        return 2 if self.num_classes else 1

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# --- tokenization ----------------------------------------------------------------

def patchify(image: np.ndarray, p: int) -> np.ndarray:
    """``[..., C, H, W]`` -> ``[..., J, p*p*C]``; patches row-major, within-patch order (row, col, channel)."""
    image = np.asarray(image)
    *lead, C, H, W = image.shape
    if H % p or W % p:
        raise ConfigError(f"image {H}x{W} is not divisible by patch size {p}")
    gh, gw = H // p, W // p
    x = image.reshape(*lead, C, gh, p, gw, p)
    n = len(lead)
    x = x.transpose(*range(n), n + 1, n + 3, n + 2, n + 4, n)
    return np.ascontiguousarray(x.reshape(*lead, gh * gw, p * p * C))


def unpatchify(tokens: np.ndarray, p: int, C: int, H: int, W: int) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    tokens = np.asarray(tokens)
    *lead, J, L = tokens.shape
    gh, gw = H // p, W // p
    if J != gh * gw or L != p * p * C:
        raise ValueError(f"tokens {tokens.shape[-2:]} do not match a {C}x{H}x{W} image with patch {p}")
    n = len(lead)
    x = tokens.reshape(*lead, gh, gw, p, p, C)
    x = x.transpose(*range(n), n + 4, n, n + 2, n + 1, n + 3)
    return np.ascontiguousarray(x.reshape(*lead, C, H, W))


def _unpatchify_tensor(tokens: Tensor, p: int, C: int, H: int, W: int) -> Tensor:
    B = tokens.shape[0]
    gh, gw = H // p, W // p
    x = tn.reshape(tokens, (B, gh, gw, p, p, C))
    x = tn.transpose(x, (0, 5, 1, 3, 2, 4))
    return tn.reshape(x, (B, C, H, W))


def timestep_embed(t, dim: int = FREQ_DIM, T: Optional[int] = None) -> np.ndarray:
    """Sinusoidal features ``[sin(t w_i) ..., cos(t w_i) ...]`` with ``w_i = 10000^(-i / (dim/2))``."""
    if dim % 2:
        raise ValueError("timestep feature dim must be even")
    t = np.asarray(t, dtype=np.float64)
    if T is not None and (np.any(t < 0) or np.any(t > T)):
        raise ValueError(f"timestep outside [0, {T}]")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1).astype(np.float32)


# --- weights ---------------------------------------------------------------------------

@dataclass
class Linear:
    W: Tensor
    b: Tensor

    def __call__(self, x) -> Tensor:
        return tn.add(tn.matmul(x, self.W), self.b)


def _linear(rng: Rng, n_in: int, n_out: int, zero: bool = False) -> Linear:
    if zero:
        W = np.zeros((n_in, n_out))
    else:
        bound = 1 / math.sqrt(n_in)
        W = rng.uniform((n_in, n_out)) * 2 * bound - bound
    return Linear(Tensor(W, requires_grad=True), Tensor(np.zeros(n_out), requires_grad=True))


@dataclass
class BackboneWeights:
    patch_embed: Tensor
    pos_embed: Tensor
    t_mlp1: Linear
    t_mlp2: Linear
    final_g: Tensor
    final_b: Tensor
    decoder: Linear
    blocks: list = field(default_factory=list)
    skip_proj: list = field(default_factory=list)
    modulation: list = field(default_factory=list)
    label_table: Optional[Tensor] = None


class DiffusionRWKV:
    """eps_theta(x_t, t, c) over ``[B, C, H, W]`` images."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = cfg = config
        rng = Rng(seed, stream=0xB0)
        D = cfg.D
        adaptive = cfg.cond_mode != "in_context"
        bound = 1 / math.sqrt(cfg.patch_dim)
        w = BackboneWeights(
            patch_embed=Tensor(rng.uniform((cfg.patch_dim, D)) * 2 * bound - bound, requires_grad=True),
            pos_embed=Tensor(0.02 * rng.normal((cfg.J, D)), requires_grad=True),
            t_mlp1=_linear(rng, FREQ_DIM, D),
            t_mlp2=_linear(rng, D, D),
            final_g=Tensor(np.ones(D), requires_grad=True),
            final_b=Tensor(np.zeros(D), requires_grad=True),
            decoder=_linear(rng, D, cfg.patch_dim * (2 if cfg.learn_sigma else 1), zero=True),
        )
        if cfg.num_classes:
            w.label_table = Tensor(0.02 * rng.normal((cfg.num_classes + 1, D)), requires_grad=True)
        for i in range(cfg.L):
            # adaLN-Zero gates start at zero, so its output projections must not also be zero
            w.blocks.append(init_block_weights(
                rng, D, cfg.E, layer_id=i, depth=cfg.L, affine_norm=not adaptive,
                zero_out=cfg.cond_mode != "adaln_zero", normalize_decay=cfg.normalize_decay))
        if cfg.skip == "concat":
            for _ in range(cfg.L // 2):
                W = np.zeros((2 * D, D))
                W[:D] = np.eye(D)  # select the main branch
                w.skip_proj.append(Linear(Tensor(W, requires_grad=True), Tensor(np.zeros(D), requires_grad=True)))
        if adaptive:
            width = 6 * D if cfg.cond_mode == "adaln_zero" else 4 * D
            w.modulation = [_linear(rng, D, width, zero=True) for _ in range(cfg.L)]
        self.weights = w

    # -- parameters -----------------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        w = self.weights
        out = [("patch_embed", w.patch_embed), ("pos_embed", w.pos_embed)]
        out += [(f"t_mlp1.{n}", t) for n, t in named_tensors(w.t_mlp1)]
        out += [(f"t_mlp2.{n}", t) for n, t in named_tensors(w.t_mlp2)]
        if w.label_table is not None:
            out.append(("label_table", w.label_table))
        for i, blk in enumerate(w.blocks):
            out += [(f"blocks.{i}.{n}", t) for n, t in named_tensors(blk)]
        for i, lin in enumerate(w.skip_proj):
            out += [(f"skip_proj.{i}.{n}", t) for n, t in named_tensors(lin)]
        for i, lin in enumerate(w.modulation):
            out += [(f"modulation.{i}.{n}", t) for n, t in named_tensors(lin)]
        out += [("final_g", w.final_g), ("final_b", w.final_b)]
        out += [(f"decoder.{n}", t) for n, t in named_tensors(w.decoder)]
        return out

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return int(sum(t.size for _, t in self.named_parameters()))

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        for name, arr in arrays.items():
            if params[name].shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: {params[name].shape} vs {arr.shape}")
            params[name].data = np.array(arr, dtype=np.float32)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.named_parameters()}

    def randomize_(self, seed: int, scale: float = 0.05) -> None:
        """Add noise to every parameter (trained-like weights for probes and gradient checks)."""
        rng = Rng(seed, stream=0x9E)
        for _, t in self.named_parameters():
            t.data = (t.data + scale * rng.normal(t.shape)).astype(t.data.dtype)

    # -- conditioning ----------------------------------------------------------------

    def _labels(self, c, batch: int) -> Optional[np.ndarray]:
        cfg = self.config
        if not cfg.num_classes:
            if c is not None:
                raise ValueError("unconditional model given class labels")
            return None
        if c is None:
            return np.full(batch, cfg.num_classes, dtype=np.int64)
        c = np.asarray(c, dtype=np.int64).reshape(-1)
        if c.shape[0] != batch:
            raise ValueError("one class label per batch item expected")
        if np.any(c < 0) or np.any(c > cfg.num_classes):
            raise ValueError(f"class id outside [0, {cfg.num_classes}] (the last id is the null label)")
        return c

    def embed_timestep(self, t) -> Tensor:
        t = np.asarray(t).reshape(-1)
        feats = timestep_embed(t, FREQ_DIM, self.config.T)
        w = self.weights
        return w.t_mlp2(tn.silu(w.t_mlp1(feats)))

    def condition_vector(self, t, c=None) -> Tensor:
        """Timestep embedding plus the label row (``None`` picks the null row)."""
        t = np.asarray(t).reshape(-1)
        temb = self.embed_timestep(t)
        labels = self._labels(c, t.shape[0])
        if labels is None:
            return temb
        return tn.add(temb, tn.take_rows(self.weights.label_table, labels))

    # -- forward -------------------------------------------------------------------------

    def forward(self, x_t, t, c=None):
        """Returns ``(eps_hat, sigma_raw)``, each ``[B, C, H, W]``; ``sigma_raw`` is None without a variance head."""
        cfg, w = self.config, self.weights
        x = np.asarray(x_t.data if isinstance(x_t, Tensor) else x_t)
        if x.ndim != 4 or x.shape[1:] != (cfg.C, cfg.H, cfg.W):
            raise ValueError(f"expected [B, {cfg.C}, {cfg.H}, {cfg.W}] input, got {x.shape}")
        B = x.shape[0]
        t = np.asarray(t).reshape(-1)
        if t.shape[0] != B:
            raise ValueError("one timestep per batch item expected")
        D = cfg.D
        h = tn.add(tn.matmul(patchify(x, cfg.p).astype(np.float32), w.patch_embed), w.pos_embed)
        n_cond = cfg.n_cond
        mods = [None] * cfg.L
        if n_cond:
            temb = self.embed_timestep(t)
            cond = [tn.reshape(temb, (B, 1, D))]
            labels = self._labels(c, B)
            if labels is not None:
                cond.append(tn.reshape(tn.take_rows(w.label_table, labels), (B, 1, D)))
            h = tn.concat(cond + [h], axis=1)
        else:
            sc = tn.silu(self.condition_vector(t, c))
            for i, lin in enumerate(w.modulation):
                m = tn.reshape(lin(sc), (B, 1, -1))
                if cfg.cond_mode == "adaln_zero":
                    g1, b1, a1, g2, b2, a2 = tn.split(m, [D] * 6)
                else:
                    (g1, b1, g2, b2), a1, a2 = tn.split(m, [D] * 4), None, None
                mods[i] = Modulation(tn.add(g1, 1.0), b1, tn.add(g2, 1.0), b2, a1, a2)
        half = cfg.L // 2
        stack = []
        for i, blk in enumerate(w.blocks):
            if i > half:
                skip = stack.pop()
                if cfg.skip == "concat":
                    h = w.skip_proj[i - half - 1](tn.concat([h, skip], axis=-1))
                elif cfg.skip == "add":
                    h = tn.add(h, skip)
            h = block_forward(h, blk, cfg.rows, cfg.cols, mods[i], n_cond)
            if i < half:
                stack.append(h)
        if n_cond:
            _, h = tn.split(h, [n_cond, cfg.J], axis=1)
        h = tn.layer_norm(h, w.final_g, w.final_b, LN_EPS)
        out = w.decoder(h)
        if not cfg.learn_sigma:
            return _unpatchify_tensor(out, cfg.p, cfg.C, cfg.H, cfg.W), None
        eps_tok, var_tok = tn.split(out, [cfg.patch_dim, cfg.patch_dim])
        return (_unpatchify_tensor(eps_tok, cfg.p, cfg.C, cfg.H, cfg.W),
                _unpatchify_tensor(var_tok, cfg.p, cfg.C, cfg.H, cfg.W))

    __call__ = forward

    def predict(self, x_t, t, c=None):
        """Unrecorded forward returning numpy arrays (sampler protocol)."""
        with tn.no_grad():
            eps, raw = self.forward(x_t, t, c)
        return eps.data, (None if raw is None else raw.data)


# --- operation counts -------------------------------------------------------------

def model_flops(config: ModelConfig) -> dict:
    """Forward operation counts for one image (2mnk per matmul, 13JD per Bi-WKV)."""
    cfg = config
    J = cfg.J + cfg.n_cond
    D, ED = cfg.D, cfg.E * cfg.D
    mm = lambda m, k, n: 2 * m * k * n
    parts = {
        "patch_embed": mm(cfg.J, cfg.patch_dim, D),
        "spatial_proj": cfg.L * 4 * mm(J, D, D),
        "wkv": cfg.L * wkv_flops(J, D),
        "channel_proj": cfg.L * (mm(J, D, D) + mm(J, D, ED) + mm(J, ED, D)),
        "skip_proj": (cfg.L // 2) * mm(J, 2 * D, D) if cfg.skip == "concat" else 0,
        "decoder": mm(cfg.J, D, cfg.patch_dim * (2 if cfg.learn_sigma else 1)),
        "conditioning": mm(1, FREQ_DIM, D) + mm(1, D, D),
    }
    if cfg.cond_mode != "in_context":
        parts["conditioning"] += cfg.L * mm(1, D, (6 if cfg.cond_mode == "adaln_zero" else 4) * D)
    parts["total"] = sum(parts.values())
    return parts


def with_overrides(config: ModelConfig, **kw) -> ModelConfig:
    return replace(config, **kw)
