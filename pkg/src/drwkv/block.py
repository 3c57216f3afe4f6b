"""One Bi-RWKV residual block: quad-directional shift, spatial mix, channel mix."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import tensor as tn
from .rng import Rng
from .tensor import Tensor
from .wkv import bi_wkv

LN_EPS = 1e-6


@dataclass
class TokenGrid:
    """Tokens in row-major patch order: token ``r * cols + c`` sits at grid cell (r, c)."""

    tokens: Tensor  # [J, D] or [B, J, D]
    rows: int
    cols: int

    def __post_init__(self):
        j = self.tokens.shape[-2]
        if self.rows * self.cols != j:
            raise ValueError(f"grid {self.rows}x{self.cols} does not hold {j} tokens")


@dataclass
class SpatialWeights:
    mu_q: Tensor
    mu_k: Tensor
    mu_v: Tensor
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor
    log_w: Tensor   # decay = exp(log_w) >= 0
    u: Tensor
    ln_g: Optional[Tensor] = None
    ln_b: Optional[Tensor] = None


@dataclass
class ChannelWeights:
    mu_r: Tensor
    mu_z: Tensor
    W_r: Tensor
    W_z: Tensor     # D x (E*D)
    W_v: Tensor     # (E*D) x D
    ln_g: Optional[Tensor] = None
    ln_b: Optional[Tensor] = None


@dataclass
class BlockWeights:
    spatial: SpatialWeights
    channel: ChannelWeights
    normalize_decay: bool = True


def named_tensors(obj, prefix: str = ""):
    """Yield ``(name, Tensor)`` for every tensor field of a weights dataclass, recursively."""
    for f in fields(obj):
        val = getattr(obj, f.name)
        if isinstance(val, Tensor):
            yield prefix + f.name, val
        elif hasattr(val, "__dataclass_fields__"):
            yield from named_tensors(val, prefix + f.name + ".")


def _uniform(rng: Rng, shape, bound: float) -> Tensor:
    return Tensor(rng.uniform(shape) * (2 * bound) - bound, requires_grad=True)


def init_block_weights(rng: Rng, D: int, E: int, layer_id: int = 0, depth: int = 1,
                       affine_norm: bool = True, zero_out: bool = True,
                       normalize_decay: bool = True) -> BlockWeights:
    """Fresh block weights.

    ``zero_out`` zero-initializes the two output projections so the block
    starts as the identity; callers whose residual gate already starts at
    zero pass False so the gate and the projection can both learn.
    """
    if D % 4:
        raise ValueError(f"hidden size {D} must be divisible by 4 for the quad shift")
    ratio = layer_id / max(depth - 1, 1)
    ramp = np.arange(D) / max(D - 1, 1)
    log_w = -5 + 8 * ramp ** (0.7 + 1.3 * ratio)
    half = lambda: Tensor(np.full(D, 0.5), requires_grad=True)
    b = 1 / np.sqrt(D)
    be = 1 / np.sqrt(E * D)

    def out_proj(shape, bound):
        if zero_out:
            return Tensor(np.zeros(shape), requires_grad=True)
        return _uniform(rng, shape, bound)

    norm = lambda: (Tensor(np.ones(D), requires_grad=True), Tensor(np.zeros(D), requires_grad=True))
    sg, sb = norm() if affine_norm else (None, None)
    cg, cb = norm() if affine_norm else (None, None)
    spatial = SpatialWeights(
        mu_q=half(), mu_k=half(), mu_v=half(),
        W_q=_uniform(rng, (D, D), b), W_k=_uniform(rng, (D, D), b), W_v=_uniform(rng, (D, D), b),
        W_o=out_proj((D, D), b),
        log_w=Tensor(log_w, requires_grad=True), u=Tensor(np.zeros(D), requires_grad=True),
        ln_g=sg, ln_b=sb,
    )
    channel = ChannelWeights(
        mu_r=half(), mu_z=half(),
        W_r=_uniform(rng, (D, D), b), W_z=_uniform(rng, (D, E * D), b),
        W_v=out_proj((E * D, D), be),
        ln_g=cg, ln_b=cb,
    )
    return BlockWeights(spatial, channel, normalize_decay)


# --- operators -----------------------------------------------------------------------

def _shift_forward(x4: np.ndarray) -> np.ndarray:
    g = x4.shape[-1] // 4
    out = np.zeros_like(x4)
    out[..., 1:, :, 0:g] = x4[..., :-1, :, 0:g]              # from above
    out[..., :-1, :, g:2 * g] = x4[..., 1:, :, g:2 * g]      # from below
    out[..., :, 1:, 2 * g:3 * g] = x4[..., :, :-1, 2 * g:3 * g]  # from the left
    out[..., :, :-1, 3 * g:] = x4[..., :, 1:, 3 * g:]        # from the right
    return out


def _shift_adjoint(g4: np.ndarray) -> np.ndarray:
    g = g4.shape[-1] // 4
    out = np.zeros_like(g4)
    out[..., :-1, :, 0:g] = g4[..., 1:, :, 0:g]
    out[..., 1:, :, g:2 * g] = g4[..., :-1, :, g:2 * g]
    out[..., :, :-1, 2 * g:3 * g] = g4[..., :, 1:, 2 * g:3 * g]
    out[..., :, 1:, 3 * g:] = g4[..., :, :-1, 3 * g:]
    return out


def quad_shift(grid: TokenGrid) -> Tensor:
    """Four channel groups take the neighbor above / below / left / right; zeros off-grid."""
    x = grid.tokens
    D = x.shape[-1]
    if D % 4:
        raise ValueError(f"quad shift needs D divisible by 4, got {D}")
    lead = x.shape[:-2]
    shape4 = lead + (grid.rows, grid.cols, D)
    out = _shift_forward(x.data.reshape(shape4)).reshape(x.shape)
    return tn.record_op(out, (x,), lambda g: (_shift_adjoint(g.reshape(shape4)).reshape(x.shape),),
                        "quad_shift")


def token_interp(x, x_shift, mu) -> Tensor:
    """mu * x + (1 - mu) * x_shift"""
    x, x_shift, mu = tn.as_tensor(x), tn.as_tensor(x_shift), tn.as_tensor(mu)
    xd, sd, md = x.data, x_shift.data, mu.data
    diff = xd - sd
    return tn.record_op(sd + md * diff, (x, x_shift, mu),
                        lambda g: (g * md, g * (1 - md), g * diff), "token_interp")


def _mu(m: Tensor) -> Tensor:
    return tn.clamp(m, 0.0, 1.0)


def _shifted(xn: Tensor, rows: int, cols: int, n_cond: int) -> Tensor:
    if not n_cond:
        return quad_shift(TokenGrid(xn, rows, cols))
    _, img = tn.split(xn, [n_cond, xn.shape[-2] - n_cond], axis=-2)
    s_img = quad_shift(TokenGrid(img, rows, cols))
    pad = np.zeros(xn.shape[:-2] + (n_cond, xn.shape[-1]), dtype=xn.data.dtype)
    return tn.concat([pad, s_img], axis=-2)


def spatial_core(xn: Tensor, sw: SpatialWeights, rows: int, cols: int,
                 n_cond: int = 0, normalize_decay: bool = True) -> Tensor:
    """Spatial mix on already-normalized tokens.

    The first ``n_cond`` tokens are conditioning tokens: they have no grid
    neighbors (shift value zero), contribute keys and values to the WKV, and
    their own output rows are zeroed so the residual stream passes them
    through unchanged.
    """
    s = _shifted(xn, rows, cols, n_cond)
    q = tn.matmul(token_interp(xn, s, _mu(sw.mu_q)), sw.W_q)
    k = tn.matmul(token_interp(xn, s, _mu(sw.mu_k)), sw.W_k)
    v = tn.matmul(token_interp(xn, s, _mu(sw.mu_v)), sw.W_v)
    h = bi_wkv(k, v, tn.exp(sw.log_w), sw.u, normalize_decay)
    out = tn.matmul(tn.mul(tn.sigmoid(q), h), sw.W_o)
    if n_cond:
        mask = np.ones((out.shape[-2], 1), dtype=out.data.dtype)
        mask[:n_cond] = 0
        out = tn.mul(out, mask)
    return out


def channel_core(on: Tensor, cw: ChannelWeights, rows: int, cols: int, n_cond: int = 0) -> Tensor:
    """Channel mix on already-normalized tokens: sigmoid(r) * (relu(z)^2 W_v)."""
    s = _shifted(on, rows, cols, n_cond)
    r = tn.matmul(token_interp(on, s, _mu(cw.mu_r)), cw.W_r)
    z = tn.matmul(token_interp(on, s, _mu(cw.mu_z)), cw.W_z)
    return tn.mul(tn.sigmoid(r), tn.matmul(tn.relu_sq(z), cw.W_v))


def spatial_mix(grid: TokenGrid, wts: BlockWeights) -> Tensor:
    sw = wts.spatial
    xn = tn.layer_norm(grid.tokens, sw.ln_g, sw.ln_b, LN_EPS)
    return spatial_core(xn, sw, grid.rows, grid.cols, 0, wts.normalize_decay)


def channel_mix(grid: TokenGrid, wts: BlockWeights) -> Tensor:
    cw = wts.channel
    on = tn.layer_norm(grid.tokens, cw.ln_g, cw.ln_b, LN_EPS)
    return channel_core(on, cw, grid.rows, grid.cols, 0)


@dataclass
class Modulation:
    """Per-sample adaptive-norm parameters, each broadcastable to ``[B, J, D]``.

    ``gamma`` is the multiplicative scale itself (already offset by one);
    ``alpha`` of None means an ungated residual.
    """

    gamma1: Tensor
    beta1: Tensor
    gamma2: Tensor
    beta2: Tensor
    alpha1: Optional[Tensor] = None
    alpha2: Optional[Tensor] = None


def block_forward(x: Tensor, wts: BlockWeights, rows: int, cols: int,
                  modulation: Optional[Modulation] = None, n_cond: int = 0,
                  adaptive: Optional[bool] = None) -> Tensor:
    """x + a1 * spatial(mod1(x)); then + a2 * channel(mod2(x)).

    ``adaptive`` states whether the caller's conditioning mode expects
    modulation; a mismatch is an error.
    """
    if adaptive is not None and adaptive != (modulation is not None):
        raise ValueError("modulation must be given exactly when the conditioning mode is adaLN")
    sw, cw = wts.spatial, wts.channel
    if modulation is None:
        xn = tn.layer_norm(x, sw.ln_g, sw.ln_b, LN_EPS)
        x = tn.add(x, spatial_core(xn, sw, rows, cols, n_cond, wts.normalize_decay))
        on = tn.layer_norm(x, cw.ln_g, cw.ln_b, LN_EPS)
        return tn.add(x, channel_core(on, cw, rows, cols, n_cond))
    m = modulation
    xn = tn.add(tn.mul(tn.layer_norm(x, sw.ln_g, sw.ln_b, LN_EPS), m.gamma1), m.beta1)
    y = spatial_core(xn, sw, rows, cols, n_cond, wts.normalize_decay)
    x = tn.add(x, y if m.alpha1 is None else tn.mul(m.alpha1, y))
    on = tn.add(tn.mul(tn.layer_norm(x, cw.ln_g, cw.ln_b, LN_EPS), m.gamma2), m.beta2)
    y = channel_core(on, cw, rows, cols, n_cond)
    return tn.add(x, y if m.alpha2 is None else tn.mul(m.alpha2, y))
