"""Bidirectional WKV attention: streaming scans, quadratic oracle, adjoints.

For a lane of keys ``k`` and values ``v`` (J tokens) the bidirectional output is

    h_t = sum_i exp(e_ti) v_i / sum_i exp(e_ti)
    e_ti = k_i - (|t - i| - 1) * lam      (i != t)
    e_tt = u + k_t

with per-channel decay ``lam = w`` (or ``w / J`` when the decay is
normalized by sequence length) and current-token bonus ``u``.  The scan
evaluates this with one left-to-right and one right-to-left pass, each
carrying ``(a, b, p)``: numerator and denominator mantissas and the running
maximum exponent ``p``, so every exponential evaluated is ``<= 1``.  Scan
arithmetic runs in float64 lanes; inputs and outputs keep their dtype.

With ``w = 0`` and ``u = 0`` the causal form is the plain exponentially
weighted running ratio of RWKV.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn

NEG_INF = -1e38  # stands in for -inf as the empty-state exponent
ORACLE_MAX_J = 4096

# Fault injection for the verification harness; see ``inject_fault``.
_FAULTS: set[str] = set()


def inject_fault(name: str | None) -> None:
    """Enable a deliberate kernel bug (``"wkv-sign"`` flips the decay sign in the scan)."""
    _FAULTS.clear()
    if name:
        if name != "wkv-sign":
            raise ValueError(f"unknown fault {name!r}")
        _FAULTS.add(name)


@dataclass
class WkvParams:
    """Per-channel decay ``w`` (>= 0) and bonus ``u``."""

    w: np.ndarray
    u: np.ndarray
    normalize_decay: bool = True

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        self.u = np.asarray(self.u, dtype=np.float64).reshape(-1)
        if self.w.shape != self.u.shape:
            raise ValueError("w and u must have one entry per channel")
        if np.any(self.w < 0) or not np.all(np.isfinite(self.w)):
            raise ValueError("decay w must be finite and non-negative")

    @classmethod
    def from_log_decay(cls, log_w, u, normalize_decay: bool = True) -> "WkvParams":
        return cls(np.exp(np.asarray(log_w, dtype=np.float64)), u, normalize_decay)

    @classmethod
    def zeros(cls, d: int, normalize_decay: bool = True) -> "WkvParams":
        return cls(np.zeros(d), np.zeros(d), normalize_decay)

    def effective_decay(self, j: int) -> np.ndarray:
        return self.w / j if self.normalize_decay else self.w.copy()


@dataclass
class ScanState:
    """Streaming accumulator: ``exp(p) * a`` and ``exp(p) * b`` are the true sums."""

    a: np.ndarray
    b: np.ndarray
    p: np.ndarray

    @classmethod
    def empty(cls, d: int) -> "ScanState":
        return cls(np.zeros(d), np.zeros(d), np.full(d, NEG_INF))

    def absorb(self, k_t, v_t, decay=0.0) -> "ScanState":
        """Decay what has been absorbed by one step, then add token ``(k_t, v_t)``."""
        k_t = np.asarray(k_t, dtype=np.float64)
        v_t = np.asarray(v_t, dtype=np.float64)
        pd = self.p - decay
        p = np.maximum(pd, k_t)
        e1 = np.exp(pd - p)
        e2 = np.exp(k_t - p)
        return ScanState(e1 * self.a + e2 * v_t, e1 * self.b + e2, p)

    def read(self) -> np.ndarray:
        return self.a / self.b


# --- kernels ---------------------------------------------------------------------
# Inputs are float64 ``[J, N, D]`` (token-major, N batch lanes) so each step is
# one vectorized update over all independent (batch, channel) lanes.

def _sweep(k, v, lam, reverse=False, distance=False):
    """States of one direction just before absorbing each token.

    Returns ``(p, a, b)`` stacked over tokens, plus distance-weighted
    mantissas ``(a2, b2)`` (sums of ``(dist - 1) * weight``) when requested.
    """
    J = k.shape[0]
    shape = k.shape[1:]
    P = np.empty_like(k)
    A = np.empty_like(k)
    Bs = np.empty_like(k)
    if distance:
        A2 = np.empty_like(k)
        B2 = np.empty_like(k)
        a2 = np.zeros(shape)
        s2 = np.zeros(shape)
    p = np.full(shape, NEG_INF)
    a = np.zeros(shape)
    s = np.zeros(shape)
    order = range(J - 1, -1, -1) if reverse else range(J)
    for t in order:
        P[t] = p
        A[t] = a
        Bs[t] = s
        kt = k[t]
        pd = p - lam
        p = np.maximum(pd, kt)
        e1 = np.exp(pd - p)
        e2 = np.exp(kt - p)
        if distance:
            A2[t] = a2
            B2[t] = s2
            a2 = e1 * (a2 + a)
            s2 = e1 * (s2 + s)
        a = e1 * a + e2 * v[t]
        s = e1 * s + e2
    if distance:
        return P, A, Bs, A2, B2
    return P, A, Bs


def _combine(k, v, u, pf, af, bf, pb=None, ab=None, bb=None):
    """Output ``h`` and per-row log-normalizer from the directional states plus the bonus term."""
    ek = u + k
    q = np.maximum(pf, ek) if pb is None else np.maximum(np.maximum(pf, pb), ek)
    w1 = np.exp(pf - q)
    w3 = np.exp(ek - q)
    num = w1 * af + w3 * v
    den = w1 * bf + w3
    if pb is not None:
        w2 = np.exp(pb - q)
        num += w2 * ab
        den += w2 * bb
    return num / den, q + np.log(den)


def _column_sweep(k, lam, ell, y1, y2, reverse):
    """``sum_t y_t * pi_ti`` over rows t on one side of each column i, for two row signals."""
    J = k.shape[0]
    shape = k.shape[1:]
    out1 = np.empty_like(k)
    out2 = np.empty_like(k)
    sc = np.full(shape, NEG_INF)
    r1 = np.zeros(shape)
    r2 = np.zeros(shape)
    order = range(J - 1, -1, -1) if reverse else range(J)
    for i in order:
        c = np.exp(k[i] + sc)
        out1[i] = c * r1
        out2[i] = c * r2
        ns = np.maximum(sc - lam, -ell[i])
        e1 = np.exp(sc - lam - ns)
        e2 = np.exp(-ell[i] - ns)
        r1 = e1 * r1 + e2 * y1[i]
        r2 = e1 * r2 + e2 * y2[i]
        sc = ns
    return out1, out2


def _bi_backward(k, v, lam, u, g):
    pf, af, bf, af2, bf2 = _sweep(k, v, lam, distance=True)
    pb, ab, bb, ab2, bb2 = _sweep(k, v, lam, reverse=True, distance=True)
    h, ell = _combine(k, v, u, pf, af, bf, pb, ab, bb)
    pii = np.exp(u + k - ell)
    du = g * pii * (v - h)
    dlam = -g * (np.exp(pf - ell) * (af2 - h * bf2) + np.exp(pb - ell) * (ab2 - h * bb2))
    gh = g * h
    dv = g * pii
    xs = gh * pii
    # rows t > i reach column i through the forward scan, rows t < i through the backward one
    c1, c2 = _column_sweep(k, lam, ell, g, gh, reverse=True)
    dv += c1
    xs += c2
    c1, c2 = _column_sweep(k, lam, ell, g, gh, reverse=False)
    dv += c1
    xs += c2
    dk = v * dv - xs
    red = tuple(range(k.ndim - 1))
    return dk, dv, dlam.sum(axis=red), du.sum(axis=red)


# --- array-level API ---------------------------------------------------------------

def _prepare(k, v, params: WkvParams):
    k = np.asarray(k)
    v = np.asarray(v)
    if k.shape != v.shape:
        raise ValueError(f"k and v shapes differ: {k.shape} vs {v.shape}")
    if k.ndim not in (2, 3):
        raise ValueError("expected [J, D] or [B, J, D] inputs")
    squeeze = k.ndim == 2
    # token-major [J, B, D] float64 working copies
    k3 = np.ascontiguousarray(np.swapaxes(k.reshape((1,) * squeeze + k.shape), 0, 1), dtype=np.float64)
    v3 = np.ascontiguousarray(np.swapaxes(v.reshape((1,) * squeeze + v.shape), 0, 1), dtype=np.float64)
    J, D = k3.shape[0], k3.shape[2]
    if J == 0:
        raise ValueError("WKV needs at least one token")
    if params.w.shape[0] != D:
        raise ValueError(f"params have {params.w.shape[0]} channels, inputs have {D}")
    lam = params.effective_decay(J)
    if "wkv-sign" in _FAULTS:
        lam = -lam
    return k3, v3, lam, params.u, squeeze


def _out_dtype(x):
    dt = np.asarray(x).dtype
    return dt if np.issubdtype(dt, np.floating) else np.float64


def _finish(h3, like, squeeze):
    h = np.swapaxes(h3, 0, 1).astype(_out_dtype(like))
    return h[0] if squeeze else h


def wkv_causal(k, v, params: WkvParams) -> np.ndarray:
    """Causal WKV over ``[J, D]`` or ``[B, J, D]`` in one left-to-right pass."""
    k3, v3, lam, u, squeeze = _prepare(k, v, params)
    pf, af, bf = _sweep(k3, v3, lam)
    h, _ = _combine(k3, v3, u, pf, af, bf)
    return _finish(h, k, squeeze)


def wkv_bidirectional(k, v, params: WkvParams) -> np.ndarray:
    """Bidirectional WKV: forward scan (i < t) + backward scan (i > t) + bonus (i = t)."""
    k3, v3, lam, u, squeeze = _prepare(k, v, params)
    pf, af, bf = _sweep(k3, v3, lam)
    pb, ab, bb = _sweep(k3, v3, lam, reverse=True)
    h, _ = _combine(k3, v3, u, pf, af, bf, pb, ab, bb)
    return _finish(h, k, squeeze)


def wkv_backward(k, v, params: WkvParams, grad_h):
    """Adjoints ``(grad_k, grad_v, grad_w, grad_u)`` of the bidirectional WKV.

    Costs O(J*D): the forward sweeps are recomputed, then two column sweeps
    accumulate each token's contribution to every output.
    """
    if k is None or v is None:
        raise ValueError("wkv_backward needs the forward inputs k and v")
    k3, v3, lam, u, squeeze = _prepare(k, v, params)
    g = np.asarray(grad_h, dtype=np.float64)
    g3 = np.ascontiguousarray(np.swapaxes(g.reshape((1,) * squeeze + g.shape), 0, 1))
    if g3.shape != k3.shape:
        raise ValueError("grad_h must match the output shape")
    dk, dv, dlam, du = _bi_backward(k3, v3, lam, u, g3)
    J = k3.shape[0]
    dw = dlam / J if params.normalize_decay else dlam
    if "wkv-sign" in _FAULTS:
        dw = -dw
    dt = _out_dtype(k)
    return _finish(dk, k, squeeze), _finish(dv, k, squeeze), dw.astype(dt), du.astype(dt)


def wkv_oracle(k, v, params: WkvParams, causal: bool = False) -> np.ndarray:
    """Direct O(J^2 D) evaluation of the closed form, shifted per output row by its max."""
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if k.shape != v.shape or k.ndim not in (2, 3):
        raise ValueError("expected matching [J, D] or [B, J, D] inputs")
    squeeze = k.ndim == 2
    if squeeze:
        k, v = k[None], v[None]
    B, J, D = k.shape
    if J == 0:
        raise ValueError("WKV needs at least one token")
    if J > ORACLE_MAX_J:
        raise ValueError(f"oracle limited to J <= {ORACLE_MAX_J}")
    lam = params.w / J if params.normalize_decay else params.w
    idx = np.arange(J)
    out = np.empty((B, J, D))
    for b in range(B):
        for t in range(J):
            dist = (np.abs(t - idx) - 1).astype(np.float64)
            e = k[b] - dist[:, None] * lam[None, :]
            e[t] = params.u + k[b, t]
            if causal:
                e[t + 1:] = -np.inf
            m = e.max(axis=0)
            wts = np.exp(e - m)
            out[b, t] = (wts * v[b]).sum(axis=0) / wts.sum(axis=0)
    return out[0] if squeeze else out


def wkv_flops(J: int, D: int) -> int:
    """Operation count of one bidirectional WKV call: 13 * J * D."""
    if J < 1 or D < 1:
        raise ValueError("J and D must be positive")
    return 13 * J * D


# --- differentiable op ---------------------------------------------------------------

def bi_wkv(k: tn.Tensor, v: tn.Tensor, w: tn.Tensor, u: tn.Tensor, normalize_decay: bool = True) -> tn.Tensor:
    """Recorded bidirectional WKV on ``[B, J, D]`` tensors; ``w`` is the (non-negative) decay."""
    params = WkvParams(w.data, u.data, normalize_decay)
    kd, vd = k.data, v.data
    out = wkv_bidirectional(kd, vd, params)

    def adjoint(g):
        dk, dv, dw, du = wkv_backward(kd, vd, params, g)
        return dk, dv, dw, du

    return tn.record_op(out, (k, v, w, u), adjoint, "bi_wkv")
