"""Reference selective state-space (Mamba v1) block in float64 numpy.

The scan used by the block is the exact sequential recurrence compiled with
numba, with a hand-written reverse-time adjoint for the backward pass.
:func:`selective_scan_chunked` is a blocked alternative: inside a chunk of
``K`` steps the recurrence ``h_t = a_t h_{t-1} + b_t`` is unrolled into a
masked ``K x K`` transfer matrix built from cumulative log-decays, and chunks
are chained.  :func:`selective_scan_ref` is the plain Python loop.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .numerics import (
    ContractError,
    DTYPE,
    Params,
    Tensor,
    as_tensor,
    exp,
    flip_rows,
    layernorm,
    linear,
    make_node,
    silu,
    slice_cols,
    softplus,
)

SCAN_CHUNK = 16


@dataclass(frozen=True)
class SsmConfig:
    expand: int = 2
    state: int = 16
    d_conv: int = 4
    bidirectional: bool = False

    def inner(self, channels: int) -> int:
        return self.expand * channels

    @staticmethod
    def dt_rank(channels: int) -> int:
        return math.ceil(channels / 16)


# ------------------------------------------------------------------- the scan

def selective_scan_ref(u, delta, A, B, C, D):
    """Sequential recurrence, one time step at a time (numpy in, numpy out)."""
    u, delta, A, B, C, D = (np.asarray(v, dtype=DTYPE) for v in (u, delta, A, B, C, D))
    L, d_inner = u.shape
    h = np.zeros((d_inner, A.shape[1]))
    y = np.empty((L, d_inner))
    for t in range(L):
        h = np.exp(delta[t][:, None] * A) * h + (delta[t] * u[t])[:, None] * B[t][None, :]
        y[t] = h @ C[t] + D * u[t]
    return y


def linear_recurrence(log_a: np.ndarray, b: np.ndarray, chunk: int = SCAN_CHUNK) -> np.ndarray:
    """Solve ``h_t = exp(log_a_t) * h_{t-1} + b_t`` with ``h_{-1} = 0``.

    ``log_a`` and ``b`` share shape ``(L, ...)``; every trailing entry is an
    independent channel.
    """
    L = b.shape[0]
    tail = b.shape[1:]
    la = log_a.reshape(L, -1)
    bb = b.reshape(L, -1)
    h = np.empty_like(bb)
    carry = np.zeros(bb.shape[1])
    tri = None
    for s in range(0, L, chunk):
        e = min(s + chunk, L)
        k = e - s
        S = np.cumsum(la[s:e], axis=0)
        if tri is None or tri.shape[0] != k:
            tri = np.tril(np.ones((k, k), dtype=bool))
        diff = S[:, None, :] - S[None, :, :]
        diff = np.where(tri[:, :, None], diff, -np.inf)
        hk = np.einsum("tjm,jm->tm", np.exp(diff), bb[s:e]) + np.exp(S) * carry
        h[s:e] = hk
        carry = hk[-1]
    return h.reshape((L,) + tail)


@njit(cache=True)
def _scan_fwd_kernel(u, delta, B, C, D, decay):
    L, d_inner = u.shape
    n_state = B.shape[1]
    h = np.empty((L, d_inner, n_state))
    y = np.empty((L, d_inner))
    for t in range(L):
        for d in range(d_inner):
            du = delta[t, d] * u[t, d]
            acc = D[d] * u[t, d]
            for n in range(n_state):
                prev = h[t - 1, d, n] if t > 0 else 0.0
                hv = decay[t, d, n] * prev + du * B[t, n]
                h[t, d, n] = hv
                acc += C[t, n] * hv
            y[t, d] = acc
    return y, h


@njit(cache=True)
def _scan_bwd_kernel(gy, u, delta, A, B, C, D, h, decay):
    L, d_inner = u.shape
    n_state = A.shape[1]
    g_u = np.empty((L, d_inner))
    g_delta = np.empty((L, d_inner))
    g_A = np.zeros((d_inner, n_state))
    g_B = np.zeros((L, n_state))
    g_C = np.zeros((L, n_state))
    g_D = np.zeros(d_inner)
    carry = np.zeros((d_inner, n_state))   # adjoint of h_t flowing back from t+1
    for t in range(L - 1, -1, -1):
        for d in range(d_inner):
            dt = delta[t, d]
            ut = u[t, d]
            gyt = gy[t, d]
            gdelta = 0.0
            gu = D[d] * gyt
            for n in range(n_state):
                lam = gyt * C[t, n] + carry[d, n]
                a = decay[t, d, n]
                prev = h[t - 1, d, n] if t > 0 else 0.0
                gla = lam * prev * a
                gdelta += gla * A[d, n] + lam * B[t, n] * ut
                g_A[d, n] += gla * dt
                g_B[t, n] += lam * dt * ut
                gu += lam * dt * B[t, n]
                g_C[t, n] += gyt * h[t, d, n]
                carry[d, n] = a * lam
            g_delta[t, d] = gdelta
            g_u[t, d] = gu
            g_D[d] += gyt * ut
    return g_u, g_delta, g_A, g_B, g_C, g_D


def selective_scan_chunked(u, delta, A, B, C, D, chunk: int = SCAN_CHUNK) -> np.ndarray:
    """Blocked evaluation of the same scan (numpy in, numpy out)."""
    u, delta, A, B, C, D = (np.asarray(v, dtype=DTYPE) for v in (u, delta, A, B, C, D))
    log_a = delta[:, :, None] * A[None, :, :]
    b = (delta * u)[:, :, None] * B[:, None, :]
    h = linear_recurrence(log_a, b, chunk)
    return np.einsum("tdn,tn->td", h, C) + D[None, :] * u


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Selective scan over ``L`` tokens with per-token ``delta``, ``B``, ``C``.

    Shapes: ``u, delta: (L, Din)``, ``A: (Din, N)``, ``B, C: (L, N)``, ``D: (Din,)``.
    Forward and backward are the exact sequential recurrence (compiled).
    """
    u, delta, A, B, C, D = (as_tensor(v) for v in (u, delta, A, B, C, D))
    ud, dd, Ad, Bd, Cd, Dd = (np.ascontiguousarray(v.data) for v in (u, delta, A, B, C, D))
    if np.any(dd <= 0):
        raise ContractError("selective_scan: delta must be strictly positive")
    if ud.shape[0] == 0:
        return make_node(np.zeros_like(ud), (u, delta, A, B, C, D), lambda g: (None,) * 6)
    # numpy's vectorised exp is several times faster than a scalar exp in the loop
    decay = np.exp(dd[:, :, None] * Ad[None, :, :])
    y, h = _scan_fwd_kernel(ud, dd, Bd, Cd, Dd, decay)

    def bw(gy):
        return _scan_bwd_kernel(np.ascontiguousarray(gy), ud, dd, Ad, Bd, Cd, Dd, h, decay)

    return make_node(y, (u, delta, A, B, C, D), bw)


# ---------------------------------------------------------- causal convolution

def causal_conv(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Depthwise causal 1-D convolution along rows, zero left padding.

    ``x: (L, D)``, ``w: (D, K)``, ``b: (D,)``; ``y_t = sum_k w[:, k] x_{t-K+1+k} + b``.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    L, d = x.shape
    K = w.shape[1]
    xp = np.concatenate([np.zeros((K - 1, d)), x.data], axis=0)
    wd = w.data
    y = np.broadcast_to(b.data, (L, d)).copy()
    for k in range(K):
        y += wd[:, k] * xp[k:k + L]

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for k in range(K):
            gxp[k:k + L] += g * wd[:, k]
            gw[:, k] = (g * xp[k:k + L]).sum(axis=0)
        return gxp[K - 1:], gw, g.sum(axis=0)

    return make_node(y, (x, w, b), bw)


# ---------------------------------------------------------------- mamba block

def init_mamba(params: Params, name: str, channels: int, rng: np.random.Generator,
               cfg: SsmConfig = SsmConfig()) -> None:
    d_inner = cfg.inner(channels)
    n = cfg.state
    r = cfg.dt_rank(channels)
    params.ones(f"{name}.norm.gamma", (channels,))
    params.zeros(f"{name}.norm.beta", (channels,))
    params.uniform(f"{name}.in_proj.w", (channels, 2 * d_inner), channels, rng)
    params.uniform(f"{name}.conv.w", (d_inner, cfg.d_conv), cfg.d_conv, rng)
    params.zeros(f"{name}.conv.b", (d_inner,))
    params.uniform(f"{name}.x_proj.w", (d_inner, r + 2 * n), d_inner, rng)
    params.uniform(f"{name}.dt_proj.w", (r, d_inner), r, rng)
    dt = np.exp(rng.uniform(math.log(1e-2), math.log(1e-1), size=d_inner))
    params.add(f"{name}.dt_proj.b", dt + np.log(-np.expm1(-dt)))  # softplus^-1(dt)
    params.add(f"{name}.A_log", np.log(np.tile(np.arange(1, n + 1, dtype=DTYPE), (d_inner, 1))))
    params.ones(f"{name}.D", (d_inner,))
    params.uniform(f"{name}.out_proj.w", (d_inner, channels), d_inner, rng)


def _inner_path(xi: Tensor, params: Params, name: str, n_state: int) -> Tensor:
    r = params[f"{name}.dt_proj.w"].shape[0]
    xc = silu(causal_conv(xi, params[f"{name}.conv.w"], params[f"{name}.conv.b"]))
    dbc = linear(xc, params[f"{name}.x_proj.w"])
    dt_in = slice_cols(dbc, 0, r)
    B = slice_cols(dbc, r, r + n_state)
    C = slice_cols(dbc, r + n_state, r + 2 * n_state)
    delta = softplus(linear(dt_in, params[f"{name}.dt_proj.w"], params[f"{name}.dt_proj.b"]))
    A = -exp(params[f"{name}.A_log"])
    return selective_scan(xc, delta, A, B, C, params[f"{name}.D"])


def mamba_block(x: Tensor, params: Params, name: str, bidirectional: bool = False) -> Tensor:
    """Pre-norm gated selective-SSM block with residual.

    ``x + out_proj(scan(conv(xi)) * silu(z))`` where ``xi, z`` split
    ``in_proj(layernorm(x))``.
    """
    x = as_tensor(x)
    if x.shape[0] == 0:
        return x
    d_inner = params[f"{name}.D"].shape[0]
    n_state = params[f"{name}.A_log"].shape[1]
    xn = layernorm(x, params[f"{name}.norm.gamma"], params[f"{name}.norm.beta"])
    xz = linear(xn, params[f"{name}.in_proj.w"])
    xi = slice_cols(xz, 0, d_inner)
    z = slice_cols(xz, d_inner, 2 * d_inner)
    y = _inner_path(xi, params, name, n_state)
    if bidirectional:
        y = y + flip_rows(_inner_path(flip_rows(xi), params, name, n_state))
    out = linear(y * silu(z), params[f"{name}.out_proj.w"])
    return x + out
