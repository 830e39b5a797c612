"""Diagonal selective state-space scan with optional state modulation.

Shapes follow the (batch, length, channels) convention; unbatched (L, C)
inputs are accepted everywhere and returned unbatched. Each channel carries
its own length-N state, the transition ``A`` is a shared diagonal and
``Delta``, ``B``, ``C`` are produced per token from the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Linear, Module, param
from .tensor import Tensor

TAYLOR_CUTOFF = 1e-4


def zoh_discretize(A_diag, B, delta):
    """Zero-order-hold discretization of a diagonal system.

    Returns ``(A_bar, B_bar)`` with ``A_bar = exp(delta*A)`` and
    ``B_bar = (exp(delta*A) - 1) / A * B``. Where ``|delta*A| < 1e-4`` the
    factor is replaced by its series ``delta * (1 + delta*A/2)``, which also
    covers ``A == 0``.

    ``delta`` may be a scalar or have leading shape ``(...)``; ``A_diag`` is
    (N,) and ``B`` must broadcast against ``(..., N)``. Tensor inputs keep the
    gradient path; plain arrays give plain arrays back.
    """
    as_arrays = not any(isinstance(v, Tensor) for v in (A_diag, B, delta))
    A_diag, B, delta = T.as_tensor(A_diag), T.as_tensor(B), T.as_tensor(delta)
    if np.any(delta.data <= 0):
        raise ValueError("ZOH step size must be positive")
    d = T.reshape(delta, delta.shape + (1,))
    dA = d * A_diag
    small = np.abs(dA.data) < TAYLOR_CUTOFF
    a_safe = T.where(small, np.ones_like(dA.data), T.mul(A_diag, np.ones_like(dA.data)))
    exact = T.expm1(dA) / a_safe
    series = d * (1.0 + 0.5 * dA)
    factor = T.where(small, series, exact)
    A_bar = T.exp(dA)
    B_bar = factor * B
    if as_arrays:
        return A_bar.data, B_bar.data
    return A_bar, B_bar


@dataclass
class ScanStep:
    """Discretized parameters for one token."""

    a_bar: np.ndarray
    b_bar: np.ndarray
    c: np.ndarray
    delta: float


class SsmParams(Module):
    """Learnable parameters of one selective scan.

    ``A`` is stored as ``a_log`` with ``A = -exp(a_log)`` so it stays negative
    during training; the initial values are ``A_i = -(i + 1)``.
    """

    def __init__(self, channels: int, state_dim: int = 8, *, seed: int = 0, name: str = "ssm"):
        if state_dim < 1 or channels < 1:
            raise ValueError("state_dim and channels must be >= 1")
        self.channels = channels
        self.state_dim = state_dim
        self.a_log = param(np.log(np.arange(1, state_dim + 1, dtype=np.float64)), name + ".a_log")
        self.delta_proj = Linear(channels, 1, seed=seed, name=name + ".delta_proj")
        self.b_proj = Linear(channels, state_dim, seed=seed, name=name + ".b_proj")
        self.c_proj = Linear(channels, state_dim, seed=seed, name=name + ".c_proj")
        self.d = param(np.ones(channels), name + ".d")

    @property
    def A(self) -> Tensor:
        return -T.exp(self.a_log)

    def project(self, u):
        """Per-token ``(delta, B, C)`` for a (..., C) input."""
        delta = T.softplus(self.delta_proj(u))
        delta = T.reshape(delta, delta.shape[:-1])
        return delta, self.b_proj(u), self.c_proj(u)


def selective_params(u_t, params: SsmParams) -> ScanStep:
    """Discretized scan parameters for a single token ``u_t`` of length C."""
    u_t = T.as_tensor(np.asarray(T.as_tensor(u_t).data).reshape(1, -1))
    delta, b, c = params.project(u_t)
    a_bar, b_bar = zoh_discretize(params.A, b, delta)
    return ScanStep(a_bar.data[0], b_bar.data[0], c.data[0], float(delta.data[0]))


def scan_discretized(u, a_bar, b_bar, c, d, z=None) -> Tensor:
    """Run the recurrence from already-discretized per-token parameters.

    ``u``, ``z``: (B, L, C); ``a_bar``, ``b_bar``, ``c``: (B, L, N); ``d``: (C,).
    Computes ``x_t = a_bar_t * x_{t-1} + b_bar_t * u_t`` per channel,
    ``h_t = z_t * x_t`` and ``y_t = <c_t, h_t> + d * u_t``. The modulation is
    applied after the recurrence and never fed back into it.
    """
    y, _ = _scan(u, a_bar, b_bar, c, d, z)
    return y


def _scan(u, a_bar, b_bar, c, d, z=None):
    u, a_bar, b_bar, c, d = (T.as_tensor(v) for v in (u, a_bar, b_bar, c, d))
    parents = [u, a_bar, b_bar, c, d]
    if z is not None:
        z = T.as_tensor(z)
        if z.shape != u.shape:
            raise ValueError(f"modulation shape {z.shape} does not match input {u.shape}")
        parents.append(z)
    ud, ad, bd, cd, dd = u.data, a_bar.data, b_bar.data, c.data, d.data
    Bsz, L, C = ud.shape
    N = ad.shape[-1]

    xs = np.empty((Bsz, L, C, N), dtype=ud.dtype)
    bu = bd[:, :, None, :] * ud[..., None]
    a4 = ad[:, :, None, :]
    xs[:, 0] = bu[:, 0]
    for t in range(1, L):
        np.multiply(a4[:, t], xs[:, t - 1], out=xs[:, t])
        xs[:, t] += bu[:, t]
    s = np.einsum("blcn,bln->blc", xs, cd)
    y = (s * z.data if z is not None else s) + dd * ud

    def bw(gy):
        gd = (gy * ud).sum(axis=(0, 1)) if d.requires_grad else None
        gyz = gy * z.data if z is not None else gy
        gz = gy * s if z is not None else None
        gc = np.einsum("blc,blcn->bln", gyz, xs)
        lam = gyz[..., None] * cd[:, :, None, :]
        # reverse accumulation of the adjoint state, in place
        for t in range(L - 2, -1, -1):
            lam[:, t] += a4[:, t + 1] * lam[:, t + 1]
        ga = np.zeros_like(ad)
        ga[:, 1:] = np.einsum("blcn,blcn->bln", lam[:, 1:], xs[:, :-1])
        gb = np.einsum("blcn,blc->bln", lam, ud)
        gu = gy * dd + np.einsum("blcn,bln->blc", lam, bd)
        grads = [gu, ga, gb, gc, gd]
        if z is not None:
            grads.append(gz)
        return tuple(grads)

    return T.custom_op(y, parents, bw), xs


def _batched(u):
    u = T.as_tensor(u)
    if u.ndim == 2:
        return T.reshape(u, (1,) + u.shape), True
    if u.ndim != 3:
        raise ValueError(f"expected (L, C) or (B, L, C) input, got {u.shape}")
    return u, False


def _discretize(u: Tensor, params: SsmParams):
    delta, b, c = params.project(u)
    a_bar, b_bar = zoh_discretize(params.A, b, delta)
    return a_bar, b_bar, c


def selective_scan(u, params: SsmParams):
    """Plain selective scan. Returns ``(y, x)`` with states x of shape (..., L, C, N)."""
    ub, squeeze = _batched(u)
    if ub.shape[-1] != params.channels:
        raise ValueError(f"input has {ub.shape[-1]} channels, params expect {params.channels}")
    a_bar, b_bar, c = _discretize(ub, params)
    y, xs = _scan(ub, a_bar, b_bar, c, params.d)
    if squeeze:
        return T.reshape(y, y.shape[1:]), xs[0]
    return y, xs


def modulated_scan(u, z, params: SsmParams) -> Tensor:
    """Selective scan whose state is multiplied by ``z`` before the readout."""
    ub, squeeze = _batched(u)
    zb, _ = _batched(z)
    if zb.shape != ub.shape:
        raise ValueError(f"modulation shape {T.as_tensor(z).shape} does not match input {T.as_tensor(u).shape}")
    if ub.shape[-1] != params.channels:
        raise ValueError(f"input has {ub.shape[-1]} channels, params expect {params.channels}")
    a_bar, b_bar, c = _discretize(ub, params)
    y, _ = _scan(ub, a_bar, b_bar, c, params.d, zb)
    return T.reshape(y, y.shape[1:]) if squeeze else y
