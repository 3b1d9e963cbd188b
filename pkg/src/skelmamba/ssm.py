"""State-space primitives.

Time-invariant pieces (ZOH discretization, recurrent scan, convolution-kernel
form) work on plain arrays and serve as references. The selective scan is a
fused differentiable primitive: forward and backward run in compiled loops over
a stacked ``(groups, batch, length, channels)`` layout so that many independent
scans cost one call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
import scipy.linalg

from . import tensor as tn
from .errors import DimensionError, DomainError, NumericError
from .nn import GroupedLinear, Module
from .tensor import Tensor

@dataclass
class SsmParams:
    """Continuous SSM. ``A`` is either the diagonal (shape ``(N,)``) or a full ``(N, N)`` matrix."""

    A: np.ndarray
    B: np.ndarray
    C_proj: np.ndarray
    delta: float
    D: float = 0.0

    @property
    def state_size(self) -> int:
        return int(np.shape(self.A)[0])


@dataclass
class DiscreteSsm:
    A_bar: np.ndarray
    B_bar: np.ndarray

    @property
    def diagonal(self) -> bool:
        return np.ndim(self.A_bar) == 1


def s4d_real(n_state: int, delta: float, rng: np.random.Generator | None = None) -> SsmParams:
    """Diagonal SSM with A_i = -(i+1)."""
    rng = rng or np.random.default_rng(0)
    return SsmParams(
        A=-np.arange(1.0, n_state + 1.0),
        B=rng.standard_normal(n_state),
        C_proj=rng.standard_normal(n_state),
        delta=float(delta),
    )


def discretize_zoh(p: SsmParams) -> DiscreteSsm:
    """Zero-order-hold discretization of ``p``."""
    delta = float(p.delta)
    if not delta > 0 or not math.isfinite(delta):
        raise DomainError(f"timescale delta must be positive and finite, got {p.delta}")
    A = np.asarray(p.A, dtype=np.float64)
    B = np.asarray(p.B, dtype=np.float64).reshape(-1)
    if A.ndim == 1:
        x = delta * A
        # expm1(x) / a is accurate for every nonzero a; a == 0 takes the limit delta.
        zero = A == 0
        coef = np.where(zero, delta, np.expm1(x) / np.where(zero, 1.0, A))
        return DiscreteSsm(A_bar=np.exp(x), B_bar=coef * B)
    n = A.shape[0]
    # exp([[A, B], [0, 0]] * delta) = [[A_bar, B_bar], [0, 1]]; valid for singular A too.
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = A * delta
    aug[:n, n] = B * delta
    e = scipy.linalg.expm(aug)
    return DiscreteSsm(A_bar=e[:n, :n], B_bar=e[:n, n])


def _check_sequence(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise DomainError("input sequence is empty")
    return x


def scan_recurrent(d: DiscreteSsm, c_proj, x) -> np.ndarray:
    """Run h_t = A_bar h_{t-1} + B_bar x_t, y_t = C h_t from h_0 = 0, left to right."""
    x = _check_sequence(x)
    c = np.asarray(c_proj, dtype=np.float64).reshape(-1)
    h = np.zeros_like(d.B_bar, dtype=np.float64)
    y = np.empty_like(x)
    for t, xt in enumerate(x):
        h = (d.A_bar * h if d.diagonal else d.A_bar @ h) + d.B_bar * xt
        y[t] = c @ h
    return y


def ssm_kernel(d: DiscreteSsm, c_proj, length: int) -> np.ndarray:
    """K = (C B_bar, C A_bar B_bar, ..., C A_bar^(L-1) B_bar)."""
    c = np.asarray(c_proj, dtype=np.float64).reshape(-1)
    k = np.empty(length)
    v = np.asarray(d.B_bar, dtype=np.float64).copy()
    for i in range(length):
        k[i] = c @ v
        v = d.A_bar * v if d.diagonal else d.A_bar @ v
    return k


def kernel_convolve(d: DiscreteSsm, c_proj, x) -> np.ndarray:
    """Causal convolution of ``x`` with the SSM kernel."""
    x = _check_sequence(x)
    k = ssm_kernel(d, c_proj, x.size)
    return np.convolve(x, k)[: x.size]


# ------------------------------------------------------------ compiled scan
# The input coefficient of the discretized step is expm1(delta * a) / a, which
# expm1 keeps accurate for every nonzero a however small delta * a is. Only
# a == 0 needs the limit value delta; ``zmask`` selects it without branching.
@numba.njit(cache=True, fastmath=True)
def _scan_forward(u, delta, em1, inv_a, zmask, Bm, Cm, Dk, y):
    G, nb, L, D = u.shape
    N = inv_a.shape[2]
    h = np.zeros((D, N), dtype=u.dtype)
    for g in range(G):
        for b in range(nb):
            h[:, :] = 0.0
            for t in range(L):
                for d in range(D):
                    ut = u[g, b, t, d]
                    dl = delta[g, b, t, d]
                    acc = 0.0
                    for n in range(N):
                        e = em1[g, b, t, d, n]
                        c = e * inv_a[g, d, n] + zmask[g, d, n] * dl
                        hn = (e + 1.0) * h[d, n] + c * Bm[g, b, t, n] * ut
                        h[d, n] = hn
                        acc += Cm[g, b, t, n] * hn
                    y[g, b, t, d] = acc + Dk[g, d] * ut


@numba.njit(cache=True, fastmath=True)
def _scan_backward(u, delta, em1, A, inv_a, zmask, Bm, Cm, Dk, gy, du, ddelta, dA, dB, dC, dD):
    G, nb, L, D = u.shape
    N = A.shape[2]
    hs = np.zeros((L + 1, D, N), dtype=u.dtype)
    dh = np.zeros((D, N), dtype=u.dtype)
    for g in range(G):
        for b in range(nb):
            # Recompute the state trajectory; hs[t + 1] is the state after step t.
            for t in range(L):
                for d in range(D):
                    ut = u[g, b, t, d]
                    dl = delta[g, b, t, d]
                    for n in range(N):
                        e = em1[g, b, t, d, n]
                        c = e * inv_a[g, d, n] + zmask[g, d, n] * dl
                        hs[t + 1, d, n] = (e + 1.0) * hs[t, d, n] + c * Bm[g, b, t, n] * ut
            dh[:, :] = 0.0
            for t in range(L - 1, -1, -1):
                for d in range(D):
                    ut = u[g, b, t, d]
                    dl = delta[g, b, t, d]
                    gyt = gy[g, b, t, d]
                    dD[g, b, d] += gyt * ut
                    du_acc = gyt * Dk[g, d]
                    dd_acc = 0.0
                    for n in range(N):
                        a = A[g, d, n]
                        ia = inv_a[g, d, n]
                        e = em1[g, b, t, d, n]
                        ep1 = e + 1.0
                        x = dl * a
                        c = e * ia + zmask[g, d, n] * dl
                        # d c / d a, with a series where the closed form cancels
                        closed = (dl * ep1 - c) * ia
                        series = dl * dl * (0.5 + x * (1.0 / 3.0 + x * 0.125))
                        dcda = series if abs(x) < 1e-4 else closed
                        bt = Bm[g, b, t, n]
                        dC[g, b, t, n] += gyt * hs[t + 1, d, n]
                        dhn = dh[d, n] + gyt * Cm[g, b, t, n]
                        g_ep1 = dhn * hs[t, d, n]
                        g_c = dhn * bt * ut
                        dB[g, b, t, n] += dhn * c * ut
                        du_acc += dhn * c * bt
                        dd_acc += (g_ep1 * a + g_c) * ep1
                        dA[g, b, d, n] += g_ep1 * ep1 * dl + g_c * dcda
                        dh[d, n] = dhn * ep1
                    du[g, b, t, d] = du_acc
                    ddelta[g, b, t, d] = dd_acc


@numba.njit(cache=True)
def _outer_delta_a(delta, A, out):
    G, nb, L, D = delta.shape
    N = A.shape[2]
    for g in range(G):
        for b in range(nb):
            for t in range(L):
                for d in range(D):
                    dl = delta[g, b, t, d]
                    for n in range(N):
                        out[g, b, t, d, n] = dl * A[g, d, n]


def _prepare(delta: np.ndarray, A: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    em1 = np.empty(delta.shape + (A.shape[-1],), dtype=delta.dtype)
    _outer_delta_a(delta, A, em1)
    np.expm1(em1, out=em1)
    zero = A == 0
    inv_a = np.where(zero, 0.0, 1.0 / np.where(zero, 1.0, A)).astype(A.dtype)
    return em1, inv_a, zero.astype(A.dtype)


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor | None = None) -> Tensor:
    """Input-dependent diagonal SSM scan with exact ZOH discretization per step.

    Shapes: ``u, delta: (G, batch, L, Din)``; ``A: (G, Din, N)``;
    ``B, C: (G, batch, L, N)``; ``D: (G, Din)``. Two-dimensional inputs
    ``(L, Din)``, ``(Din, N)``, ``(L, N)``, ``(Din,)`` are accepted for a single
    sequence.
    """
    single = u.ndim == 2
    if single:
        L, Din = u.shape
        u, delta = u.reshape(1, 1, L, Din), delta.reshape(1, 1, L, Din)
        A = A.reshape((1,) + A.shape)
        B, C = B.reshape((1, 1) + B.shape), C.reshape((1, 1) + C.shape)
        if D is not None:
            D = D.reshape(1, Din)
    G, nb, L, Din = u.shape
    N = A.shape[-1]
    if delta.shape != u.shape or A.shape != (G, Din, N) or B.shape != (G, nb, L, N) or C.shape != B.shape:
        raise DimensionError(
            f"selective_scan shapes: u{u.shape} delta{delta.shape} A{A.shape} B{B.shape} C{C.shape}"
        )
    if L < 1:
        raise DomainError("selective_scan needs at least one step")
    if not np.isfinite(delta.data).all():
        raise NumericError("non-finite timescale delta in selective_scan")
    if D is None:
        D = Tensor(np.zeros((G, Din), dtype=u.dtype))
    dtype = u.dtype
    arrs = [np.ascontiguousarray(t.data, dtype=dtype) for t in (u, delta, A, B, C, D)]
    ud, dd, Ad, Bd, Cd, Dd = arrs
    em1, inv_a, zmask = _prepare(dd, Ad)
    y = np.empty_like(ud)
    _scan_forward(ud, dd, em1, inv_a, zmask, Bd, Cd, Dd, y)

    def backward(gy):
        gy = np.ascontiguousarray(gy, dtype=dtype)
        du = np.zeros_like(ud)
        gdelta = np.zeros_like(dd)
        dA = np.zeros((G, nb, Din, N), dtype=dtype)
        dB = np.zeros_like(Bd)
        dC = np.zeros_like(Cd)
        dD = np.zeros((G, nb, Din), dtype=dtype)
        _scan_backward(ud, dd, em1, Ad, inv_a, zmask, Bd, Cd, Dd, gy, du, gdelta, dA, dB, dC, dD)
        return du, gdelta, dA.sum(axis=1), dB, dC, dD.sum(axis=1)

    out = tn._make(y, (u, delta, A, B, C, D), backward, "selective_scan")
    if single:
        out = out.reshape(L, Din)
    return out


def selective_scan_reference(u, delta, A, B, C, D=None) -> np.ndarray:
    """Plain array loop over time; independent of the compiled kernel."""
    u, delta, A, B, C = (np.asarray(v, dtype=np.float64) for v in (u, delta, A, B, C))
    G, nb, L, Din = u.shape
    N = A.shape[-1]
    D = np.zeros((G, Din)) if D is None else np.asarray(D, dtype=np.float64)
    h = np.zeros((G, nb, Din, N))
    y = np.empty_like(u)
    Ae = A[:, None]
    for t in range(L):
        x = delta[:, :, t, :, None] * Ae
        zero = Ae == 0
        coef = np.where(zero, delta[:, :, t, :, None], np.expm1(x) / np.where(zero, 1.0, Ae))
        h = np.exp(x) * h + coef * B[:, :, t, None, :] * u[:, :, t, :, None]
        y[:, :, t] = np.einsum("gbdn,gbn->gbd", h, C[:, :, t]) + D[:, None] * u[:, :, t]
    return y


# ------------------------------------------------------ causal sequence conv
def causal_conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Depthwise causal convolution along axis 2 of ``x[G, batch, L, D]`` with ``weight[G, D, k]``."""
    G, nb, L, Dc = x.shape
    k = weight.shape[-1]
    if weight.shape != (G, Dc, k) or bias.shape != (G, Dc):
        raise DimensionError(f"causal_conv1d: x{x.shape} weight{weight.shape} bias{bias.shape}")
    xd, wd = x.data, weight.data
    y = np.empty_like(xd)
    y[...] = bias.data[:, None, None, :]
    for j in range(k):
        s = k - 1 - j
        if s < L:
            y[:, :, s:, :] += wd[:, None, None, :, j] * xd[:, :, : L - s, :]

    def backward(g):
        gx = np.zeros_like(xd) if x.requires_grad else None
        gw = np.zeros_like(wd) if weight.requires_grad else None
        for j in range(k):
            s = k - 1 - j
            if s >= L:
                continue
            if gx is not None:
                gx[:, :, : L - s, :] += g[:, :, s:, :] * wd[:, None, None, :, j]
            if gw is not None:
                gw[:, :, j] = np.einsum("gbld,gbld->gd", g[:, :, s:, :], xd[:, :, : L - s, :])
        return gx, gw, g.sum(axis=(1, 2))

    return tn._make(y, (x, weight, bias), backward, "causal_conv1d")


# ----------------------------------------------------------------- modules
class SelectiveScan(Module):
    """Input-dependent projections x_t -> (B_t, C_t, delta_t) feeding :func:`selective_scan`.

    B_t and C_t are shared across channels; delta_t is per channel, produced
    by a rank-``dt_rank`` projection followed by softplus.
    """

    def __init__(
        self,
        d_inner: int,
        d_state: int,
        groups: int,
        rng: np.random.Generator,
        dt_rank: int = 1,
        dt_min: float = 1e-3,
        dt_max: float = 1e-1,
    ):
        self.d_state = d_state
        self.dt_rank = dt_rank
        self.x_proj = GroupedLinear(groups, d_inner, dt_rank + 2 * d_state, rng)
        std = dt_rank**-0.5
        self.dt_weight = tn.parameter(rng.uniform(-std, std, (groups, dt_rank, d_inner)))
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), (groups, 1, d_inner)))
        # Inverse softplus so that softplus(bias) == dt.
        self.dt_bias = tn.parameter(dt + np.log(-np.expm1(-dt)))
        a = np.broadcast_to(np.arange(1.0, d_state + 1.0), (groups, d_inner, d_state))
        self.A_log = tn.parameter(np.log(a))
        self.D = tn.parameter(np.ones((groups, d_inner)))

    def projections(self, u: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        G, nb, L, Din = u.shape
        proj = self.x_proj(u)
        dt_low, Bm, Cm = tn.split(proj, [self.dt_rank, self.d_state, self.d_state], axis=-1)
        dt = dt_low.reshape(G, nb * L, self.dt_rank) @ self.dt_weight + self.dt_bias
        delta = tn.softplus(dt).reshape(G, nb, L, Din)
        return delta, Bm, Cm

    def forward(self, u: Tensor) -> Tensor:
        delta, Bm, Cm = self.projections(u)
        A = -tn.exp(self.A_log)
        return selective_scan(u, delta, A, Bm, Cm, self.D)


class MambaBlock(Module):
    """``groups`` independent Mamba-style blocks over ``x[groups, batch, L, d_model]``.

    in-projection to (x, z) with expansion ``expand``; causal depthwise conv of
    width ``d_conv`` and SiLU on x; selective scan; SiLU(z) gate; out-projection.
    """

    def __init__(
        self,
        d_model: int,
        groups: int,
        rng: np.random.Generator,
        d_state: int = 16,
        expand: int = 2,
        d_conv: int = 4,
        dt_rank: int | None = None,
    ):
        self.d_model = d_model
        self.d_inner = expand * d_model
        self.groups = groups
        dt_rank = dt_rank or math.ceil(d_model / 16)
        self.in_proj = GroupedLinear(groups, d_model, 2 * self.d_inner, rng)
        bound = 1.0 / math.sqrt(d_conv)
        self.conv_weight = tn.parameter(rng.uniform(-bound, bound, (groups, self.d_inner, d_conv)))
        self.conv_bias = tn.parameter(rng.uniform(-bound, bound, (groups, self.d_inner)))
        self.scan = SelectiveScan(self.d_inner, d_state, groups, rng, dt_rank=dt_rank)
        self.out_proj = GroupedLinear(groups, self.d_inner, d_model, rng)

    def forward(self, x: Tensor) -> Tensor:
        xz = self.in_proj(x)
        xs, z = tn.split(xz, [self.d_inner, self.d_inner], axis=-1)
        xs = tn.silu(causal_conv1d(xs, self.conv_weight, self.conv_bias))
        y = self.scan(xs) * tn.silu(z)
        return self.out_proj(y)


def mamba_param_count(d_model: int, d_state: int, expand: int = 2, d_conv: int = 4, dt_rank: int | None = None) -> int:
    """Parameters of one (ungrouped) :class:`MambaBlock`."""
    di = expand * d_model
    r = dt_rank or math.ceil(d_model / 16)
    return (
        d_model * 2 * di  # in_proj
        + di * d_conv + di  # conv
        + di * (r + 2 * d_state)  # x_proj
        + r * di + di  # dt projection
        + di * d_state + di  # A_log, D
        + di * d_model  # out_proj
    )


def mamba_macs(d_model: int, length: int, d_state: int, expand: int = 2, d_conv: int = 4, dt_rank: int | None = None) -> int:
    """Multiply-accumulates of one block forward over ``length`` steps."""
    di = expand * d_model
    r = dt_rank or math.ceil(d_model / 16)
    per_step = (
        d_model * 2 * di
        + di * d_conv
        + di * (r + 2 * d_state)
        + r * di
        + 5 * di * d_state  # delta*A, delta*B*u (2), state update, readout
        + 2 * di  # skip term and output gate
        + di * d_model
    )
    return per_step * length
