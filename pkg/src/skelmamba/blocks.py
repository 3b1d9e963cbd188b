"""Time-space Mamba block: three-stream mixer, feed-forward network, temporal downsampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DomainError
from .nn import LayerNorm, Linear, Module
from .partgroup import PartGroupedMamba, PartitionSpec, pgm_macs, pgm_param_count
from .tensor import Tensor

STREAMS = ("s", "m", "t")


@dataclass
class PgmOptions:
    """Switches forwarded to :class:`PartGroupedMamba`."""

    d_state: int = 16
    reduction: int = 4
    scan_mode: str = "c2d"
    use_parts: bool = True
    use_token: bool = True
    learn_fusion: bool = True
    use_attention: bool = True
    residual_gate: bool = False
    expand: int = 2
    d_conv: int = 4

    def kwargs(self) -> dict:
        return dict(vars(self))


@dataclass
class BlockConfig:
    C: int
    H: int
    k_t: int = 7
    ffn_ratio: int = 4
    eps: float = 1e-5
    streams: str = "smt"
    pgm: PgmOptions = field(default_factory=PgmOptions)

    @property
    def heads(self) -> int:
        return self.H // 4

    def validate(self) -> None:
        if self.H <= 0 or self.H % 4:
            raise ConfigError(f"H={self.H} must be a positive multiple of 4")
        if self.C <= 0 or self.C % 4:
            raise ConfigError(f"C={self.C} must be a positive multiple of 4")
        if (self.C // 4) % self.heads:
            raise ConfigError(f"C/4={self.C // 4} not divisible by H/4={self.heads}")
        if (self.C // 2) % self.heads:
            raise ConfigError(f"C/2={self.C // 2} not divisible by H/4={self.heads}")
        if "m" in self.streams and (self.C // 2) % (4 * self.heads):
            raise ConfigError(f"C/2={self.C // 2} does not split into 4 direction groups for each of {self.heads} heads")
        if self.k_t < 1 or self.k_t % 2 == 0:
            raise ConfigError(f"temporal kernel size k_t={self.k_t} must be odd")
        if self.ffn_ratio < 1:
            raise ConfigError(f"ffn_ratio={self.ffn_ratio} must be >= 1")
        if not set(self.streams) <= set(STREAMS):
            raise ConfigError(f"unknown stream letters in {self.streams!r}")


def spatial_conv(x: Tensor, A: Tensor) -> Tensor:
    """Per-head joint mixing: ``y[..., t, :, head slice] = A[h] @ x[..., t, :, head slice]``."""
    heads, V, _ = A.shape
    *lead, T, V_in, c = x.shape
    if V_in != V:
        raise ConfigError(f"adjacency is {V}x{V} but input has {V_in} joints")
    if c % heads:
        raise ConfigError(f"spatial channels {c} not divisible by {heads} heads")
    n = len(lead)
    xr = x.reshape(tuple(lead) + (T, V, heads, c // heads))
    perm = tuple(range(n)) + (n, n + 2, n + 1, n + 3)  # (..., T, heads, V, c_h)
    y = A @ xr.transpose(perm)
    return y.transpose(perm).reshape(tuple(lead) + (T, V, c))


def temporal_conv(x: Tensor, weight: Tensor, bias: Tensor | None, heads: int) -> Tensor:
    """Head-grouped same-length convolution along time for every joint.

    ``x[..., T, V, c]``, ``weight[c, c / heads, k_t]``.
    """
    k = weight.shape[-1]
    if k % 2 == 0:
        raise ConfigError(f"temporal kernel size k_t={k} must be odd")
    n = x.ndim
    perm = tuple(range(n - 3)) + (n - 2, n - 1, n - 3)  # (..., V, c, T)
    y = tn.conv1d_grouped(x.transpose(perm), weight, bias, groups=heads, padding=(k - 1) // 2)
    inv = tuple(np.argsort(perm))
    return y.transpose(inv)


class SpatialConv(Module):
    def __init__(self, channels: int, heads: int, V: int, rng: np.random.Generator):
        self.A = tn.parameter(np.eye(V)[None].repeat(heads, 0) + 0.01 * rng.standard_normal((heads, V, V)))

    def forward(self, x: Tensor) -> Tensor:
        return spatial_conv(x, self.A)


class TemporalConv(Module):
    def __init__(self, channels: int, heads: int, k_t: int, rng: np.random.Generator):
        if k_t % 2 == 0:
            raise ConfigError(f"temporal kernel size k_t={k_t} must be odd")
        per = channels // heads
        bound = 1.0 / np.sqrt(per * k_t)
        self.heads = heads
        self.weight = tn.parameter(rng.uniform(-bound, bound, (channels, per, k_t)))
        self.bias = tn.parameter(rng.uniform(-bound, bound, channels))

    def forward(self, x: Tensor) -> Tensor:
        return temporal_conv(x, self.weight, self.bias, self.heads)


class PGMB(Module):
    """Linear map, split into spatial / part-grouped / temporal streams of widths C/4, C/2, C/4, merge.

    A stream missing from ``cfg.streams`` passes its channels through unchanged.
    """

    def __init__(
        self,
        cfg: BlockConfig,
        T: int,
        V: int,
        partitions: Sequence[PartitionSpec],
        rng: np.random.Generator,
        zero_out: bool = False,
    ):
        cfg.validate()
        C, heads = cfg.C, cfg.heads
        self.widths = (C // 4, C // 2, C // 4)
        self.in_proj = Linear(C, C, rng)
        self.spatial = SpatialConv(C // 4, heads, V, rng) if "s" in cfg.streams else None
        self.pgm = (
            PartGroupedMamba(C // 2, heads, partitions, T, V, rng, **cfg.pgm.kwargs()) if "m" in cfg.streams else None
        )
        self.temporal = TemporalConv(C // 4, heads, cfg.k_t, rng) if "t" in cfg.streams else None
        self.out_proj = Linear(C, C, rng, zero=zero_out)

    def mix(self, h: Tensor) -> Tensor:
        """The three streams applied to an already projected input."""
        xs, xm, xt = tn.split(h, self.widths, axis=-1)
        if self.spatial is not None:
            xs = self.spatial(xs)
        if self.pgm is not None:
            xm = self.pgm(xm)
        if self.temporal is not None:
            xt = self.temporal(xt)
        return tn.concat([xs, xm, xt], axis=-1)

    def forward(self, x: Tensor) -> Tensor:
        return self.out_proj(self.mix(self.in_proj(x)))


class FFN(Module):
    def __init__(self, C: int, ratio: int, rng: np.random.Generator, zero_out: bool = False):
        self.fc1 = Linear(C, ratio * C, rng)
        self.fc2 = Linear(ratio * C, C, rng, zero=zero_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(tn.gelu(self.fc1(x)))


class TSMB(Module):
    """Pre-norm residual block: ``x + PGMB(LN(x))`` then ``x + FFN(LN(x))``."""

    def __init__(
        self,
        cfg: BlockConfig,
        T: int,
        V: int,
        partitions: Sequence[PartitionSpec],
        rng: np.random.Generator,
        zero_out: bool = False,
    ):
        self.ln1 = LayerNorm(cfg.C, cfg.eps)
        self.mixer = PGMB(cfg, T, V, partitions, rng, zero_out)
        self.ln2 = LayerNorm(cfg.C, cfg.eps)
        self.ffn = FFN(cfg.C, cfg.ffn_ratio, rng, zero_out)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.mixer(self.ln1(x))
        return x + self.ffn(self.ln2(x))


class BatchNorm(Module):
    """Per-channel batch normalization over every axis but the last, with running statistics."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gain = tn.parameter(np.ones(channels), decay=False)
        self.bias = tn.parameter(np.zeros(channels), decay=False)
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        if self.training:
            axes = tuple(range(x.ndim - 1))
            n = int(np.prod([x.shape[a] for a in axes]))
            mu = x.data.mean(axis=axes)
            var = x.data.var(axis=axes) * (n / max(n - 1, 1))
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(self.running_mean.dtype)
            self.running_var = ((1 - m) * self.running_var + m * var).astype(self.running_var.dtype)
            return tn.batch_norm(x, self.gain, self.bias, self.eps)
        scale = self.gain / np.sqrt(self.running_var + self.eps)
        shift = self.bias - self.running_mean * scale
        return x * scale + shift

    def set_passthrough(self) -> None:
        """Make eval-mode output equal the input (up to rounding)."""
        self.gain.data[...] = 1.0
        self.bias.data[...] = 0.0
        self.running_mean[...] = 0.0
        self.running_var[...] = 1.0 - self.eps


class TDown(Module):
    """Depthwise temporal convolution (kernel 3, stride 2, padding 1) followed by batch norm."""

    def __init__(self, channels: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(3)
        self.weight = tn.parameter(rng.uniform(-bound, bound, (channels, 1, 3)))
        self.bn = BatchNorm(channels)

    def forward(self, x: Tensor) -> Tensor:
        T = x.shape[-3]
        if T < 2:
            raise DomainError(f"temporal downsampling needs T >= 2, got T={T}")
        n = x.ndim
        perm = tuple(range(n - 3)) + (n - 2, n - 1, n - 3)
        y = tn.conv1d_grouped(x.transpose(perm), self.weight, None, groups=x.shape[-1], stride=2, padding=1)
        return self.bn(y.transpose(tuple(np.argsort(perm))))


def tdown_length(T: int) -> int:
    return (T + 1) // 2


def tsmb_param_count(cfg: BlockConfig, T: int, V: int, part_sizes: Sequence[int]) -> int:
    C, heads = cfg.C, cfg.heads
    n = 4 * C + 2 * (C * C + C)
    n += cfg.ffn_ratio * C * C + cfg.ffn_ratio * C + cfg.ffn_ratio * C * C + C
    if "s" in cfg.streams:
        n += heads * V * V
    if "t" in cfg.streams:
        c = C // 4
        n += c * (c // heads) * cfg.k_t + c
    if "m" in cfg.streams:
        n += pgm_param_count(C // 2, heads, part_sizes, T, **cfg.pgm.kwargs())
    return n


def tsmb_macs(cfg: BlockConfig, T: int, V: int, part_sizes: Sequence[int]) -> int:
    C, heads = cfg.C, cfg.heads
    pos = T * V
    n = 2 * pos * C * C + 2 * pos * cfg.ffn_ratio * C * C
    if "s" in cfg.streams:
        n += T * V * V * (C // 4)
    if "t" in cfg.streams:
        c = C // 4
        n += pos * c * (c // heads) * cfg.k_t
    if "m" in cfg.streams:
        n += pgm_macs(C // 2, heads, part_sizes, T, V, **cfg.pgm.kwargs())
    return n
