"""Channel-wise spatio-temporal SSM: four channel groups, four scan orders over (T, V)."""

from __future__ import annotations

import enum

import numpy as np

from . import tensor as tn
from .errors import ConfigError
from .nn import Module
from .ssm import MambaBlock, mamba_macs, mamba_param_count
from .tensor import Tensor


class ScanDirection(enum.Enum):
    TtoS = "t->s"  # time outer, joint inner
    StoT = "s->t"  # joint outer, time inner
    TtoS_rev = "t<-s"
    StoT_rev = "s<-t"

    @property
    def joint_outer(self) -> bool:
        return self in (ScanDirection.StoT, ScanDirection.StoT_rev)

    @property
    def reversed(self) -> bool:
        return self in (ScanDirection.TtoS_rev, ScanDirection.StoT_rev)


# Fixed group -> direction assignment.
GROUP_DIRECTIONS = (ScanDirection.TtoS, ScanDirection.StoT, ScanDirection.TtoS_rev, ScanDirection.StoT_rev)


def flatten_order(T: int, V: int, direction: ScanDirection) -> np.ndarray:
    """The (t, v) pair visited at each step of the flattened scan, shape ``(T*V, 2)``."""
    t, v = np.meshgrid(np.arange(T), np.arange(V), indexing="ij")
    pairs = np.stack([t, v], axis=-1)
    if direction.joint_outer:
        pairs = pairs.transpose(1, 0, 2)
    pairs = pairs.reshape(-1, 2)
    return pairs[::-1].copy() if direction.reversed else pairs


def flatten_direction(x: Tensor, direction: ScanDirection) -> Tensor:
    """``x[..., T, V, c]`` -> ``[..., T*V, c]`` in the visiting order of ``direction``."""
    *lead, T, V, c = x.shape
    n = len(lead)
    if direction.joint_outer:
        x = x.transpose(tuple(range(n)) + (n + 1, n, n + 2))
    seq = x.reshape(tuple(lead) + (T * V, c))
    return tn.flip(seq, axis=n) if direction.reversed else seq


def unflatten_direction(seq: Tensor, T: int, V: int, direction: ScanDirection) -> Tensor:
    """Inverse of :func:`flatten_direction`."""
    *lead, L, c = seq.shape
    n = len(lead)
    if direction.reversed:
        seq = tn.flip(seq, axis=n)
    if direction.joint_outer:
        x = seq.reshape(tuple(lead) + (V, T, c))
        return x.transpose(tuple(range(n)) + (n + 1, n, n + 2))
    return seq.reshape(tuple(lead) + (T, V, c))


def split4(x: Tensor) -> list[Tensor]:
    """Four contiguous channel slices of equal width."""
    C = x.shape[-1]
    if C % 4:
        raise ConfigError(f"channel count C={C} is not divisible by 4")
    return tn.split(x, [C // 4] * 4, axis=-1)


class C2dSsm(Module):
    """Direction-specific selective-SSM blocks over channel groups of ``x[batch, T, V, C]``.

    With ``heads > 1`` the channels hold ``heads`` independent C-2D-SSMs side by
    side; all ``4 * heads`` group blocks are evaluated in one stacked call.
    ``mode="1d"`` replaces the channel split with one time-to-space scan over
    each head's full width (the single-direction baseline).
    """

    def __init__(
        self,
        channels: int,
        rng: np.random.Generator,
        heads: int = 1,
        d_state: int = 16,
        expand: int = 2,
        d_conv: int = 4,
        mode: str = "c2d",
    ):
        if mode not in ("c2d", "1d"):
            raise ConfigError(f"unknown scan mode {mode!r}")
        per_head = 4 if mode == "c2d" else 1
        if channels % (heads * per_head):
            raise ConfigError(f"channels={channels} not divisible by {heads * per_head} scan groups")
        self.mode = mode
        self.channels = channels
        self.groups = heads * per_head
        self.width = channels // self.groups
        self.directions = [GROUP_DIRECTIONS[g % 4] if mode == "c2d" else ScanDirection.TtoS for g in range(self.groups)]
        self.block = MambaBlock(self.width, self.groups, rng, d_state=d_state, expand=expand, d_conv=d_conv)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim == 3:
            return self.forward(x.reshape((1,) + x.shape)).reshape(x.shape)
        *_, T, V, C = x.shape
        if C != self.channels:
            raise ConfigError(f"C2dSsm built for {self.channels} channels, got {C}")
        parts = tn.split(x, [self.width] * self.groups, axis=-1)
        seqs = tn.stack([flatten_direction(p, d) for p, d in zip(parts, self.directions)], axis=0)
        y = self.block(seqs)
        outs = [unflatten_direction(y[g], T, V, d) for g, d in enumerate(self.directions)]
        return tn.concat(outs, axis=-1)


def c2dssm_param_count(channels: int, heads: int, d_state: int, mode: str = "c2d", expand: int = 2, d_conv: int = 4) -> int:
    groups = heads * (4 if mode == "c2d" else 1)
    return groups * mamba_param_count(channels // groups, d_state, expand, d_conv)


def c2dssm_macs(channels: int, heads: int, length: int, d_state: int, mode: str = "c2d", expand: int = 2, d_conv: int = 4) -> int:
    groups = heads * (4 if mode == "c2d" else 1)
    return groups * mamba_macs(channels // groups, length, d_state, expand, d_conv)
