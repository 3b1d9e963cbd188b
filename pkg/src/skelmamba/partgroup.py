"""Part-grouped Mamba: partition SSMs with tokens, a global SSM, weighted fusion and channel attention."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tn
from .errors import ConfigError, SchemaError
from .nn import GroupedLinear, Module
from .scan2d import C2dSsm, c2dssm_macs, c2dssm_param_count
from .tensor import Tensor


@dataclass(frozen=True)
class PartitionSpec:
    name: str
    indices: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))

    def validate(self, num_joints: int) -> None:
        if not self.indices:
            raise ConfigError(f"partition {self.name!r} is empty")
        for i in self.indices:
            if not 0 <= i < num_joints:
                raise ConfigError(f"partition {self.name!r}: joint index {i} outside [0, {num_joints})")
        if len(set(self.indices)) != len(self.indices):
            raise ConfigError(f"partition {self.name!r} repeats a joint index")


def validate_partitions(parts: Sequence[PartitionSpec], num_joints: int) -> None:
    if not parts:
        raise ConfigError("at least one partition is required")
    for p in parts:
        p.validate(num_joints)
    covered = set().union(*(p.indices for p in parts))
    missing = sorted(set(range(num_joints)) - covered)
    if missing:
        raise ConfigError(f"joints {missing} belong to no partition")


def partitions_from_obj(obj, num_joints: int | None = None) -> list[PartitionSpec]:
    try:
        entries = obj["partitions"] if isinstance(obj, dict) else obj
        parts = [PartitionSpec(str(e["name"]), tuple(e["indices"])) for e in entries]
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed partition map: {exc}") from exc
    if num_joints is None and isinstance(obj, dict):
        num_joints = obj.get("num_joints")
    if num_joints is not None:
        validate_partitions(parts, int(num_joints))
    return parts


def load_partitions(source: str | Path = "ntu25", num_joints: int | None = None) -> list[PartitionSpec]:
    """Load a partition map by bundled name (``"ntu25"``) or from a JSON file path."""
    path = Path(source)
    if path.suffix == ".json" or path.exists():
        try:
            obj = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise SchemaError(f"cannot read partition map {path}: {exc}") from exc
    else:
        name = f"partitions_{source}.json"
        try:
            obj = json.loads(resources.files("skelmamba.configs").joinpath(name).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"no bundled partition map named {source!r}") from exc
    return partitions_from_obj(obj, num_joints)


def _gather(x: Tensor, part: PartitionSpec) -> Tensor:
    V = x.shape[-2]
    for i in part.indices:
        if not 0 <= i < V:
            raise ConfigError(f"partition {part.name!r}: joint index {i} outside [0, {V})")
    return tn.take(x, np.asarray(part.indices), axis=-2)


def partition_forward(x: Tensor, part: PartitionSpec, ssm: Module, token: Tensor | None = None) -> Tensor:
    """Gather the joints of ``part``, add its token and run its scan module."""
    xp = _gather(x, part)
    if token is not None:
        xp = xp + token
    return ssm(xp)


def _head_scale(x: Tensor, beta: Tensor) -> Tensor:
    """Multiply each head's channel slice of ``x`` by its entry of ``beta``."""
    heads = beta.shape[-1]
    C = x.shape[-1]
    vec = tn.broadcast_to(beta.reshape(heads, 1), (heads, C // heads)).reshape(C)
    return x * vec


def fuse(
    x_parts: Sequence[Tensor],
    x_global: Tensor,
    beta_parts: Tensor | np.ndarray,
    beta_global: Tensor | np.ndarray,
    partitions: Sequence[PartitionSpec],
) -> Tensor:
    """Weighted sum of the global output and the partition outputs scattered back onto their joints.

    ``beta_parts`` has shape ``(P,)`` or ``(P, heads)``; ``beta_global`` ``()`` or ``(heads,)``.
    Joints shared by several partitions accumulate every contribution.
    """
    beta_parts = tn.as_tensor(beta_parts)
    beta_global = tn.as_tensor(beta_global)
    if beta_global.ndim == 0:
        beta_global = beta_global.reshape(1)
        beta_parts = beta_parts.reshape(len(partitions), 1)
    if beta_parts.ndim == 1:
        beta_parts = beta_parts.reshape(len(partitions), 1)
    V = x_global.shape[-2]
    out = _head_scale(x_global, beta_global)
    for k, (xp, part) in enumerate(zip(x_parts, partitions)):
        scaled = _head_scale(xp, beta_parts[k])
        out = out + tn.scatter(scaled, np.asarray(part.indices), axis=-2, size=V)
    return out


class ChannelAttention(Module):
    """Per-head squeeze-excitation gate: mean over (T, V), bottleneck MLP, sigmoid."""

    def __init__(self, channels: int, heads: int, rng: np.random.Generator, reduction: int = 4, zero: bool = False):
        if channels % heads:
            raise ConfigError(f"channels={channels} not divisible by heads={heads}")
        width = channels // heads
        if width % reduction:
            raise ConfigError(f"attention reduction r={reduction} does not divide head width {width}")
        self.heads = heads
        self.squeeze = GroupedLinear(heads, width, width // reduction, rng, bias=True)
        self.excite = GroupedLinear(heads, width // reduction, width, rng, bias=True)
        if zero:
            self.excite.weight.data[...] = 0.0
            self.excite.bias.data[...] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        """``x[B, T, V, C]`` (or ``[T, V, C]``) -> weights ``[B, C]`` (or ``[C]``)."""
        pooled = x.mean(axis=(-3, -2))
        single = pooled.ndim == 1
        if single:
            pooled = pooled.reshape(1, -1)
        B, C = pooled.shape
        h = pooled.reshape(B, self.heads, C // self.heads).transpose((1, 0, 2))
        h = tn.sigmoid(self.excite(tn.gelu(self.squeeze(h))))
        w = h.transpose((1, 0, 2)).reshape(B, C)
        return w.reshape(C) if single else w


def channel_attention(x_ssm: Tensor, module: ChannelAttention) -> Tensor:
    return module(x_ssm)


class PartGroupedMamba(Module):
    """``heads`` parallel part-grouped SSM heads over ``x[B, T, V, C]``.

    Each head owns a contiguous ``C / heads`` channel slice. Head slices are
    computed together by stacking; tokens, fusion weights and attention are
    per head.

    The switches reproduce the component ablation: ``scan_mode="1d"`` uses a
    single-direction scan, ``use_token`` adds partition tokens,
    ``learn_fusion`` makes the fusion weights trainable (otherwise fixed at
    1/(P+1)), ``use_attention`` enables the channel gate (otherwise w = 1).
    ``use_parts=False`` keeps only the global path.
    """

    def __init__(
        self,
        channels: int,
        heads: int,
        partitions: Sequence[PartitionSpec],
        T: int,
        V: int,
        rng: np.random.Generator,
        d_state: int = 16,
        reduction: int = 4,
        scan_mode: str = "c2d",
        use_parts: bool = True,
        use_token: bool = True,
        learn_fusion: bool = True,
        use_attention: bool = True,
        residual_gate: bool = False,
        expand: int = 2,
        d_conv: int = 4,
    ):
        if channels % heads:
            raise ConfigError(f"PGM channels={channels} not divisible by heads={heads}")
        self.partitions = list(partitions) if use_parts else []
        validate_partitions(list(partitions), V)
        self.T, self.V, self.channels, self.heads = T, V, channels, heads
        kw = dict(heads=heads, d_state=d_state, expand=expand, d_conv=d_conv, mode=scan_mode)
        self.global_ssm = C2dSsm(channels, rng, **kw)
        self.part_ssms = [C2dSsm(channels, rng, **kw) for _ in self.partitions]
        self.tokens = (
            [tn.parameter(0.02 * rng.standard_normal((T, len(p.indices), channels)), decay=False) for p in self.partitions]
            if use_token
            else []
        )
        P = len(self.partitions)
        init = 1.0 / (P + 1)
        beta_p = np.full((P, heads), init)
        beta_g = np.full(heads, init)
        if learn_fusion:
            self.beta_parts = tn.parameter(beta_p, decay=False)
            self.beta_global = tn.parameter(beta_g, decay=False)
        else:
            self.beta_parts = Tensor(beta_p)
            self.beta_global = Tensor(beta_g)
        self.attention = ChannelAttention(channels, heads, rng, reduction) if use_attention else None
        self.alpha = tn.parameter(np.ones(1), decay=False) if residual_gate else None

    def fused(self, x: Tensor) -> Tensor:
        x_g = self.global_ssm(x)
        outs = [
            partition_forward(x, p, ssm, self.tokens[k] if self.tokens else None)
            for k, (p, ssm) in enumerate(zip(self.partitions, self.part_ssms))
        ]
        return fuse(outs, x_g, self.beta_parts, self.beta_global, self.partitions)

    def forward(self, x: Tensor) -> Tensor:
        T, V = x.shape[-3], x.shape[-2]
        if (T, V) != (self.T, self.V):
            raise ConfigError(f"PGM built for (T, V)=({self.T}, {self.V}), got ({T}, {V})")
        x_ssm = self.fused(x)
        res = x * self.alpha if self.alpha is not None else x
        out = x_ssm + res
        if self.attention is None:
            return out
        w = self.attention(x_ssm)
        if w.ndim == 2:
            w = w.reshape(w.shape[0], 1, 1, w.shape[1])
        return out * w


def pgm_param_count(
    channels: int,
    heads: int,
    part_sizes: Sequence[int],
    T: int,
    d_state: int,
    reduction: int = 4,
    scan_mode: str = "c2d",
    use_parts: bool = True,
    use_token: bool = True,
    learn_fusion: bool = True,
    use_attention: bool = True,
    residual_gate: bool = False,
    expand: int = 2,
    d_conv: int = 4,
) -> int:
    sizes = list(part_sizes) if use_parts else []
    ssm = c2dssm_param_count(channels, heads, d_state, scan_mode, expand, d_conv)
    n = ssm * (1 + len(sizes))
    if use_token:
        n += sum(T * s * channels for s in sizes)
    if learn_fusion:
        n += (len(sizes) + 1) * heads
    if use_attention:
        w = channels // heads
        r = w // reduction
        n += heads * (w * r + r + r * w + w)
    if residual_gate:
        n += 1
    return n


def pgm_macs(
    channels: int,
    heads: int,
    part_sizes: Sequence[int],
    T: int,
    V: int,
    d_state: int,
    reduction: int = 4,
    scan_mode: str = "c2d",
    use_parts: bool = True,
    use_attention: bool = True,
    expand: int = 2,
    d_conv: int = 4,
    **_ignored,
) -> int:
    sizes = list(part_sizes) if use_parts else []
    n = c2dssm_macs(channels, heads, T * V, d_state, scan_mode, expand, d_conv)
    n += sum(c2dssm_macs(channels, heads, T * s, d_state, scan_mode, expand, d_conv) for s in sizes)
    if use_attention:
        w = channels // heads
        n += heads * 2 * w * (w // reduction)
    return n
