"""The full network: embedding, time-space token, block stack with temporal downsampling, pooled classifier.

Also parameter and multiply-accumulate accounting and the checkpoint format.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import tensor as tn
from .blocks import TSMB, BatchNorm, BlockConfig, PgmOptions, TDown, tdown_length, tsmb_macs, tsmb_param_count
from .errors import ConfigError, DomainError, NumericError, ParseError, SchemaError
from .nn import Linear, Module
from .partgroup import PartitionSpec, load_partitions, partitions_from_obj
from .tensor import Tensor

MAGIC = b"SKMB1"
CHECKPOINT_VERSION = 1


def chunk_partitions(V: int) -> list[PartitionSpec]:
    """Three contiguous joint ranges and their pairwise unions, for skeletons without a bundled map."""
    if V < 3:
        return [PartitionSpec("all", tuple(range(V)))]
    edges = np.linspace(0, V, 4).round().astype(int)
    a, b, c = (tuple(range(edges[i], edges[i + 1])) for i in range(3))
    return [
        PartitionSpec("p0", a),
        PartitionSpec("p1", b),
        PartitionSpec("p2", c),
        PartitionSpec("p0_p1", a + b),
        PartitionSpec("p0_p2", a + c),
        PartitionSpec("p2_p1", c + b),
    ]


@dataclass
class ModelConfig:
    V: int = 25
    C_in: int = 3
    C: int = 32
    L: int = 4
    H: int = 4
    tdown_after: tuple[int, ...] = (1,)
    num_classes: int = 4
    T_in: int = 32
    k_t: int = 7
    ffn_ratio: int = 4
    d_state: int = 8
    partitions: Any = "ntu25"
    streams: str = "smt"
    scan_mode: str = "c2d"
    use_parts: bool = True
    use_token: bool = True
    learn_fusion: bool = True
    use_attention: bool = True
    residual_gate: bool = False
    attn_reduction: int = 4
    expand: int = 2
    d_conv: int = 4
    eps: float = 1e-5

    def __post_init__(self):
        self.tdown_after = tuple(int(i) for i in self.tdown_after)

    # presets -------------------------------------------------------------
    @classmethod
    def tiny(cls, **kw) -> ModelConfig:
        base = dict(T_in=16, C=32, L=4, H=4, tdown_after=(2,), d_state=4, k_t=3)
        return cls(**{**base, **kw})

    @classmethod
    def desk(cls, **kw) -> ModelConfig:
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> ModelConfig:
        base = dict(T_in=64, C=256, L=5, H=8, tdown_after=(4,), d_state=32, k_t=7, num_classes=60)
        return cls(**{**base, **kw})

    PRESETS = ("tiny", "desk", "paper")

    @classmethod
    def preset(cls, name: str, **kw) -> ModelConfig:
        if name not in cls.PRESETS:
            raise ConfigError(f"unknown model preset {name!r}; choose from {cls.PRESETS}")
        return getattr(cls, name)(**kw)

    # derived -------------------------------------------------------------
    def block_config(self) -> BlockConfig:
        pgm = PgmOptions(
            d_state=self.d_state,
            reduction=self.attn_reduction,
            scan_mode=self.scan_mode,
            use_parts=self.use_parts,
            use_token=self.use_token,
            learn_fusion=self.learn_fusion,
            use_attention=self.use_attention,
            residual_gate=self.residual_gate,
            expand=self.expand,
            d_conv=self.d_conv,
        )
        return BlockConfig(self.C, self.H, self.k_t, self.ffn_ratio, self.eps, self.streams, pgm)

    def partition_specs(self) -> list[PartitionSpec]:
        p = self.partitions
        if isinstance(p, str):
            if p == "chunks":
                return chunk_partitions(self.V)
            return load_partitions(p, self.V)
        return partitions_from_obj(p, self.V)

    def stage_lengths(self) -> list[int]:
        """Temporal length seen by each block."""
        lengths, T = [], self.T_in
        for i in range(self.L):
            lengths.append(T)
            if i + 1 in self.tdown_after:
                T = tdown_length(T)
        return lengths

    def final_length(self) -> int:
        T = self.T_in
        for _ in self.tdown_after:
            T = tdown_length(T)
        return T

    def validate(self) -> None:
        for name in ("V", "C_in", "C", "L", "H", "num_classes", "T_in", "d_state"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}={getattr(self, name)} must be positive")
        td = self.tdown_after
        if any(b <= a for a, b in zip(td, td[1:])):
            raise ConfigError(f"tdown_after={list(td)} must be strictly increasing")
        if td and (td[0] < 1 or td[-1] >= self.L):
            raise ConfigError(f"tdown_after entries must lie in [1, L) with L={self.L}, got {list(td)}")
        if self.T_in % (2 ** len(td)):
            raise ConfigError(f"T_in={self.T_in} not divisible by 2^{len(td)}")
        self.block_config().validate()
        if (self.C // 2 // (self.H // 4)) % self.attn_reduction:
            raise ConfigError(f"attention reduction {self.attn_reduction} does not divide PGM head width")
        self.partition_specs()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["tdown_after"] = list(self.tdown_after)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SchemaError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class SkelMamba(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator | int = 0, zero_out: bool = False):
        config.validate()
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.config = config
        C, V = config.C, config.V
        parts = config.partition_specs()
        self.input_bn = BatchNorm(V * config.C_in)
        self.embed1 = Linear(config.C_in, C, rng)
        self.embed2 = Linear(C, C, rng)
        self.embed3 = Linear(C, C, rng)
        self.token = tn.parameter(0.02 * rng.standard_normal((config.T_in, V, C)))
        bcfg = config.block_config()
        self.blocks = [TSMB(bcfg, T, V, parts, rng, zero_out) for T in config.stage_lengths()]
        self.tdowns = [TDown(C, rng) for _ in config.tdown_after]
        self.head = Linear(C, config.num_classes, rng)

    def embed(self, x: Tensor) -> Tensor:
        T, V = x.shape[-3], x.shape[-2]
        cfg = self.config
        if T != cfg.T_in:
            raise DomainError(f"input has {T} frames but the model expects T_in={cfg.T_in}; resample first")
        if V != cfg.V or x.shape[-1] != cfg.C_in:
            raise ConfigError(f"input joints/coords ({V}, {x.shape[-1]}) do not match ({cfg.V}, {cfg.C_in})")
        # per (joint, coordinate) standardization; raw coordinates are dominated by each joint's mean position
        flat = x.reshape(x.shape[:-2] + (V * x.shape[-1],))
        x = self.input_bn(flat).reshape(x.shape)
        h = self.embed3(tn.gelu(self.embed2(tn.gelu(self.embed1(x)))))
        return h + self.token

    def features(self, x) -> Tensor:
        """Pooled representation ``[B, C]`` before the classifier."""
        x = tn.as_tensor(x)
        h = self.embed(x)
        down = iter(self.tdowns)
        for i, block in enumerate(self.blocks):
            try:
                h = block(h)
            except NumericError as exc:
                raise NumericError(f"block {i}: {exc}") from exc
            if i + 1 in self.config.tdown_after:
                h = next(down)(h)
        return h.mean(axis=(-3, -2))

    def forward(self, x) -> Tensor:
        return self.head(self.features(x))


# --------------------------------------------------------------- accounting
def _part_sizes(config: ModelConfig) -> list[int]:
    return [len(p.indices) for p in config.partition_specs()]


def param_count(config: ModelConfig) -> int:
    """Exact trainable parameter count from the layer inventory."""
    C, V = config.C, config.V
    sizes = _part_sizes(config)
    bcfg = config.block_config()
    n = 2 * V * config.C_in
    n += config.C_in * C + C + 2 * (C * C + C)
    n += config.T_in * V * C
    n += sum(tsmb_param_count(bcfg, T, V, sizes) for T in config.stage_lengths())
    n += len(config.tdown_after) * (3 * C + 2 * C)
    n += C * config.num_classes + config.num_classes
    return n


def flops_estimate(config: ModelConfig) -> int:
    """Multiply-accumulate count of one forward pass for a single sample at ``(T_in, V)``."""
    C, V = config.C, config.V
    sizes = _part_sizes(config)
    bcfg = config.block_config()
    n = config.T_in * V * (config.C_in + config.C_in * C + 2 * C * C)
    T = config.T_in
    for i in range(config.L):
        n += tsmb_macs(bcfg, T, V, sizes)
        if i + 1 in config.tdown_after:
            T = tdown_length(T)
            n += T * V * C * 3
    n += C * config.num_classes
    return n


# --------------------------------------------------------------- checkpoint
def save_checkpoint(path: str | Path, model: SkelMamba, meta: dict | None = None) -> None:
    """Write ``MAGIC | uint64 header length | JSON header | raw little-endian payloads``."""
    state = model.state_dict()
    manifest, payloads, offset = [], [], 0
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = {
        "format": MAGIC.decode(),
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "meta": meta or {},
        "tensors": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[: len(MAGIC)] != MAGIC:
        raise ParseError(f"{path}: bad magic at byte 0, expected {MAGIC!r}")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise ParseError(f"{path}: truncated header length at byte {pos}")
    (hlen,) = struct.unpack("<Q", data[pos : pos + 8])
    pos += 8
    try:
        header = json.loads(data[pos : pos + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: malformed JSON header at byte {pos}: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise SchemaError(f"{path}: unsupported checkpoint version {header.get('version')}")
    base = pos + hlen
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(data):
            raise ParseError(f"{path}: payload of {entry['name']} runs past end of file at byte {len(data)}")
        arr = np.frombuffer(data[start:end], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return header, tensors


def load_checkpoint(path: str | Path) -> tuple[SkelMamba, dict]:
    header, tensors = read_checkpoint(path)
    config = ModelConfig.from_dict(header["config"])
    model = SkelMamba(config, rng=0)
    model.load_state_dict(tensors)
    return model, header.get("meta", {})


def describe(config: ModelConfig) -> dict:
    return {
        "C": config.C,
        "L": config.L,
        "H": config.H,
        "N": config.d_state,
        "T_in": config.T_in,
        "tdown_after": list(config.tdown_after),
        "params": param_count(config),
        "macs": flops_estimate(config),
    }


def stage_shapes(config: ModelConfig) -> Sequence[tuple[int, int, int]]:
    return [(T, config.V, config.C) for T in config.stage_lengths()]
