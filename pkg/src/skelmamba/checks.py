"""Self-checks shared by the command line and the test suite: gradient suite and scan oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .blocks import TSMB, BlockConfig, PgmOptions
from .errors import ConfigError
from .model import ModelConfig, SkelMamba, chunk_partitions
from .partgroup import PartGroupedMamba, PartitionSpec
from .scan2d import C2dSsm
from .ssm import DiscreteSsm, SsmParams, causal_conv1d, discretize_zoh, kernel_convolve, scan_recurrent, selective_scan
from .tensor import Tensor, max_param_error

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4
COMPOSITE_STEP = 3e-2


@dataclass
class GradResult:
    name: str
    error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.error <= self.tolerance


def _weighted_sum(y: Tensor, w: np.ndarray) -> Tensor:
    return (y * w).sum()


def _leaf(rng, *shape, low=None, high=None):
    data = rng.uniform(low, high, shape) if low is not None else rng.standard_normal(shape)
    return tn.parameter(data)


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    cases = {}

    def add_case(name, fn, leaves, out_shape):
        w = rng.standard_normal(out_shape)
        cases[name] = (lambda: _weighted_sum(fn(), w), leaves)

    a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
    add_case("add", lambda: a + b, [a, b], (3, 4))
    a2, b2 = _leaf(rng, 3, 4), _leaf(rng, 3, 1)
    add_case("mul", lambda: a2 * b2, [a2, b2], (3, 4))
    n, d = _leaf(rng, 3, 4), _leaf(rng, 3, 4, low=0.5, high=2.0)
    add_case("div", lambda: n / d, [n, d], (3, 4))
    p = _leaf(rng, 5, low=0.5, high=2.0)
    add_case("power", lambda: p**2.5, [p], (5,))
    m1, m2 = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    add_case("matmul", lambda: m1 @ m2, [m1, m2], (2, 3, 5))
    m3, m4 = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 2)
    add_case("matmul_batched", lambda: m3 @ m4, [m3, m4], (2, 3, 2))
    for name, fn in (("exp", tn.exp), ("sin", tn.sin), ("sigmoid", tn.sigmoid), ("silu", tn.silu),
                     ("gelu", tn.gelu), ("softplus", tn.softplus)):
        x = _leaf(rng, 7)
        add_case(name, (lambda f=fn, x=x: f(x)), [x], (7,))
    lg = _leaf(rng, 6, low=0.2, high=3.0)
    add_case("log", lambda: tn.log(lg), [lg], (6,))
    r = _leaf(rng, 2, 3, 4)
    add_case("sum", lambda: r.sum(axis=1), [r], (2, 4))
    add_case("mean", lambda: r.mean(axis=(0, 2)), [r], (3,))
    add_case("reshape_transpose", lambda: r.reshape(6, 4).transpose((1, 0)), [r], (4, 6))
    add_case("flip", lambda: tn.flip(r, 1), [r], (2, 3, 4))
    add_case("getitem", lambda: r[:, 1:, ::2], [r], (2, 2, 2))
    add_case("take", lambda: tn.take(r, [2, 0], axis=1), [r], (2, 2, 4))
    add_case("scatter", lambda: tn.scatter(r, [4, 0, 2], axis=1, size=5), [r], (2, 5, 4))
    c1, c2 = _leaf(rng, 2, 3), _leaf(rng, 2, 2)
    add_case("concat", lambda: tn.concat([c1, c2], axis=1), [c1, c2], (2, 5))
    add_case("stack", lambda: tn.stack([c1, c1 * 2.0], axis=0), [c1], (2, 2, 3))
    x, g, bb = _leaf(rng, 3, 5), _leaf(rng, 5), _leaf(rng, 5)
    add_case("layernorm", lambda: tn.layernorm(x, g, bb), [x, g, bb], (3, 5))
    xb, gb2, bb2 = _leaf(rng, 4, 3, 2), _leaf(rng, 2), _leaf(rng, 2)
    add_case("batch_norm", lambda: tn.batch_norm(xb, gb2, bb2), [xb, gb2, bb2], (4, 3, 2))
    ls = _leaf(rng, 3, 4)
    add_case("log_softmax", lambda: tn.log_softmax(ls), [ls], (3, 4))
    cx, cw, cb = _leaf(rng, 2, 4, 7), _leaf(rng, 4, 2, 3), _leaf(rng, 4)
    add_case("conv1d_grouped", lambda: tn.conv1d_grouped(cx, cw, cb, groups=2, padding=1), [cx, cw, cb], (2, 4, 7))
    add_case("conv1d_strided", lambda: tn.conv1d_grouped(cx, cw, None, groups=2, stride=2, padding=1), [cx, cw], (2, 4, 4))
    qx, qw, qb = _leaf(rng, 2, 2, 6, 3), _leaf(rng, 2, 3, 4), _leaf(rng, 2, 3)
    add_case("causal_conv1d", lambda: causal_conv1d(qx, qw, qb), [qx, qw, qb], (2, 2, 6, 3))
    G, B, L, D, N = 2, 2, 6, 3, 4
    u = _leaf(rng, G, B, L, D)
    dl = _leaf(rng, G, B, L, D, low=0.05, high=0.8)
    A = tn.parameter(-rng.uniform(0.3, 2.0, (G, D, N)))
    Bm, Cm, Dk = _leaf(rng, G, B, L, N), _leaf(rng, G, B, L, N), _leaf(rng, G, D)
    add_case("selective_scan", lambda: selective_scan(u, dl, A, Bm, Cm, Dk), [u, dl, A, Bm, Cm, Dk], (G, B, L, D))
    return cases


def _composite_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    cases = {}

    ssm = C2dSsm(8, rng, heads=1, d_state=3)
    x1 = tn.parameter(rng.standard_normal((2, 3, 4, 8)))
    w1 = rng.standard_normal((2, 3, 4, 8))
    cases["c2dssm"] = (lambda: _weighted_sum(ssm(x1), w1), [x1] + ssm.parameters())

    parts = [PartitionSpec("a", (0, 1)), PartitionSpec("b", (3, 2, 1))]
    pgm = PartGroupedMamba(8, 1, parts, 3, 4, rng, d_state=3, reduction=2)
    x2 = tn.parameter(rng.standard_normal((2, 3, 4, 8)))
    w2 = rng.standard_normal((2, 3, 4, 8))
    cases["pgm_forward"] = (lambda: _weighted_sum(pgm(x2), w2), [x2] + pgm.parameters())

    cfg = BlockConfig(16, 4, k_t=3, pgm=PgmOptions(d_state=3, reduction=2))
    block = TSMB(cfg, 3, 5, chunk_partitions(5), rng)
    x3 = tn.parameter(rng.standard_normal((2, 3, 5, 16)))
    w3 = rng.standard_normal((2, 3, 5, 16))
    cases["tsmb_forward"] = (lambda: _weighted_sum(block(x3), w3), [x3] + block.parameters())

    mcfg = ModelConfig(T_in=8, V=6, C=16, L=2, H=4, num_classes=3, tdown_after=(1,), d_state=3, k_t=3,
                       partitions="chunks", attn_reduction=2)
    model = SkelMamba(mcfg, rng)
    x4 = rng.standard_normal((3, 8, 6, 3))
    w4 = rng.standard_normal((3, 3))
    cases["model"] = (lambda: _weighted_sum(model(x4), w4), model.parameters())
    return cases


def gradient_suite(scale: str = "tiny", seed: int = 0, sample: int | None = 4) -> list[GradResult]:
    """Finite-difference checks at 64-bit for every primitive and the composite layers.

    ``sample`` caps the number of coordinates probed per composite leaf tensor.
    """
    if scale != "tiny":
        raise ConfigError(f"gradient suite supports scale 'tiny' only, got {scale!r}")
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, leaves) in _primitive_cases(rng).items():
        err = max_param_error(fn, leaves, h=1e-4, stencil=5)
        results.append(GradResult(name, err, PRIMITIVE_TOL))
    # Composite losses mix O(1) outputs with gradient components near 1e-9 (for
    # example through small timescales); a wide sixth-order stencil keeps the
    # difference quotient's rounding noise below those components.
    for name, (fn, leaves) in _composite_cases(rng).items():
        err = max_param_error(fn, leaves, h=COMPOSITE_STEP, stencil=7, sample=sample, rng=np.random.default_rng(seed))
        results.append(GradResult(name, err, COMPOSITE_TOL))
    return results


# ---------------------------------------------------------------- oracle
@dataclass
class OracleResult:
    cases: int
    max_diff: float


def random_lti(rng: np.random.Generator, max_state: int = 8) -> tuple[DiscreteSsm, np.ndarray]:
    n = int(rng.integers(1, max_state + 1))
    if rng.uniform() < 0.5:
        A = -rng.uniform(0.1, 3.0, n)
    else:
        M = rng.standard_normal((n, n))
        A = -(M @ M.T) / n - 0.1 * np.eye(n)
    p = SsmParams(A=A, B=rng.standard_normal(n), C_proj=rng.standard_normal(n), delta=rng.uniform(0.01, 0.5))
    return discretize_zoh(p), p.C_proj


def scan_oracle(cases: int = 100, seed: int = 0, max_state: int = 8, max_len: int = 64) -> OracleResult:
    """Recurrent scan versus kernel convolution over random stable time-invariant systems."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        d, c = random_lti(rng, max_state)
        x = rng.standard_normal(int(rng.integers(1, max_len + 1)))
        diff = np.abs(scan_recurrent(d, c, x) - kernel_convolve(d, c, x)).max()
        worst = max(worst, float(diff))
    return OracleResult(cases, worst)
