"""Acceptance criteria, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL ...`` line (visible with ``pytest -s``
or in the captured output of ``pytest -v``).  The training criteria are marked ``slow``.
"""

import dataclasses
import time

import numpy as np
import pytest

from skelmamba import tensor as tn
from skelmamba.checks import COMPOSITE_TOL, PRIMITIVE_TOL, gradient_suite, scan_oracle
from skelmamba.cli import load_run_config, run
from skelmamba.data import synth_generate
from skelmamba.model import ModelConfig, SkelMamba, chunk_partitions, describe, flops_estimate, param_count
from skelmamba.scan2d import GROUP_DIRECTIONS, C2dSsm, ScanDirection, flatten_direction, flatten_order, split4, unflatten_direction
from skelmamba.ssm import SelectiveScan, SsmParams, discretize_zoh, scan_recurrent, selective_scan
from skelmamba.tensor import Tensor
from skelmamba.train import TrainConfig, component_variant, evaluate, stream_variant, train

SEEDS = (0, 1, 2)


def report(n, ok, detail):
    print(f"[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}", flush=True)
    return ok


# ------------------------------------------------------------------ 1
def test_criterion_1_scan_oracle():
    t0 = time.perf_counter()
    res = scan_oracle(cases=200, seed=1, max_state=8, max_len=64)
    dt = time.perf_counter() - t0
    ok = res.cases >= 100 and res.max_diff <= 1e-10 and dt < 5
    assert report(1, ok, f"cases={res.cases} max_diff={res.max_diff:.2e} time={dt:.2f}s")


# ------------------------------------------------------------------ 2
def _frozen_selective_case(rng, L=40, D=3, N=4):
    """Selective scan with input-independent B, C and constant step versus the LTI scan per channel."""
    A = -rng.uniform(0.2, 2.0, (D, N))
    B = rng.standard_normal(N)
    C = rng.standard_normal(N)
    delta = rng.uniform(0.05, 0.5)
    u = rng.standard_normal((L, D))
    y = selective_scan(
        Tensor(u), Tensor(np.full((L, D), delta)), Tensor(A), Tensor(np.broadcast_to(B, (L, N)).copy()),
        Tensor(np.broadcast_to(C, (L, N)).copy()), Tensor(np.zeros(D)),
    ).data
    ref = np.stack([scan_recurrent(discretize_zoh(SsmParams(A=A[d], B=B, C_proj=C, delta=delta)), C, u[:, d]) for d in range(D)], axis=-1)
    return np.abs(y - ref).max()


def test_criterion_2_selective_reduction():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = max(_frozen_selective_case(rng) for _ in range(50))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-10 and dt < 5
    assert report(2, ok, f"max_diff={worst:.2e} over 50 cases time={dt:.2f}s")


# ------------------------------------------------------------------ 3
def test_criterion_3_gradient_suite():
    t0 = time.perf_counter()
    results = gradient_suite("tiny", seed=0)
    dt = time.perf_counter() - t0
    names = {r.name for r in results}
    assert {"pgm_forward", "tsmb_forward", "model"} <= names
    prim = max(r.error for r in results if r.tolerance == PRIMITIVE_TOL)
    comp = {r.name: r.error for r in results if r.tolerance == COMPOSITE_TOL}
    ok = all(r.ok for r in results) and dt < 300
    detail = f"primitives max={prim:.2e} (tol 1e-6) " + " ".join(f"{k}={v:.2e}" for k, v in comp.items())
    assert report(3, ok, f"{detail} (tol 1e-4) time={dt:.1f}s")


# ------------------------------------------------------------------ 4
def test_criterion_4_structural_invariants():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    checks = {}
    x = rng.standard_normal((2, 3, 16))
    checks["split4_concat"] = np.array_equal(tn.concat(split4(Tensor(x)), axis=-1).data, x)
    good = True
    for direction in ScanDirection:
        g = rng.standard_normal((2, 4, 5, 3))
        seq = flatten_direction(Tensor(g), direction)
        order = flatten_order(4, 5, direction)
        good &= sorted(map(tuple, order.tolist())) == [(t, v) for t in range(4) for v in range(5)]
        good &= np.array_equal(unflatten_direction(seq, 4, 5, direction).data, g)
    checks["flatten_bijection"] = good

    cfg = ModelConfig(T_in=8, V=6, C=16, L=4, H=4, num_classes=3, tdown_after=(), d_state=2, k_t=3, partitions="chunks")
    model = SkelMamba(cfg, rng=0, zero_out=True)
    h = Tensor(rng.standard_normal((2, 8, 6, 16)))
    out = h
    for block in model.blocks:
        out = block(out)
    checks["zero_init_L4_identity"] = np.array_equal(out.data, h.data)

    m = C2dSsm(16, rng, heads=2, d_state=3)
    base = rng.standard_normal((1, 3, 4, 16))
    y0 = m(Tensor(base)).data
    ok_channel = True
    width = 16 // 2 // 4
    for head in range(2):
        for group in range(4):
            lo = head * 8 + group * width
            x2 = base.copy()
            x2[..., lo : lo + width] += 1.0
            changed = np.abs(m(Tensor(x2)).data - y0).reshape(-1, 16).max(0) > 0
            expect = np.zeros(16, bool)
            expect[lo : lo + width] = True
            ok_channel &= np.array_equal(changed, expect)
    checks["channel_head_locality"] = ok_channel
    dt = time.perf_counter() - t0
    ok = all(checks.values()) and dt < 60
    assert report(4, ok, " ".join(f"{k}={'ok' if v else 'BAD'}" for k, v in checks.items()) + f" time={dt:.2f}s")


# ------------------------------------------------------------------ 5
def test_criterion_5_direction_symmetry():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    m = C2dSsm(8, rng, d_state=4)
    for p in m.block.parameters():
        p.data[...] = p.data[:1]
    T, V = 6, 5
    x = np.broadcast_to(np.tile(rng.standard_normal(2), 4), (1, T, V, 8)).copy()
    y = m(Tensor(x))
    seqs = [flatten_direction(g, d).data for g, d in zip(split4(y), GROUP_DIRECTIONS)]
    worst = max(np.abs(s - seqs[0]).max() for s in seqs[1:])
    dt = time.perf_counter() - t0
    ok = worst <= 1e-12 and dt < 1
    assert report(5, ok, f"max group diff (scan order)={worst:.2e} time={dt:.3f}s")


# ------------------------------------------------------------------ 6
@pytest.mark.slow
def test_criterion_6_overfit():
    model_cfg, train_cfg = load_run_config("tiny")
    assert (model_cfg.T_in, model_cfg.V, model_cfg.C, model_cfg.L, model_cfg.H) == (16, 25, 32, 4, 4)
    data = synth_generate(4, 8, seed=7)
    model = SkelMamba(model_cfg, rng=0)
    t0 = time.perf_counter()
    recs = train(model, data, train_cfg, timestamps=False, callback=lambda r: r["train_acc"] == 1.0)
    dt = time.perf_counter() - t0
    ok = recs[-1]["train_acc"] == 1.0 and len(recs) <= 200 and dt < 600
    assert report(6, ok, f"train_acc={recs[-1]['train_acc']:.3f} after {len(recs)} epochs time={dt:.0f}s")


# ------------------------------------------------------------------ 7 / 8
@pytest.fixture(scope="session")
def synthetic_task():
    return synth_generate(4, 50, seed=7), synth_generate(4, 20, seed=7, start_id=10_000)


def _accuracies(model_cfg, train_cfg, task):
    train_set, test_set = task
    accs = []
    for seed in SEEDS:
        model = SkelMamba(model_cfg, rng=seed)
        train(model, train_set, dataclasses.replace(train_cfg, seed=seed), timestamps=False)
        accs.append(evaluate(model, test_set, train_cfg.modality).accuracy)
    return accs


@pytest.fixture(scope="session")
def desk_full(synthetic_task):
    model_cfg, train_cfg = load_run_config("desk")
    t0 = time.perf_counter()
    accs = _accuracies(model_cfg, train_cfg, synthetic_task)
    return accs, time.process_time(), time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_7_synthetic_classification(desk_full):
    accs, _, wall = desk_full
    mean = float(np.mean(accs))
    ok = mean >= 0.9 and wall < 3600
    assert report(7, ok, f"test acc per seed={[round(a, 4) for a in accs]} mean={mean:.4f} time={wall / 60:.1f}min")


@pytest.mark.slow
def test_criterion_8_ablation_trend(desk_full, synthetic_task):
    model_cfg, train_cfg = load_run_config("desk")
    full = float(np.mean(desk_full[0]))
    st_only = float(np.mean(_accuracies(stream_variant(model_cfg, "st"), train_cfg, synthetic_task)))
    one_d = float(np.mean(_accuracies(component_variant(model_cfg, "1d"), train_cfg, synthetic_task)))
    c2d = float(np.mean(_accuracies(component_variant(model_cfg, "c2d"), train_cfg, synthetic_task)))
    ok = full >= st_only and c2d >= one_d
    assert report(8, ok, f"full={full:.4f} >= s+t={st_only:.4f}; c2d={c2d:.4f} >= 1d={one_d:.4f}")


# ------------------------------------------------------------------ 9
def test_criterion_9_complexity():
    t0 = time.perf_counter()
    cfg = ModelConfig.paper()
    info = describe(cfg)
    params, macs = param_count(cfg), flops_estimate(cfg)
    dt = time.perf_counter() - t0
    ok = 5.5e6 <= params <= 8.2e6 and abs(macs / 9.7e9 - 1) <= 0.3 and dt < 1
    assert report(
        9, ok,
        f"C={info['C']} L={info['L']} H={info['H']} N={info['N']} params={params / 1e6:.3f}M "
        f"macs={macs / 1e9:.3f}G ({(macs / 9.7e9 - 1) * 100:+.1f}%) time={dt:.3f}s",
    )


# ------------------------------------------------------------------ 10
def test_criterion_10_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("SKELMAMBA_THREADS", "1")
    data = tmp_path / "d.json"
    assert run(["synth", "--out", str(data), "--classes", "4", "--per-class", "2", "--frames", "16"]) == 0
    cfg = tmp_path / "c.json"
    cfg.write_text('{"model": {"preset": "tiny", "T_in": 8, "C": 16, "L": 2, "tdown_after": [1], "d_state": 2},'
                   ' "train": {"epochs": 3, "warmup_epochs": 1, "batch_size": 4}}')
    logs = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        assert run(["train", "--config", str(cfg), "--data", str(data), "--val", str(data), "--out", str(out), "--seed", "11", "--no-timestamp"]) == 0
        logs.append((out / "metrics_joint.jsonl").read_bytes())
    ok = logs[0] == logs[1] and len(logs[0]) > 0
    assert report(10, ok, f"metrics logs byte-identical ({len(logs[0])} bytes, 3 epochs)")
