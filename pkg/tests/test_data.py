import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skelmamba.data import (
    SYNTH_CLASSES,
    Dataset,
    SkeletonSequence,
    SkeletonTopology,
    arm_variance,
    derive_bones,
    derive_motion,
    ensemble,
    load_dataset,
    load_topology,
    normalize,
    prepare_arrays,
    resample,
    save_dataset,
    synth_generate,
)
from skelmamba.errors import ConfigError, DimensionError, DomainError, ParseError, SchemaError

finite = st.floats(-1e3, 1e3, allow_nan=False)


@pytest.fixture(scope="module")
def synth():
    return synth_generate(4, 50, seed=7)


def test_synth_contract(synth):
    assert len(synth) == 200
    assert synth.classes == list(SYNTH_CLASSES)
    assert all(s.frames.shape == (64, 25, 3) for s in synth.samples)
    assert np.bincount(synth.labels()).tolist() == [50] * 4
    synth.validate()


def test_synth_is_deterministic(synth):
    again = synth_generate(4, 50, seed=7)
    for a, b in zip(synth.samples, again.samples):
        assert a.id == b.id and a.label == b.label
        np.testing.assert_array_equal(a.frames, b.frames)
    other = synth_generate(4, 50, seed=8)
    assert not np.array_equal(other.samples[0].frames, synth.samples[0].frames)


def test_synth_samples_keyed_by_id(synth):
    tail = synth_generate(4, 10, seed=7, start_id=4)
    np.testing.assert_array_equal(tail.samples[0].frames, synth.samples[4].frames)


def test_reduced_arm_swing_variance(synth):
    topo = synth.topology
    var = {k: np.mean([arm_variance(s.frames, topo) for s in synth.samples if s.label == k]) for k in range(4)}
    assert var[1] < 0.25 * var[0]


def test_synth_rejects_unknown_class_count():
    with pytest.raises(ConfigError):
        synth_generate(5, 2)


def test_json_roundtrip_is_bit_exact(tmp_path):
    ds = synth_generate(2, 2, seed=3, T=5)
    ds.samples[0].frames[0, 0, 0] = 0.1 + 0.2  # a value without a short decimal form
    path = tmp_path / "d.json"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.classes == ds.classes and back.topology == ds.topology
    for a, b in zip(ds.samples, back.samples):
        np.testing.assert_array_equal(a.frames, b.frames)
        assert (a.label, a.id) == (b.label, b.id)


def test_parse_error_reports_position(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"version": 1,\n  "classes": [}')
    with pytest.raises(ParseError, match=r":2:\d+ \(byte \d+\)"):
        load_dataset(path)


def test_schema_errors(tmp_path):
    ds = synth_generate(2, 1, seed=0, T=3)
    doc = ds.to_dict()
    doc["samples"][0]["label"] = 5
    path = tmp_path / "d.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(SchemaError, match="label 5"):
        load_dataset(path)
    doc = ds.to_dict()
    doc["version"] = 2
    path.write_text(json.dumps(doc))
    with pytest.raises(SchemaError, match="version"):
        load_dataset(path)
    doc = ds.to_dict()
    del doc["samples"][1]["frames"]
    path.write_text(json.dumps(doc))
    with pytest.raises(SchemaError, match="#1"):
        load_dataset(path)


def test_topology_cycle_rejected():
    with pytest.raises(SchemaError, match="cycle"):
        SkeletonTopology((0, 2, 1)).validate()


def test_resample_examples():
    f = np.arange(3.0).reshape(3, 1, 1)
    np.testing.assert_allclose(resample(f, 5).reshape(-1), [0, 0.5, 1, 1.5, 2])
    np.testing.assert_array_equal(resample(f, 3), f)
    with pytest.raises(DomainError):
        resample(f[:1], 4)
    with pytest.raises(ConfigError):
        resample(f, 4, train=True)


@settings(max_examples=30)
@given(st.integers(2, 30), st.integers(2, 40), st.integers(0, 2**31))
def test_resample_eval_preserves_endpoints(T, T_target, seed):
    f = np.random.default_rng(seed).standard_normal((T, 2, 3))
    out = resample(f, T_target)
    assert out.shape == (T_target, 2, 3)
    np.testing.assert_allclose(out[0], f[0], rtol=1e-12)
    np.testing.assert_allclose(out[-1], f[-1], rtol=1e-12, atol=1e-12)


def test_resample_train_stays_within_range():
    f = np.arange(10.0).reshape(10, 1, 1)
    out = resample(f, 6, train=True, rng=np.random.default_rng(0)).reshape(-1)
    assert out.min() >= 0 and out.max() <= 9 and np.all(np.diff(out) > 0)
    assert out[-1] - out[0] >= 0.8 * 9 - 1e-12


def test_bones_two_joint_chain():
    topo = SkeletonTopology((0, 0))
    f = np.array([[[1.0, 2.0, 3.0], [4.0, 6.0, 3.0]]])
    np.testing.assert_array_equal(derive_bones(f, topo), [[[0, 0, 0], [3, 4, 0]]])
    with pytest.raises(DimensionError):
        derive_bones(np.zeros((1, 3, 3)), topo)


def test_root_bone_is_zero(synth):
    topo = synth.topology
    bones = derive_bones(synth.samples[0].frames, topo)
    roots = [j for j, p in enumerate(topo.parents) if p == j]
    assert roots and np.all(bones[:, roots] == 0)


def test_static_sequence_has_no_motion():
    f = np.broadcast_to(np.random.default_rng(0).standard_normal((1, 4, 3)), (5, 4, 3))
    assert np.all(derive_motion(f) == 0)


@settings(max_examples=30)
@given(st.integers(0, 2**31), finite, finite, finite)
def test_translation_invariance(seed, dx, dy, dz):
    topo = load_topology()
    f = np.random.default_rng(seed).standard_normal((4, 25, 3))
    shifted = f + np.array([dx, dy, dz])
    np.testing.assert_allclose(derive_motion(shifted), derive_motion(f), atol=1e-9)
    np.testing.assert_allclose(derive_bones(shifted, topo), derive_bones(f, topo), atol=1e-9)


def test_normalize_centers_and_scales():
    topo = load_topology()
    f = synth_generate(1, 1, seed=2).samples[0].frames
    g = normalize(3.0 * f + 5.0, topo)
    np.testing.assert_allclose(g[0, 0], 0.0, atol=1e-12)
    np.testing.assert_allclose(g, normalize(f, topo), atol=1e-12)
    a, b = topo.torso
    assert np.median(np.linalg.norm(g[:, a] - g[:, b], axis=-1)) == pytest.approx(1.0)


def test_prepare_arrays_modalities(synth):
    small = synth.subset(range(3))
    X, y = prepare_arrays(small, 16, "bone")
    assert X.shape == (3, 16, 25, 3) and X.dtype == np.float32
    assert y.tolist() == [0, 1, 2]
    A = prepare_arrays(small, 16, train=True, seed=1, epoch=2)[0]
    B = prepare_arrays(small.subset([2, 1, 0]), 16, train=True, seed=1, epoch=2)[0]
    np.testing.assert_array_equal(A[::-1], B)  # per-sample crops do not depend on order
    with pytest.raises(ConfigError):
        prepare_arrays(small, 16, "depth")


def test_ensemble_examples():
    np.testing.assert_allclose(ensemble([[[0.8, 0.2]], [[0.4, 0.6]]]), [[0.6, 0.4]])
    s = np.array([[0.1, 0.9], [0.5, 0.5]])
    np.testing.assert_array_equal(ensemble([s]), s)
    np.testing.assert_array_equal(ensemble([s, s]), s)
    with pytest.raises(DimensionError):
        ensemble([s, s[:1]])
    with pytest.raises(DimensionError):
        ensemble([])


def test_sample_validation():
    with pytest.raises(SchemaError, match="non-finite"):
        SkeletonSequence(np.full((2, 1, 3), np.nan), 0).validate()
    ds = Dataset(SkeletonTopology((0,)), ["a"], [SkeletonSequence(np.zeros((2, 2, 3)), 0)])
    with pytest.raises(SchemaError, match="joints"):
        ds.validate()
