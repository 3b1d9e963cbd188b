import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skelmamba import tensor as tn
from skelmamba.errors import ConfigError
from skelmamba.scan2d import (
    GROUP_DIRECTIONS,
    C2dSsm,
    ScanDirection,
    c2dssm_param_count,
    flatten_direction,
    flatten_order,
    split4,
    unflatten_direction,
)
from skelmamba.tensor import Tensor


def test_order_time_outer():
    assert flatten_order(2, 3, ScanDirection.TtoS).tolist() == [[0, 0], [0, 1], [0, 2], [1, 0], [1, 1], [1, 2]]


def test_order_joint_outer():
    assert flatten_order(2, 3, ScanDirection.StoT).tolist() == [[0, 0], [1, 0], [0, 1], [1, 1], [0, 2], [1, 2]]


def test_reversed_orders():
    for fwd, rev in ((ScanDirection.TtoS, ScanDirection.TtoS_rev), (ScanDirection.StoT, ScanDirection.StoT_rev)):
        assert flatten_order(3, 4, rev).tolist() == flatten_order(3, 4, fwd)[::-1].tolist()


@settings(max_examples=40)
@given(st.integers(1, 6), st.integers(1, 6), st.sampled_from(list(ScanDirection)), st.integers(1, 3))
def test_flatten_unflatten_bijection(T, V, direction, c):
    x = np.arange(2 * T * V * c, dtype=np.float64).reshape(2, T, V, c)
    seq = flatten_direction(Tensor(x), direction)
    assert seq.shape == (2, T * V, c)
    order = flatten_order(T, V, direction)
    np.testing.assert_array_equal(seq.data, x[:, order[:, 0], order[:, 1]])
    np.testing.assert_array_equal(unflatten_direction(seq, T, V, direction).data, x)


def test_split4_groups():
    x = Tensor(np.arange(8.0))
    assert [p.data.tolist() for p in split4(x)] == [[0, 1], [2, 3], [4, 5], [6, 7]]


def test_split4_rejects_indivisible():
    with pytest.raises(ConfigError, match="C=6"):
        split4(Tensor(np.zeros(6)))


@settings(max_examples=20)
@given(st.integers(1, 6), st.integers(0, 2**31))
def test_split4_concat_roundtrip(k, seed):
    x = np.random.default_rng(seed).standard_normal((3, 4 * k))
    np.testing.assert_array_equal(tn.concat(split4(Tensor(x)), axis=-1).data, x)


def test_direction_assignment_is_fixed():
    assert GROUP_DIRECTIONS == (ScanDirection.TtoS, ScanDirection.StoT, ScanDirection.TtoS_rev, ScanDirection.StoT_rev)


def test_shape_preserved_and_param_count():
    rng = np.random.default_rng(0)
    m = C2dSsm(16, rng, heads=2, d_state=3)
    y = m(Tensor(rng.standard_normal((2, 5, 4, 16))))
    assert y.shape == (2, 5, 4, 16)
    assert m.num_parameters() == c2dssm_param_count(16, 2, 3)


def _tie(m):
    """Copy group 0's block parameters into every group."""
    for p in m.block.parameters():
        p.data[...] = p.data[:1]


def test_tied_groups_on_constant_input_agree():
    rng = np.random.default_rng(1)
    m = C2dSsm(8, rng, d_state=4)
    _tie(m)
    T, V = 5, 6
    # identical per-group channel pattern, constant over (T, V)
    x = np.broadcast_to(np.tile([0.3, -1.2], 4), (1, T, V, 8)).copy()
    y = m(Tensor(x))
    # each group sees the same constant sequence; compare in its own visiting order
    seqs = [flatten_direction(g, d).data for g, d in zip(split4(y), GROUP_DIRECTIONS)]
    for s in seqs[1:]:
        assert np.abs(s - seqs[0]).max() <= 1e-12


def test_channel_locality_between_groups():
    rng = np.random.default_rng(2)
    m = C2dSsm(8, rng, d_state=3)
    x = rng.standard_normal((1, 3, 4, 8))
    y0 = m(Tensor(x)).data
    x2 = x.copy()
    x2[..., 2:4] += 1.0  # group 1 only
    y1 = m(Tensor(x2)).data
    changed = np.abs(y1 - y0).reshape(-1, 8).max(axis=0) > 0
    assert changed.tolist() == [False, False, True, True, False, False, False, False]


def test_first_direction_is_causal_in_scan_order():
    rng = np.random.default_rng(3)
    m = C2dSsm(4, rng, d_state=2)
    T, V = 3, 4
    x = rng.standard_normal((1, T, V, 4))
    y0 = m(Tensor(x)).data
    x2 = x.copy()
    x2[0, 2, 1, 0] += 1.0  # group 0 scans time-outer: positions after (2,1) only
    y1 = m(Tensor(x2)).data
    diff = np.abs(y1 - y0)[0, :, :, 0] > 0
    order = flatten_order(T, V, ScanDirection.TtoS)
    pos = {tuple(p): i for i, p in enumerate(order.tolist())}
    for (t, v), i in pos.items():
        if i < pos[(2, 1)]:
            assert not diff[t, v]


def test_1d_mode_uses_one_group_per_head():
    rng = np.random.default_rng(4)
    m = C2dSsm(8, rng, heads=2, mode="1d", d_state=2)
    assert m.groups == 2 and all(d is ScanDirection.TtoS for d in m.directions)
    assert m(Tensor(rng.standard_normal((1, 2, 3, 8)))).shape == (1, 2, 3, 8)
    with pytest.raises(ConfigError):
        C2dSsm(8, rng, mode="zigzag")
