import numpy as np
import pytest

from sparsetrain.errors import IntegrityError, ShapeError
from sparsetrain.sparse_kernels import (MacStats, effective_mac_bound, sparse_conv_backward_data,
                                        sparse_conv_forward, sparse_weight_grad)
from sparsetrain.sparsity_index import OutputBitmap, encode_tc_offsets
from sparsetrain.tensor_core import (LayerSpec, conv2d_backward_data, conv2d_forward, conv2d_weight_grad,
                                     mac_count, relu_backward)

from conftest import rel_err, sparse_tensor

SPECS = [
    LayerSpec((4, 6, 6), (3, 4, 3, 3), padding=1),
    LayerSpec((5, 7, 7), (2, 5, 3, 3), stride=2, padding=1),
    LayerSpec((3, 5, 5), (4, 3, 1, 1)),
    LayerSpec((40, 5, 5), (3, 40, 3, 3)),
]


def test_macstats_partition():
    with pytest.raises(IntegrityError):
        MacStats(1, 1, 1, 4)
    s = MacStats(2, 1, 1, 4) + MacStats.dense(3)
    assert s == MacStats(5, 1, 1, 7)


@pytest.mark.parametrize("spec", SPECS, ids=str)
def test_forward_matches_dense(rng, spec):
    x = sparse_tensor(rng, spec.in_shape, 0.5)
    w = rng.standard_normal(spec.filter_shape).astype(np.float32)
    y, st = sparse_conv_forward(x, encode_tc_offsets(x), w, spec)
    assert rel_err(y, conv2d_forward(x, w, spec)) <= 1e-5
    assert st.dense_total == mac_count(spec) and st.macs_skipped_output == 0


def test_forward_dense_input(rng):
    spec = SPECS[0]
    x = rng.uniform(0.1, 1, spec.in_shape).astype(np.float32)
    w = rng.standard_normal(spec.filter_shape).astype(np.float32)
    _, st = sparse_conv_forward(x, encode_tc_offsets(x), w, spec)
    # padding taps never reach an indexed input
    spec0 = LayerSpec((4, 6, 6), (3, 4, 3, 3))
    _, st0 = sparse_conv_forward(x, encode_tc_offsets(x), w, spec0)
    assert st0 == MacStats.dense(mac_count(spec0))
    _, dense = sparse_conv_forward(x, None, w, spec)
    assert dense == MacStats.dense(mac_count(spec))
    assert st.macs_performed + st.macs_skipped_input == dense.dense_total


def test_forward_half_zero_pointwise(rng):
    spec = LayerSpec((8, 4, 4), (5, 8, 1, 1))
    x = np.ones(spec.in_shape, np.float32)
    x[::2] = 0
    _, st = sparse_conv_forward(x, encode_tc_offsets(x), rng.standard_normal(spec.filter_shape), spec)
    assert st.macs_performed * 2 == st.dense_total


def test_forward_stale_offsets(rng):
    spec = SPECS[0]
    x = sparse_tensor(rng, spec.in_shape, 0.5)
    om = encode_tc_offsets(x)
    w = np.ones(spec.filter_shape, np.float32)
    y = x.copy()
    y[x != 0] = 0
    with pytest.raises(IntegrityError, match="points at a zero"):
        sparse_conv_forward(y, om, w, spec)
    z = x.copy()
    z[x == 0] = 1
    with pytest.raises(IntegrityError, match="misses a non-zero"):
        sparse_conv_forward(z, om, w, spec)


def test_backward_two_of_four_pairs():
    # one output reached through four (weight, gradient) pairs, two gradients zero
    spec = LayerSpec((1, 1, 1), (4, 1, 1, 1))
    dy = np.array([1.0, 0.0, 2.0, 0.0], np.float32).reshape(4, 1, 1)
    w = np.array([3, 5, 7, 9], np.float32).reshape(4, 1, 1, 1)
    dx, st = sparse_conv_backward_data(dy, encode_tc_offsets(dy), w, OutputBitmap.ones((1, 1, 1)), spec)
    assert st.macs_performed == 2 and st.macs_skipped_input == 2
    assert dx[0, 0, 0] == 17.0


def test_backward_all_masked(rng):
    spec = SPECS[0]
    dy = sparse_tensor(rng, spec.out_shape, 0.3)
    w = rng.standard_normal(spec.filter_shape).astype(np.float32)
    dx, st = sparse_conv_backward_data(dy, encode_tc_offsets(dy), w, OutputBitmap(np.zeros(spec.in_shape, bool)),
                                       spec)
    assert not dx.any() and st.macs_performed == 0
    assert st.macs_skipped_output + st.macs_skipped_input == st.dense_total


@pytest.mark.parametrize("spec", SPECS, ids=str)
def test_backward_masked_equivalence(rng, spec):
    dy = sparse_tensor(rng, spec.out_shape, 0.5)
    w = rng.standard_normal(spec.filter_shape).astype(np.float32)
    bits = OutputBitmap(rng.random(spec.in_shape) < 0.5)
    dx, st = sparse_conv_backward_data(dy, encode_tc_offsets(dy), w, bits, spec)
    ref = relu_backward(conv2d_backward_data(dy, w, spec), bits)
    assert rel_err(dx, ref) <= 1e-5
    assert not dx[~bits.bits].any()
    assert st.macs_performed + st.macs_skipped_input + st.macs_skipped_output == mac_count(spec)


def test_backward_bitmap_shape(rng):
    spec = SPECS[0]
    dy = rng.standard_normal(spec.out_shape).astype(np.float32)
    with pytest.raises(ShapeError):
        sparse_conv_backward_data(dy, None, np.ones(spec.filter_shape), OutputBitmap.ones((4, 6, 5)), spec)


def test_backward_monotone_in_zeros(rng):
    spec = SPECS[0]
    dy = sparse_tensor(rng, spec.out_shape, 0.2)
    w = rng.standard_normal(spec.filter_shape).astype(np.float32)
    bits = OutputBitmap(rng.random(spec.in_shape) < 0.6)
    prev = None
    for _ in range(5):
        _, st = sparse_conv_backward_data(dy, encode_tc_offsets(dy), w, bits, spec)
        if prev is not None:
            assert st.macs_performed <= prev
        prev = st.macs_performed
        dy = dy.copy()
        dy[rng.random(dy.shape) < 0.3] = 0


def test_scenario_mac_ordering(rng):
    spec = SPECS[0]
    dy = sparse_tensor(rng, spec.out_shape, 0.5)
    w = rng.standard_normal(spec.filter_shape).astype(np.float32)
    bits = OutputBitmap(rng.random(spec.in_shape) < 0.5)
    om = encode_tc_offsets(dy)
    _, s_in = sparse_conv_backward_data(dy, om, w, None, spec)
    _, s_io = sparse_conv_backward_data(dy, om, w, bits, spec)
    assert s_io.macs_performed <= s_in.macs_performed <= mac_count(spec)


def test_effective_bound():
    spec = SPECS[0]
    total = mac_count(spec)
    assert effective_mac_bound(spec, 0, 0) == total
    assert effective_mac_bound(spec, 1, 0.3) == 0
    assert effective_mac_bound(spec, 0.5, 0.5) == total // 4
    with pytest.raises(ValueError):
        effective_mac_bound(spec, 1.2, 0)


def test_effective_bound_monte_carlo():
    # enough input positions that per-seed spread stays well under the band
    # padding taps are never issued, so the formula is exact in expectation only at padding 0
    spec = LayerSpec((64, 34, 34), (2, 64, 3, 3))
    bound = effective_mac_bound(spec, 0.5, 0.5)
    for seed in range(20):
        r = np.random.default_rng(seed)
        dy = sparse_tensor(r, spec.out_shape, 0.5)
        bits = OutputBitmap(r.random(spec.in_shape) < 0.5)
        _, st = sparse_conv_backward_data(dy, encode_tc_offsets(dy), np.ones(spec.filter_shape, np.float32), bits,
                                          spec)
        assert abs(st.macs_performed - bound) <= 0.05 * bound


@pytest.mark.parametrize("spec", SPECS, ids=str)
def test_weight_grad_matches_dense(rng, spec):
    x = sparse_tensor(rng, spec.in_shape, 0.5)
    dy = sparse_tensor(rng, spec.out_shape, 0.4)
    ref = conv2d_weight_grad(x, dy, spec)
    for xo, dyo in ((encode_tc_offsets(x), None), (None, encode_tc_offsets(dy)),
                    (encode_tc_offsets(x), encode_tc_offsets(dy))):
        dw, st = sparse_weight_grad(x, dy, spec, x_offsets=xo, dy_offsets=dyo)
        assert rel_err(dw, ref) <= 1e-5
        assert st.macs_performed < st.dense_total


def test_weight_grad_edge_cases(rng):
    spec = SPECS[0]
    x = rng.uniform(0.5, 1, spec.in_shape).astype(np.float32)
    dy = np.zeros(spec.out_shape, np.float32)
    dw, st = sparse_weight_grad(x, dy, spec, dy_offsets=encode_tc_offsets(dy))
    assert not dw.any() and st.macs_performed == 0
    with pytest.raises(ValueError):
        sparse_weight_grad(x, dy, spec)
    with pytest.raises(ShapeError):
        sparse_weight_grad(x[:2], dy, spec, x_offsets=encode_tc_offsets(x[:2]))
    spec0 = LayerSpec((4, 6, 6), (3, 4, 3, 3))
    dy = np.ones(spec0.out_shape, np.float32)
    _, st = sparse_weight_grad(x, dy, spec0, x_offsets=encode_tc_offsets(x))
    assert st == MacStats.dense(mac_count(spec0))
