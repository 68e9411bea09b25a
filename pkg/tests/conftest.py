import numpy as np
import pytest

from sparsetrain import kernels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sparse_tensor(rng, shape, zero_frac):
    x = rng.standard_normal(shape).astype(np.float32)
    x[rng.random(shape) < zero_frac] = 0.0
    return x


def rel_err(a, b):
    """max |a - b| / max |b|, with an all-zero reference compared absolutely."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.abs(b).max()
    diff = np.abs(a - b).max() if a.size else 0.0
    return diff / scale if scale > 0 else diff


BACKEND_NAMES = sorted(kernels.BACKENDS)


def fd_rel_err(numeric, analytic, grad):
    """Finite-difference mismatch scaled by the larger of |numeric| and the gradient's max magnitude.

    Float32 rounding of the loss puts an absolute noise floor under the central
    difference, so tiny components are judged against the tensor's scale.
    """
    return abs(numeric - analytic) / max(abs(numeric), float(np.abs(grad).max()), 1e-12)


def make_operands(rng, spec, x_zero=0.5, dy_zero=0.5, bitmap_density=0.5):
    from sparsetrain.accel import Operands
    from sparsetrain.sparsity_index import OutputBitmap, encode_tc_offsets

    x = sparse_tensor(rng, spec.in_shape, x_zero)
    dy = sparse_tensor(rng, spec.out_shape, dy_zero)
    w = rng.standard_normal(spec.filter_shape).astype(np.float32)
    bits = OutputBitmap(rng.random(spec.in_shape) < bitmap_density)
    return Operands(x=x, w=w, dy=dy, x_offsets=encode_tc_offsets(x), dy_offsets=encode_tc_offsets(dy),
                    out_bitmap=bits)
