"""Zero-skipping convolutions with exact MAC accounting.

Input sparsity is taken from an :class:`OffsetMap` of the streamed operand;
output sparsity from the forward :class:`OutputBitmap`. Every call returns a
:class:`MacStats` whose three buckets partition the dense MAC count of the
layer. A multiply whose output location is masked counts as output-skipped
even if its operand is also zero. Taps that fall in the zero padding count as
input-skipped whenever an operand is indexed, and as performed in dense mode.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import IntegrityError, ShapeError
from .sparsity_index import OffsetMap, OutputBitmap
from .tensor_core import DTYPE, LayerSpec, mac_count

DEFAULT_BLOCK = 1024


@dataclass(frozen=True)
class MacStats:
    macs_performed: int
    macs_skipped_input: int
    macs_skipped_output: int
    dense_total: int

    def __post_init__(self):
        parts = self.macs_performed + self.macs_skipped_input + self.macs_skipped_output
        if parts != self.dense_total or min(self.macs_performed, self.macs_skipped_input,
                                            self.macs_skipped_output) < 0:
            raise IntegrityError(f"MAC buckets do not partition the dense total: {self}")

    def __add__(self, other):
        return MacStats(
            self.macs_performed + other.macs_performed,
            self.macs_skipped_input + other.macs_skipped_input,
            self.macs_skipped_output + other.macs_skipped_output,
            self.dense_total + other.dense_total,
        )

    @classmethod
    def dense(cls, total):
        return cls(total, 0, 0, total)

    @property
    def reduction(self):
        """Performed fraction of the dense work."""
        return self.macs_performed / self.dense_total if self.dense_total else 0.0

    def to_dict(self):
        return {
            "macs_performed": self.macs_performed,
            "macs_skipped_input": self.macs_skipped_input,
            "macs_skipped_output": self.macs_skipped_output,
            "dense_total": self.dense_total,
        }


def _indexed_mask(values, offsets, name):
    """Decode ``offsets`` and check it indexes exactly the non-zeros of ``values``."""
    if offsets is None:
        return None
    if not isinstance(offsets, OffsetMap):
        raise TypeError(f"{name} offsets must be an OffsetMap")
    if offsets.shape != values.shape:
        raise IntegrityError(f"{name} offsets cover {offsets.shape}, tensor is {values.shape}")
    mask = offsets.nonzero_mask()
    actual = values != 0
    if not np.array_equal(mask, actual):
        bad = np.argwhere(mask != actual)[0]
        kind = "points at a zero" if mask[tuple(bad)] else "misses a non-zero"
        raise IntegrityError(f"stale {name} offsets: index {kind} at {tuple(int(b) for b in bad)}")
    return mask


def _check(arr, shape, name):
    arr = np.asarray(arr, dtype=DTYPE)
    if arr.shape != tuple(shape):
        raise ShapeError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    return arr


def valid_taps(spec):
    """Per input location, how many (m, r, s) forward taps read it. Shape (H, W)."""
    m, _, r, s = spec.filter_shape
    _, h, w = spec.in_shape
    u, v = spec.out_hw
    rows = np.zeros(h, dtype=np.int64)
    cols = np.zeros(w, dtype=np.int64)
    for i in range(r):
        pos = np.arange(u) * spec.stride + i - spec.padding
        np.add.at(rows, pos[(pos >= 0) & (pos < h)], 1)
    for j in range(s):
        pos = np.arange(v) * spec.stride + j - spec.padding
        np.add.at(cols, pos[(pos >= 0) & (pos < w)], 1)
    return m * rows[:, None] * cols[None, :]


def sparse_conv_forward(x, x_offsets, w, spec, block=DEFAULT_BLOCK, backend=None):
    """Forward convolution skipping zero inputs. ``x_offsets=None`` runs dense."""
    x = _check(x, spec.in_shape, "input")
    w = _check(w, spec.filter_shape, "filters")
    nz = _indexed_mask(x, x_offsets, "input")
    y, performed = kernels.conv_forward(x, nz, w, spec.stride, spec.padding, block, backend)
    total = mac_count(spec)
    if nz is None:
        return y, MacStats.dense(total)
    return y, MacStats(performed, total - performed, 0, total)


def sparse_conv_backward_data(dy, dy_offsets, w, out_bitmap, spec, block=DEFAULT_BLOCK, backend=None):
    """Input-gradient computation skipping zero gradients and masked outputs.

    Positions where ``out_bitmap`` is clear are returned as exact zeros and no
    MAC is issued for them. ``dy_offsets=None`` disables input skipping and
    ``out_bitmap=None`` disables output skipping.
    """
    dy = _check(dy, spec.out_shape, "output gradient")
    w = _check(w, spec.filter_shape, "filters")
    nz = _indexed_mask(dy, dy_offsets, "gradient")
    bits = None
    if out_bitmap is not None:
        if not isinstance(out_bitmap, OutputBitmap):
            out_bitmap = OutputBitmap(out_bitmap)
        if out_bitmap.shape != spec.in_shape:
            raise ShapeError(f"bitmap shape {out_bitmap.shape} does not match {spec.in_shape}")
        bits = out_bitmap.bits
    dx, performed = kernels.conv_backward_data(
        dy, nz, w, bits, spec.stride, spec.padding, spec.in_shape[1:], block, backend
    )
    total = mac_count(spec)
    taps = valid_taps(spec)
    skipped_out = 0 if bits is None else int((taps[None] * ~bits).sum())
    if nz is None:
        # padding taps have no output location; a dense engine issues them anyway
        return dx, MacStats(total - skipped_out, 0, skipped_out, total)
    return dx, MacStats(performed, total - performed - skipped_out, skipped_out, total)


def sparse_weight_grad(x, dy, spec, x_offsets=None, dy_offsets=None, block=DEFAULT_BLOCK, backend=None):
    """Weight gradient skipping pairs where an indexed operand is zero."""
    if x_offsets is None and dy_offsets is None:
        raise ValueError("sparse_weight_grad needs an offset map for at least one operand")
    return _weight_grad(x, dy, spec, x_offsets, dy_offsets, block, backend)


def _weight_grad(x, dy, spec, x_offsets, dy_offsets, block=DEFAULT_BLOCK, backend=None):
    x = _check(x, spec.in_shape, "input")
    dy = _check(dy, spec.out_shape, "output gradient")
    xnz = _indexed_mask(x, x_offsets, "input")
    dynz = _indexed_mask(dy, dy_offsets, "gradient")
    _, _, r, s = spec.filter_shape
    dw, performed = kernels.weight_grad(x, xnz, dy, dynz, r, s, spec.stride, spec.padding, block, backend)
    total = mac_count(spec)
    if xnz is None and dynz is None:
        return dw, MacStats.dense(total)
    return dw, MacStats(performed, total - performed, 0, total)


def effective_mac_bound(spec, s_out, s_in):
    """Expected MACs under independent uniform output and input sparsity."""
    for name, val in (("s_out", s_out), ("s_in", s_in)):
        if not 0.0 <= val <= 1.0:
            raise ValueError(f"{name}={val} outside [0, 1]")
    expected = mac_count(spec) * (1.0 - s_out) * (1.0 - s_in)
    return int(np.floor(expected + 0.5))


__all__ = [
    "LayerSpec",
    "MacStats",
    "effective_mac_bound",
    "sparse_conv_backward_data",
    "sparse_conv_forward",
    "sparse_weight_grad",
    "valid_taps",
]
