"""Dense reference layer operations.

Feature maps are float32 arrays of shape (C, H, W) in channel-first order;
filters are (M, C, R, S). These implementations are the correctness oracle for
the sparse kernels and the simulator, so they favour clarity over speed.
"""

import enum
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._geometry import pad_chw
from .errors import ShapeError
from .sparsity_index import OutputBitmap

DTYPE = np.float32


class PostOp(str, enum.Enum):
    """What follows a convolution.

    ``MAXPOOL`` is ReLU followed by 2x2/2 max pooling, the layout of VGG-style
    networks.
    """

    RELU = "relu"
    MAXPOOL = "maxpool"
    BN_RELU = "bn_relu"
    NONE = "none"

    @property
    def has_relu(self):
        return self is not PostOp.NONE


@dataclass(frozen=True)
class LayerSpec:
    in_shape: tuple
    filter_shape: tuple
    stride: int = 1
    padding: int = 0
    post_op: PostOp = PostOp.RELU

    def __post_init__(self):
        object.__setattr__(self, "in_shape", tuple(int(v) for v in self.in_shape))
        object.__setattr__(self, "filter_shape", tuple(int(v) for v in self.filter_shape))
        object.__setattr__(self, "post_op", PostOp(self.post_op))
        if len(self.in_shape) != 3 or len(self.filter_shape) != 4:
            raise ShapeError("in_shape must be (C, H, W) and filter_shape (M, C, R, S)")
        if self.filter_shape[1] != self.in_shape[0]:
            raise ShapeError(
                f"filter expects {self.filter_shape[1]} channels, input has {self.in_shape[0]}"
            )
        if self.stride < 1 or self.padding < 0:
            raise ShapeError("stride must be >= 1 and padding >= 0")
        u, v = self.out_hw
        if u < 1 or v < 1:
            raise ShapeError(f"filter {self.filter_shape[2:]} does not fit input {self.in_shape[1:]}")

    @property
    def out_hw(self):
        _, h, w = self.in_shape
        _, _, r, s = self.filter_shape
        return (
            (h + 2 * self.padding - r) // self.stride + 1,
            (w + 2 * self.padding - s) // self.stride + 1,
        )

    @property
    def out_shape(self):
        return (self.filter_shape[0],) + self.out_hw

    @property
    def crs(self):
        _, c, r, s = self.filter_shape
        return c * r * s

    def to_dict(self):
        return {
            "in_shape": list(self.in_shape),
            "filter_shape": list(self.filter_shape),
            "stride": self.stride,
            "padding": self.padding,
            "post_op": self.post_op.value,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["in_shape"]), tuple(d["filter_shape"]), d.get("stride", 1),
                   d.get("padding", 0), PostOp(d.get("post_op", "relu")))


def _check(arr, shape, name):
    arr = np.asarray(arr, dtype=DTYPE)
    if arr.shape != tuple(shape):
        raise ShapeError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    return arr


def _windows(x, spec):
    """Strided (C, U, V, R, S) view of the padded input."""
    _, _, r, s = spec.filter_shape
    u, v = spec.out_hw
    st = spec.stride
    win = sliding_window_view(pad_chw(x, spec.padding), (r, s), axis=(1, 2))
    return win[:, ::st, ::st][:, :u, :v]


def conv2d_forward(x, w, spec):
    x = _check(x, spec.in_shape, "input")
    w = _check(w, spec.filter_shape, "filters")
    return np.einsum("cuvrs,mcrs->muv", _windows(x, spec), w).astype(DTYPE)


def conv2d_backward_data(dy, w, spec):
    """Transposed convolution of ``dy`` with ``w``: the adjoint of the forward pass.

    Implemented as a scatter (each output gradient spreads over its window) so
    it shares no code with the gather-style sparse kernel it checks.
    """
    dy = _check(dy, spec.out_shape, "output gradient")
    w = _check(w, spec.filter_shape, "filters")
    c, h, wd = spec.in_shape
    _, _, r, s = spec.filter_shape
    u, v = spec.out_hw
    st, p = spec.stride, spec.padding
    dxp = np.zeros((c, h + 2 * p, wd + 2 * p), dtype=DTYPE)
    for i in range(r):
        for j in range(s):
            dxp[:, i:i + st * u:st, j:j + st * v:st] += np.einsum("mc,muv->cuv", w[:, :, i, j], dy)
    return np.ascontiguousarray(dxp[:, p:p + h, p:p + wd])


def conv2d_weight_grad(x, dy, spec):
    x = _check(x, spec.in_shape, "input")
    dy = _check(dy, spec.out_shape, "output gradient")
    return np.einsum("cuvrs,muv->mcrs", _windows(x, spec), dy).astype(DTYPE)


def relu_forward(z):
    """Rectify ``z``. The mask gates on ``z > 0`` so ReLU(0) = 0 is masked too."""
    z = np.asarray(z, dtype=DTYPE)
    mask = z > 0
    return np.where(mask, z, DTYPE(0)), OutputBitmap(mask)


def relu_backward(dy, mask):
    dy = np.asarray(dy, dtype=DTYPE)
    if dy.shape != mask.shape:
        raise ShapeError(f"gradient shape {dy.shape} does not match mask {mask.shape}")
    return np.where(mask.bits, dy, DTYPE(0))


@dataclass(frozen=True)
class PoolIndex:
    """Argmax positions of a max-pool, as flat indices into each input plane."""

    indices: np.ndarray  # (C, U, V) int
    in_shape: tuple


def maxpool_forward(x, window=2, stride=2):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 3:
        raise ShapeError(f"expected (C, H, W), got {x.shape}")
    c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than input {h}x{w}")
    win = sliding_window_view(x, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    _, u, v = win.shape[:3]
    flat = win.reshape(c, u, v, window * window)
    k = flat.argmax(axis=-1)  # first maximum in row-major scan order
    y = np.take_along_axis(flat, k[..., None], axis=-1)[..., 0]
    rows = np.arange(u)[:, None] * stride + k // window
    cols = np.arange(v)[None, :] * stride + k % window
    return np.ascontiguousarray(y), PoolIndex(rows * w + cols, (c, h, w))


def maxpool_backward(dy, index):
    dy = np.asarray(dy, dtype=DTYPE)
    if dy.shape != index.indices.shape:
        raise ShapeError(f"gradient shape {dy.shape} does not match pool output {index.indices.shape}")
    c, h, w = index.in_shape
    dx = np.zeros((c, h * w), dtype=DTYPE)
    for ch in range(c):
        np.add.at(dx[ch], index.indices[ch].ravel(), dy[ch].ravel())
    return dx.reshape(c, h, w)


@dataclass(frozen=True)
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray


def batchnorm_forward(x, gamma, beta, eps=1e-5):
    """Per-channel batch normalization of an (N, C, H, W) batch."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 4:
        raise ShapeError(f"expected an (N, C, H, W) batch, got {x.shape}")
    if x.shape[0] < 2:
        raise ShapeError("batch normalization needs at least 2 samples")
    gamma = np.asarray(gamma, dtype=DTYPE)
    beta = np.asarray(beta, dtype=DTYPE)
    mean = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(DTYPE)
    xhat = ((x - mean) * inv_std).astype(DTYPE)
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out.astype(DTYPE), BatchNormCache(xhat, inv_std, gamma)


def batchnorm_backward(dout, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    dout = np.asarray(dout, dtype=DTYPE)
    if dout.shape != cache.xhat.shape:
        raise ShapeError(f"gradient shape {dout.shape} does not match {cache.xhat.shape}")
    n = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dbeta = dout.sum(axis=(0, 2, 3))
    dgamma = (dout * cache.xhat).sum(axis=(0, 2, 3))
    dxhat = dout * cache.gamma[None, :, None, None]
    dx = (cache.inv_std / n) * (
        n * dxhat
        - dxhat.sum(axis=(0, 2, 3), keepdims=True)
        - cache.xhat * (dxhat * cache.xhat).sum(axis=(0, 2, 3), keepdims=True)
    )
    return dx.astype(DTYPE), dgamma.astype(DTYPE), dbeta.astype(DTYPE)


def mac_count(spec):
    m, c, r, s = spec.filter_shape
    u, v = spec.out_hw
    return m * u * v * c * r * s
