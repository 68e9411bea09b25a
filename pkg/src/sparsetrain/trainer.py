"""A tiny from-scratch CNN trainer.

A model is a list of :class:`ConvLayer` blocks, each a convolution followed by
its post-op. One :func:`train_step` runs forward, backward and weight-gradient
phases over a batch, applies plain SGD, and returns every intermediate map so
traces can be cut from it.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ShapeError, TrainingDivergence
from .sparsity_index import OutputBitmap
from .tensor_core import (
    DTYPE,
    LayerSpec,
    PostOp,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward_data,
    conv2d_forward,
    conv2d_weight_grad,
    maxpool_backward,
    maxpool_forward,
    relu_backward,
    relu_forward,
)


@dataclass
class ConvLayer:
    spec: LayerSpec
    weight: np.ndarray
    gamma: np.ndarray = None
    beta: np.ndarray = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=DTYPE)
        if self.weight.shape != self.spec.filter_shape:
            raise ShapeError(f"weight shape {self.weight.shape} != {self.spec.filter_shape}")
        if self.spec.post_op is PostOp.BN_RELU:
            m = self.spec.filter_shape[0]
            self.gamma = np.ones(m, DTYPE) if self.gamma is None else np.asarray(self.gamma, DTYPE)
            self.beta = np.zeros(m, DTYPE) if self.beta is None else np.asarray(self.beta, DTYPE)

    @property
    def out_shape(self):
        """Shape after the post-op."""
        m, u, v = self.spec.out_shape
        if self.spec.post_op is PostOp.MAXPOOL:
            return (m, (u - 2) // 2 + 1, (v - 2) // 2 + 1)
        return (m, u, v)


@dataclass
class LayerTrace:
    """Batch-wide intermediates of one block. Leading axis is the sample."""

    f_in: np.ndarray          # conv input
    z: np.ndarray             # conv output
    relu_in: np.ndarray       # ReLU input (z, or BN(z))
    mask: np.ndarray          # ReLU survival bits, bool, same shape as z
    f_out: np.ndarray         # block output after the post-op
    relu_grad: np.ndarray = None  # gradient at the ReLU input, after masking
    g_in: np.ndarray = None   # gradient at the conv output
    g_out: np.ndarray = None  # gradient at the conv input
    dw: np.ndarray = None     # batch-summed weight gradient
    dgamma: np.ndarray = None
    dbeta: np.ndarray = None


@dataclass
class StepResult:
    model: list
    trace: list
    loss: float
    extras: dict = field(default_factory=dict)


def validate_chain(model, in_shape):
    shape = tuple(in_shape)
    for i, layer in enumerate(model):
        if layer.spec.in_shape != shape:
            raise ShapeError(f"layer {i} expects input {layer.spec.in_shape}, chain provides {shape}")
        shape = layer.out_shape
    return shape


def init_model(specs, rng):
    """He-normal weights for a list of layer specs."""
    model = []
    for spec in specs:
        m, c, r, s = spec.filter_shape
        std = np.sqrt(2.0 / (c * r * s))
        model.append(ConvLayer(spec, (rng.standard_normal((m, c, r, s)) * std).astype(DTYPE)))
    return model


def mse_loss(out, target):
    """Mean over the batch of half the squared error. Returns (loss, grad)."""
    n = out.shape[0]
    diff = out - target
    return float(0.5 * np.sum(diff.astype(np.float64) ** 2) / n), (diff / n).astype(DTYPE)


def cross_entropy_loss(out, labels):
    """Softmax cross-entropy over each sample's flattened output."""
    n = out.shape[0]
    logits = out.reshape(n, -1).astype(np.float64)
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    labels = np.asarray(labels, dtype=int)
    loss = -np.mean(np.log(p[np.arange(n), labels] + 1e-30))
    p[np.arange(n), labels] -= 1.0
    return float(loss), (p / n).reshape(out.shape).astype(DTYPE)


LOSSES = {"mse": mse_loss, "xent": cross_entropy_loss}


def _forward_block(layer, x):
    spec = layer.spec
    z = np.stack([conv2d_forward(xi, layer.weight, spec) for xi in x])
    cache = {}
    if spec.post_op is PostOp.BN_RELU:
        relu_in, cache["bn"] = batchnorm_forward(z, layer.gamma, layer.beta)
    else:
        relu_in = z
    if spec.post_op.has_relu:
        pairs = [relu_forward(r) for r in relu_in]
        act = np.stack([a for a, _ in pairs])
        mask = np.stack([m.bits for _, m in pairs])
    else:
        act = relu_in
        mask = np.ones(z.shape, dtype=bool)
    if spec.post_op is PostOp.MAXPOOL:
        pooled = [maxpool_forward(a, 2, 2) for a in act]
        f_out = np.stack([p for p, _ in pooled])
        cache["pool"] = [idx for _, idx in pooled]
    else:
        f_out = act
    return LayerTrace(f_in=x, z=z, relu_in=relu_in, mask=mask, f_out=f_out), cache


def _backward_block(layer, lt, cache, grad):
    spec = layer.spec
    if spec.post_op is PostOp.MAXPOOL:
        grad = np.stack([maxpool_backward(g, idx) for g, idx in zip(grad, cache["pool"])])
    if spec.post_op.has_relu:
        grad = np.stack([relu_backward(g, OutputBitmap(m)) for g, m in zip(grad, lt.mask)])
        lt.relu_grad = grad
    if spec.post_op is PostOp.BN_RELU:
        grad, lt.dgamma, lt.dbeta = batchnorm_backward(grad, cache["bn"])
    lt.g_in = grad
    lt.dw = np.sum([conv2d_weight_grad(xi, gi, spec) for xi, gi in zip(lt.f_in, grad)], axis=0).astype(DTYPE)
    lt.g_out = np.stack([conv2d_backward_data(gi, layer.weight, spec) for gi in grad])
    return lt.g_out


def train_step(model, batch, targets, learning_rate, loss="mse", step=None):
    """One SGD step over ``batch`` (N, C, H, W).

    ``targets`` is an array shaped like the model output for ``loss="mse"`` or
    integer labels for ``loss="xent"``. The input model is left untouched.
    """
    batch = np.asarray(batch, dtype=DTYPE)
    validate_chain(model, batch.shape[1:])
    traces, caches = [], []
    x = batch
    for layer in model:
        lt, cache = _forward_block(layer, x)
        traces.append(lt)
        caches.append(cache)
        x = lt.f_out
    loss_value, grad = LOSSES[loss](x, targets)
    if not np.isfinite(loss_value):
        where = "" if step is None else f" at step {step}"
        raise TrainingDivergence(f"non-finite loss {loss_value}{where}", step=step)
    for layer, lt, cache in zip(reversed(model), reversed(traces), reversed(caches)):
        grad = _backward_block(layer, lt, cache, grad)

    updated = []
    for layer, lt in zip(model, traces):
        new = replace(layer, weight=(layer.weight - learning_rate * lt.dw).astype(DTYPE))
        if layer.spec.post_op is PostOp.BN_RELU:
            new.gamma = (layer.gamma - learning_rate * lt.dgamma).astype(DTYPE)
            new.beta = (layer.beta - learning_rate * lt.dbeta).astype(DTYPE)
        updated.append(new)
    return StepResult(model=updated, trace=traces, loss=loss_value)
