"""Backend selection for the zero-skipping convolution loops.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``SPARSETRAIN_BACKEND=python`` to force the fallback.
"""

import os

import numpy as np

from . import _fallback

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = {"python": _fallback}
if _ckernels is not None:
    BACKENDS["cython"] = _ckernels

_requested = os.environ.get("SPARSETRAIN_BACKEND", "").lower()
if _requested and _requested not in BACKENDS:
    raise ImportError(f"SPARSETRAIN_BACKEND={_requested!r} is not available; have {sorted(BACKENDS)}")
BACKEND = _requested or ("cython" if _ckernels is not None else "python")


def get_backend(name=None):
    try:
        return BACKENDS[name or BACKEND]
    except KeyError:
        raise ValueError(f"unknown backend {name!r}; have {sorted(BACKENDS)}") from None


def _f32(a):
    return np.ascontiguousarray(a, dtype=np.float32)


def _mask(a):
    return None if a is None else np.ascontiguousarray(a, dtype=np.uint8)


def _bool(a):
    return None if a is None else np.asarray(a, dtype=bool)


def conv_forward(x, xnz, w, stride, pad, block=None, backend=None):
    mod = get_backend(backend)
    if mod is _fallback:
        return mod.conv_forward(_f32(x), _bool(xnz), _f32(w), stride, pad, block)
    return mod.conv_forward(_f32(x), _mask(xnz), _f32(w), stride, pad, block)


def conv_backward_data(dy, dynz, w, out_mask, stride, pad, out_hw, block=None, backend=None):
    mod = get_backend(backend)
    if mod is _fallback:
        return mod.conv_backward_data(_f32(dy), _bool(dynz), _f32(w), _bool(out_mask), stride, pad,
                                      tuple(out_hw), block)
    return mod.conv_backward_data(_f32(dy), _mask(dynz), _f32(w), _mask(out_mask), stride, pad,
                                  tuple(out_hw), block)


def weight_grad(x, xnz, dy, dynz, r, s, stride, pad, block=None, backend=None):
    mod = get_backend(backend)
    if mod is _fallback:
        return mod.weight_grad(_f32(x), _bool(xnz), _f32(dy), _bool(dynz), r, s, stride, pad, block)
    return mod.weight_grad(_f32(x), _mask(xnz), _f32(dy), _mask(dynz), r, s, stride, pad, block)
