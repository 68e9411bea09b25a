"""Sparse CNN training: reference layers, sparsity indices, zero-skipping kernels and an accelerator model."""

from .errors import (ConfigError, IntegrityError, MissingOperandError, ShapeError, SparseTrainError,
                     TraceFormatError, TrainingDivergence)
from .kernels import BACKEND
from .sparse_kernels import (MacStats, effective_mac_bound, sparse_conv_backward_data, sparse_conv_forward,
                             sparse_weight_grad)
from .sparsity_index import (OffsetMap, OutputBitmap, build_wc_bitmap, encode_tc_offsets, footprint_equal,
                             sparsity_fraction, sparsity_stats)
from .tensor_core import LayerSpec, PostOp, mac_count

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ConfigError", "IntegrityError", "LayerSpec", "MacStats", "MissingOperandError", "OffsetMap",
    "OutputBitmap", "PostOp", "ShapeError", "SparseTrainError", "TraceFormatError", "TrainingDivergence",
    "build_wc_bitmap", "effective_mac_bound", "encode_tc_offsets", "footprint_equal", "mac_count",
    "sparse_conv_backward_data", "sparse_conv_forward", "sparse_weight_grad", "sparsity_fraction",
    "sparsity_stats",
]
