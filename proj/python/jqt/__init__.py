"""INT8 block-quantized tensors, tiled integer GEMM and a toy training harness."""

import json

from ._core import (
    BlockQuantTensor,
    ConfigError,
    DimensionError,
    DomainError,
    StateError,
    load,
    matmul,
    matmul_accum,
    num_threads,
    quantization_error,
    quantize,
    selftest,
    set_num_threads,
)
from ._core import train as _train

__all__ = [
    "BlockQuantTensor",
    "ConfigError",
    "DimensionError",
    "DomainError",
    "StateError",
    "load",
    "matmul",
    "matmul_accum",
    "num_threads",
    "quantization_error",
    "quantize",
    "selftest",
    "set_num_threads",
    "train",
]


def train(task=None, model=None, train=None):
    """Run one training job; each argument is a dict in the CLI config format."""
    dump = lambda d: json.dumps(d) if d else ""
    return _train(dump(task), dump(model), dump(train))
