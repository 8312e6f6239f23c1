"""Symbolic network-flow synthesis with autoregressive sequence models."""

from ._core import (
    ConvergenceError,
    DataError,
    DivergenceError,
    FlowsynthError,
    UsageError,
    benchmark,
    count_params,
    encode_csv,
    evaluate,
    pca,
    sample,
    train,
    write_benchmark_csv,
)

__all__ = [
    "ConvergenceError",
    "DataError",
    "DivergenceError",
    "FlowsynthError",
    "UsageError",
    "benchmark",
    "count_params",
    "encode_csv",
    "evaluate",
    "pca",
    "sample",
    "train",
    "write_benchmark_csv",
]

__version__ = "0.1.0"
