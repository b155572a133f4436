"""Continual class-incremental learning with parameter-efficient tuning.

A small frozen transformer backbone is adapted per task through
parameter-efficient modules (adapters, low-rank deltas, prefixes); an
online module learns each task, an offline copy accumulates it through
an exponential moving average, and inference ensembles both experts.
"""

from .tensor import Tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "__version__"]
