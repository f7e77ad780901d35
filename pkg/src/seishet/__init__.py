"""Seismic structural-heterogeneity detection toolkit.

Synthetic seismic data generation, a from-scratch convolutional
segmentation network with interchangeable SE and relative self-attention
blocks, deterministic training with layer freezing for transfer learning,
SEG-Y ingestion, and pixelwise evaluation metrics.
"""

from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    EvaluationError,
    FormatError,
    IntegrityError,
    LabelError,
    LineNotFoundError,
    SeishetError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DimensionError",
    "EvaluationError",
    "FormatError",
    "IntegrityError",
    "LabelError",
    "LineNotFoundError",
    "SeishetError",
    "__version__",
]
