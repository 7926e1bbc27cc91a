"""Cloud-robust convolutional LSTM classification of satellite image time series.

Subpackages: ``tensor`` (array ops and the CLT1 file format), ``convlstm``
(cell, encoders, classifier head), ``train`` (hand-derived gradients, Adam,
training loop), ``synthdata`` (synthetic cloudy scenes, coverage filtering,
block partitioning), ``metrics``, ``viz`` (PGM activation panels) and ``cli``.
"""

from . import cli, convlstm, metrics, synthdata, tensor, train, viz

__version__ = "0.1.0"

__all__ = ["cli", "convlstm", "metrics", "synthdata", "tensor", "train", "viz",
           "__version__"]
