"""Graph Mixer Network: PNA-style multi-aggregation followed by an MLP-Mixer block."""

from gmixer.graphs import DatasetSplit, DegreeStats, MolecularGraph, PaddedBatch
from gmixer.model import Architecture, GmnModel
from gmixer.tensor import ComputeTape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "ComputeTape",
    "DatasetSplit",
    "DegreeStats",
    "GmnModel",
    "MolecularGraph",
    "PaddedBatch",
    "Tensor",
    "backward",
]
