"""Learned weighted jet fitting for point-cloud normal estimation."""

from .errors import GraphFitError
from .geometry import JetOrder, PointCloud, extract_patch
from .network import GraphFitModel, ModelConfig

__all__ = ["GraphFitError", "GraphFitModel", "JetOrder", "ModelConfig", "PointCloud", "extract_patch"]
__version__ = "0.1.0"
