"""Architecture search by hill climbing over function-preserving network morphisms."""
from .kernels import BACKEND
from .graph import NetworkGraph, LayerNode, GraphError, GraphFormatError

__version__ = "0.1.0"

__all__ = ["BACKEND", "NetworkGraph", "LayerNode", "GraphError", "GraphFormatError", "__version__"]
