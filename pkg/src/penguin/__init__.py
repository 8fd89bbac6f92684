"""Partially equivariant graph networks for multi-agent reinforcement learning."""
from .graph import GraphBatch, GraphState, random_graph
from .layers import PenguinLayer, PenguinNetwork, GnnLayer, network_forward
from .symmetry import GroupElement, random_orthogonal
from .tensor import NonFiniteError, Tensor

__all__ = [
    "GraphBatch",
    "GraphState",
    "GnnLayer",
    "GroupElement",
    "NonFiniteError",
    "PenguinLayer",
    "PenguinNetwork",
    "Tensor",
    "network_forward",
    "random_graph",
    "random_orthogonal",
]
__version__ = "0.1.0"
