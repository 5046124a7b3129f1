"""Prompt tuning for a toy dual-encoder with feature-shift regularization."""

from .autodiff import (
    Graph,
    GraphConsumed,
    ShapeMismatch,
    Tensor,
    apply,
    backward,
    finite_diff_grad,
)

__all__ = [
    "Graph",
    "GraphConsumed",
    "ShapeMismatch",
    "Tensor",
    "apply",
    "backward",
    "finite_diff_grad",
]
