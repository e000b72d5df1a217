"""
Hierarchical aggregators for cross-scale message passing.

Each aggregator holds its own weights and provides a consistent interface:
given the graph, the current node states and the shared scale embeddings,
it returns the hierarchical output h_v^hier for every node type.
"""

from abc import ABC, abstractmethod
from typing import Dict, Tuple, Union

import torch
from torch import nn

from ..types import ConfigurationError, HHGraph, HierDirection, HierVariant, NodeStates


class HierAggregator(nn.Module, ABC):
    """
    Base class for hierarchical aggregators.

    Subclasses must implement forward(). Nodes without a hierarchical
    neighbour under the active direction still get an output (their
    self term), so the layer map is total.
    """

    variant: HierVariant

    @abstractmethod
    def forward(
        self,
        g: HHGraph,
        states: NodeStates,
        scale_emb: Dict[str, torch.Tensor],
        direction: HierDirection = HierDirection.BI,
    ) -> NodeStates:
        """
        Compute hierarchical outputs.

        Args:
            g: Graph whose hier_img / hier_text edges are used
            states: Current hidden vector per node type
            scale_emb: {"low": s_low, "high": s_high}
            direction: Which side of each hier edge receives messages

        Returns:
            Output vector per node type
        """


def receiving_sides(direction: Union[HierDirection, str]) -> Tuple[bool, bool]:
    """(high side receives, low side receives) for a message direction."""
    direction = HierDirection(direction)
    return direction != HierDirection.NONE, direction == HierDirection.BI


def mean_neighbors(
    h_src: torch.Tensor,
    src: torch.Tensor,
    dst: torch.Tensor,
    num_dst: int,
) -> torch.Tensor:
    """Mean of source states per destination node; zero where a node has no neighbour."""
    total = h_src.new_zeros(num_dst, h_src.shape[1]).index_add(0, dst, h_src[src])
    degree = h_src.new_zeros(num_dst).index_add(0, dst, h_src.new_ones(dst.shape[0]))
    return total / degree.clamp(min=1).unsqueeze(1)


def edge_softmax(scores: torch.Tensor, index: torch.Tensor, num_nodes: int) -> torch.Tensor:
    """
    Softmax of per-edge scores grouped by destination node.

    Args:
        scores: E x H attention logits
        index: Destination node of each edge
        num_nodes: Number of destination nodes

    Returns:
        E x H weights summing to 1 over each node's incoming edges, per head
    """
    expanded = index.unsqueeze(1).expand_as(scores)
    # subtracting the per-node max leaves the softmax unchanged
    peak = scores.new_full((num_nodes, scores.shape[1]), float("-inf")).scatter_reduce(
        0, expanded, scores.detach(), reduce="amax", include_self=True
    )
    weights = (scores - peak[index]).exp()
    denom = scores.new_zeros(num_nodes, scores.shape[1]).index_add(0, index, weights)
    return weights / denom[index]


def init_near_identity(linear: nn.Linear, noise: float = 0.01) -> None:
    """Identity plus small Gaussian noise, so untrained layers keep embeddings aligned."""
    with torch.no_grad():
        linear.weight.copy_(torch.eye(linear.out_features, linear.in_features))
        linear.weight.add_(noise * torch.randn_like(linear.weight))


def make_aggregator(variant: Union[HierVariant, str], dim: int, heads: int) -> HierAggregator:
    """Construct the aggregator for a variant name."""
    from .attention import AttentionAggregator
    from .sage import SageAggregator

    try:
        variant = HierVariant(variant)
    except ValueError:
        raise ConfigurationError(f"unknown aggregator variant: {variant!r}") from None

    if variant == HierVariant.SAGE:
        return SageAggregator(dim)
    flags = AGGREGATOR_FLAGS[variant]
    return AttentionAggregator(dim, heads, variant=variant, **flags)


# variant -> (relation-specific weights, scale embeddings)
AGGREGATOR_FLAGS = {
    HierVariant.MSA: {"relation_specific": True, "use_scale": True},
    HierVariant.SAA: {"relation_specific": False, "use_scale": True},
    HierVariant.MAA: {"relation_specific": True, "use_scale": False},
    HierVariant.ATTN: {"relation_specific": False, "use_scale": False},
}
