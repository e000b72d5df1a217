"""
Relation-aware message passing over the hierarchical heterogeneous graph.

Each layer sums an intra-scale part (relation-specific GraphSAGE on
intra_low / intra_high, averaged over the relations a node takes part in)
and a hierarchical part (one of the aggregators in scalegraph.aggregators).
A ReLU follows every layer except the last, so final states can be scored
by cosine similarity directly.
"""

from typing import Dict, List, Union

import torch
import torch.nn.functional as F
from torch import nn

from .aggregators import HierAggregator, init_near_identity, make_aggregator, mean_neighbors
from .types import (
    INTRA_RELATIONS,
    NODE_TYPES,
    RELATIONS,
    HHGraph,
    HierDirection,
    HierVariant,
    NodeStates,
)


class IntraSage(nn.Module):
    """W_self^(r) and W_neigh^(r) for each intra-scale relation."""

    def __init__(self, dim: int):
        super().__init__()
        self.w_self = nn.ModuleDict({r: nn.Linear(dim, dim, bias=False) for r in INTRA_RELATIONS})
        self.w_neigh = nn.ModuleDict({r: nn.Linear(dim, dim, bias=False) for r in INTRA_RELATIONS})
        for relation in INTRA_RELATIONS:
            init_near_identity(self.w_self[relation])
            init_near_identity(self.w_neigh[relation])


def intra_aggregate(
    g: HHGraph,
    states: NodeStates,
    params: IntraSage,
    relation: str,
) -> NodeStates:
    """
    GraphSAGE under one intra relation, for both node types it joins.

    Nodes with no neighbour under the relation get W_self h_v only.
    """
    if relation not in INTRA_RELATIONS:
        raise ValueError(f"not an intra-scale relation: {relation!r}")
    img_type, text_type = RELATIONS[relation]
    pairs = torch.as_tensor(g.edges[relation], dtype=torch.long)
    out: NodeStates = {}
    for dst_type, src_type, src, dst in (
        (text_type, img_type, pairs[:, 0], pairs[:, 1]),
        (img_type, text_type, pairs[:, 1], pairs[:, 0]),
    ):
        h = states[dst_type]
        result = params.w_self[relation](h)
        if src.numel():
            neigh = mean_neighbors(states[src_type], src, dst, h.shape[0])
            result = result + params.w_neigh[relation](neigh)
        out[dst_type] = result
    return out


def intra_outputs(g: HHGraph, states: NodeStates, params: IntraSage) -> NodeStates:
    """h_v^intra: mean of the per-relation outputs over the relations v takes part in."""
    collected: Dict[str, List[torch.Tensor]] = {}
    for relation in INTRA_RELATIONS:
        for node_type, value in intra_aggregate(g, states, params, relation).items():
            collected.setdefault(node_type, []).append(value)
    return {t: torch.stack(values).mean(dim=0) for t, values in collected.items()}


class HHGLayer(nn.Module):

    def __init__(self, dim: int, heads: int, variant: Union[HierVariant, str]):
        super().__init__()
        self.intra = IntraSage(dim)
        self.hier: HierAggregator = make_aggregator(variant, dim, heads)

    def forward(
        self,
        g: HHGraph,
        states: NodeStates,
        scale_emb: Dict[str, torch.Tensor],
        direction: HierDirection,
    ) -> NodeStates:
        intra = intra_outputs(g, states, self.intra)
        hier = self.hier(g, states, scale_emb, direction)
        return {t: intra[t] + hier[t] for t in NODE_TYPES}


class HHGNN(nn.Module):
    """
    Stack of independent HHG layers sharing one pair of scale embeddings.

    Usage:
        gnn = HHGNN(dim=64, layers=2, heads=2, variant="msa")
        states = gnn(graph)
    """

    def __init__(
        self,
        dim: int,
        layers: int = 2,
        heads: int = 2,
        variant: Union[HierVariant, str] = HierVariant.MSA,
        direction: Union[HierDirection, str] = HierDirection.BI,
    ):
        super().__init__()
        self.dim = dim
        self.variant = HierVariant(variant)
        self.direction = HierDirection(direction)
        self.scale_low = nn.Parameter(0.02 * torch.randn(dim))
        self.scale_high = nn.Parameter(0.02 * torch.randn(dim))
        self.layers = nn.ModuleList(HHGLayer(dim, heads, self.variant) for _ in range(layers))

    @property
    def scale_emb(self) -> Dict[str, torch.Tensor]:
        return {"low": self.scale_low, "high": self.scale_high}

    def forward(self, g: HHGraph) -> NodeStates:
        states: NodeStates = {t: g.node_feats[t] for t in NODE_TYPES}
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            states = layer(g, states, self.scale_emb, self.direction)
            if i < last:
                states = {t: F.relu(h) for t, h in states.items()}
        return states
