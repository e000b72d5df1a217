"""
GraphSAGE on hierarchical edges (no attention, no scale embeddings).
"""

from typing import Dict

import torch
from torch import nn

from . import HierAggregator, init_near_identity, mean_neighbors, receiving_sides
from ..types import HIER_RELATIONS, RELATIONS, HHGraph, HierDirection, HierVariant, NodeStates


class SageAggregator(HierAggregator):
    """Per-relation W_self h_v + W_neigh mean(h_u) over hierarchical neighbours."""

    variant = HierVariant.SAGE

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.w_self = nn.ModuleDict({r: nn.Linear(dim, dim, bias=False) for r in HIER_RELATIONS})
        self.w_neigh = nn.ModuleDict({r: nn.Linear(dim, dim, bias=False) for r in HIER_RELATIONS})
        for relation in HIER_RELATIONS:
            init_near_identity(self.w_self[relation])
            init_near_identity(self.w_neigh[relation])

    def forward(
        self,
        g: HHGraph,
        states: NodeStates,
        scale_emb: Dict[str, torch.Tensor],
        direction: HierDirection = HierDirection.BI,
    ) -> NodeStates:
        high_receives, low_receives = receiving_sides(direction)
        out: NodeStates = {}
        for relation in HIER_RELATIONS:
            low_type, high_type = RELATIONS[relation]
            pairs = torch.as_tensor(g.edges[relation], dtype=torch.long)
            directed = (
                (high_type, low_type, pairs[:, 0], pairs[:, 1], high_receives),
                (low_type, high_type, pairs[:, 1], pairs[:, 0], low_receives),
            )
            for dst_type, src_type, src, dst, receives in directed:
                h = states[dst_type]
                result = self.w_self[relation](h)
                if receives and src.numel():
                    neigh = mean_neighbors(states[src_type], src, dst, h.shape[0])
                    result = result + self.w_neigh[relation](neigh)
                out[dst_type] = result
        return out
