"""
Attention aggregators on hierarchical edges.

One class covers the four attention variants:
  MSA   relation-specific W_q/W_k/W_v, scale embeddings added
  SAA   shared weights, scale embeddings added
  MAA   relation-specific weights, no scale embeddings
  ATTN  shared weights, no scale embeddings

Output per receiving node: q_v + sum_u beta_vu v_u, computed per head on a
channel split of D and concatenated.
"""

import math
from typing import Dict, Optional

import torch
from torch import nn

from . import HierAggregator, edge_softmax, init_near_identity, receiving_sides
from ..types import (
    HIER_RELATIONS,
    NODE_SCALE,
    RELATIONS,
    ConfigurationError,
    HHGraph,
    HierDirection,
    HierVariant,
    NodeStates,
)


SHARED = "shared"


class AttentionAggregator(HierAggregator):

    def __init__(
        self,
        dim: int,
        heads: int,
        relation_specific: bool = True,
        use_scale: bool = True,
        variant: Optional[HierVariant] = None,
    ):
        super().__init__()
        if heads < 1 or dim % heads:
            raise ConfigurationError(f"{heads} heads do not divide dimension {dim}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.relation_specific = relation_specific
        self.use_scale = use_scale
        self.variant = variant or HierVariant.MSA

        keys = HIER_RELATIONS if relation_specific else (SHARED,)
        self.proj = nn.ModuleDict({
            key: nn.ModuleDict({
                name: nn.Linear(dim, dim, bias=False) for name in ("q", "k", "v")
            })
            for key in keys
        })
        for block in self.proj.values():
            for linear in block.values():
                init_near_identity(linear)

    def weights_for(self, relation: str) -> nn.ModuleDict:
        return self.proj[relation if self.relation_specific else SHARED]

    def forward(
        self,
        g: HHGraph,
        states: NodeStates,
        scale_emb: Dict[str, torch.Tensor],
        direction: HierDirection = HierDirection.BI,
        return_attention: bool = False,
    ):
        high_receives, low_receives = receiving_sides(direction)
        out: NodeStates = {}
        attention: Dict[str, torch.Tensor] = {}

        for relation in HIER_RELATIONS:
            low_type, high_type = RELATIONS[relation]
            w = self.weights_for(relation)
            q, k, v = {}, {}, {}
            for node_type in (low_type, high_type):
                h = states[node_type]
                if self.use_scale:
                    h = h + scale_emb[NODE_SCALE[node_type]]
                q[node_type] = w["q"](h)
                k[node_type] = w["k"](h)
                v[node_type] = w["v"](h)

            pairs = torch.as_tensor(g.edges[relation], dtype=torch.long)
            directed = (
                (high_type, low_type, pairs[:, 0], pairs[:, 1], high_receives),
                (low_type, high_type, pairs[:, 1], pairs[:, 0], low_receives),
            )
            for dst_type, src_type, src, dst, receives in directed:
                if not receives or src.numel() == 0:
                    out[dst_type] = q[dst_type]
                    continue
                message, beta = self._attend(q[dst_type], k[src_type], v[src_type], src, dst)
                out[dst_type] = q[dst_type] + message
                attention[dst_type] = beta

        if return_attention:
            return out, attention
        return out

    def _attend(
        self,
        q: torch.Tensor,
        k: torch.Tensor,
        v: torch.Tensor,
        src: torch.Tensor,
        dst: torch.Tensor,
    ):
        num_dst = q.shape[0]
        num_edges = src.shape[0]
        qe = q[dst].view(num_edges, self.heads, self.head_dim)
        ke = k[src].view(num_edges, self.heads, self.head_dim)
        ve = v[src].view(num_edges, self.heads, self.head_dim)

        scores = (qe * ke).sum(dim=-1) / math.sqrt(self.head_dim)
        beta = edge_softmax(scores, dst, num_dst)
        message = q.new_zeros(num_dst, self.heads, self.head_dim).index_add(
            0, dst, beta.unsqueeze(-1) * ve
        )
        return message.reshape(num_dst, self.dim), beta
