"""
End-to-end bag scorer.

score_bag() runs one slide through the whole pipeline:
  encode texts (current context tokens)
  -> filter patch/text pairs
  -> build the hierarchical heterogeneous graph
  -> message passing
  -> top-k logits per scale, cross-entropy, hierarchical text contrastive loss
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datamodel import EncoderStub, check_hierarchy, encode_texts
from .hhgnn import HHGNN
from .hhgraph import build_hhg
from .objective import class_logits, fuse_and_ce, htcl_variant, total_loss
from .tgdf import full_masks, tgdf
from .types import (
    EncodedTexts,
    FeatureBag,
    FilterMasks,
    HHGraph,
    LogitsBundle,
    NodeStates,
    RunConfig,
    ScaleMode,
    TextHierarchy,
)


@dataclass
class BagOutput:
    fused: torch.Tensor
    ce: torch.Tensor
    loss: torch.Tensor
    htcl: Optional[torch.Tensor] = None
    logits: Optional[LogitsBundle] = None
    masks: Optional[FilterMasks] = None
    graph: Optional[HHGraph] = None
    states: Optional[NodeStates] = None
    texts: Optional[EncodedTexts] = None


class BagClassifier(nn.Module):
    """Anything the fit loop can train: score_bag() must return a BagOutput with a loss."""

    num_classes: int

    def score_bag(self, bag: FeatureBag) -> BagOutput:
        raise NotImplementedError

    @torch.no_grad()
    def predict(self, bag: FeatureBag) -> Tuple[np.ndarray, int]:
        """Class probabilities and the predicted class."""
        fused = self.score_bag(bag).fused
        probs = F.softmax(fused.double(), dim=0).cpu().numpy()
        return probs, int(np.argmax(probs))


class ScaleGraphModel(BagClassifier):
    """
    Learnable parts: the two context token banks, every HHGNN weight and
    the scale embeddings. The encoder projection is frozen.
    """

    def __init__(self, hierarchy: TextHierarchy, config: RunConfig, dim: int):
        super().__init__()
        check_hierarchy(hierarchy)
        self.hierarchy = hierarchy
        self.config = config
        self.num_classes = hierarchy.num_classes
        self.encoder = EncoderStub(
            hierarchy.base_dim,
            dim,
            seed=config.encoder_seed,
            identity=config.encoder_projection == "identity",
        )
        self.context_low = nn.Parameter(torch.as_tensor(hierarchy.context_low).clone())
        self.context_high = nn.Parameter(torch.as_tensor(hierarchy.context_high).clone())
        self.gnn = HHGNN(
            dim,
            layers=config.layers,
            heads=config.heads,
            variant=config.aggregator,
            direction=config.hier_direction,
        )
        self.to(config.dtype)

    @property
    def message_passing(self) -> bool:
        # no filtered intra edges and no hier edges: nothing to pass
        return self.config.use_tgdf or self.config.use_hhg

    def encode(self) -> EncodedTexts:
        return encode_texts(self.hierarchy, self.encoder, self.context_low, self.context_high)

    def filter_masks(self, bag: FeatureBag, texts: EncodedTexts) -> FilterMasks:
        if not self.config.use_tgdf:
            return full_masks(bag, texts)
        return tgdf(bag, texts, self.config.alpha, self.config.tgdf_switches)

    def score_bag(self, bag: FeatureBag, masks: Optional[FilterMasks] = None) -> BagOutput:
        cfg = self.config
        texts = self.encode()
        if masks is None:
            masks = self.filter_masks(bag, texts)
        graph = build_hhg(bag, texts, masks, hierarchical=cfg.use_hhg)
        states = self.gnn(graph) if self.message_passing else dict(graph.node_feats)

        logits = self.logits(states, texts)
        fused, ce = fuse_and_ce(logits.low, logits.high, bag.label)
        logits.fused = fused

        htcl = None
        if cfg.use_htcl and cfg.lam > 0:
            htcl = htcl_variant(
                cfg.htcl_variant,
                states["text_low"],
                states["text_high"],
                self.hierarchy.parents_per_class,
                self.hierarchy.children_per_parent,
            )
        return BagOutput(
            fused=fused,
            ce=ce,
            htcl=htcl,
            loss=total_loss(ce, htcl, cfg.lam),
            logits=logits,
            masks=masks,
            graph=graph,
            states=states,
            texts=texts,
        )

    def logits(self, states: NodeStates, texts: EncodedTexts) -> LogitsBundle:
        cfg = self.config
        C = self.num_classes
        mode = ScaleMode(cfg.scale_mode)
        zeros = states["text_low"].new_zeros(C)
        contributions = {c: [] for c in range(C)}

        low = zeros
        if mode != ScaleMode.HIGH:
            low, kept = class_logits(
                states["img_low"], states["text_low"], texts.class_of_parent, C,
                cfg.topk_low, cfg.gamma, return_topk=True,
            )
            for c, entries in kept.items():
                contributions[c] += [("low", n, o, s) for n, o, s in entries]

        high = zeros
        if mode != ScaleMode.LOW and states["img_high"].shape[0] > 0:
            high, kept = class_logits(
                states["img_high"], states["text_high"], texts.class_of_child, C,
                cfg.topk_high, cfg.gamma, return_topk=True,
            )
            for c, entries in kept.items():
                contributions[c] += [("high", r, s, v) for r, s, v in entries]

        return LogitsBundle(low=low, high=high, fused=low + high, contributions=contributions)

    def high_states_full(self, graph: HHGraph, states: NodeStates, num_high: int) -> np.ndarray:
        """img_high states scattered back to all R rows (zeros on padding)."""
        compact = states["img_high"].detach().cpu().numpy()
        full = np.zeros((num_high, compact.shape[1]), dtype=compact.dtype)
        full[graph.high_index] = compact
        return full
