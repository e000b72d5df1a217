"""
Hierarchical heterogeneous graph construction.

Four node types (img_low, img_high, text_low, text_high) and four
relations: intra_low / intra_high from the filter masks, hier_img from the
patch grid and hier_text from the prompt hierarchy.
"""

from typing import Dict, Tuple

import numpy as np
import torch

from .types import (
    HIGH_PER_LOW,
    RELATIONS,
    EncodedTexts,
    FeatureBag,
    FilterMasks,
    HHGraph,
)


def _pairs(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return np.stack([rows, cols], axis=1).astype(np.int64).reshape(-1, 2)


def build_hhg(
    bag: FeatureBag,
    texts: EncodedTexts,
    masks: FilterMasks,
    hierarchical: bool = True,
) -> HHGraph:
    """
    Build the graph for one bag.

    Padded high patches are dropped from the node set together with every
    edge that would touch them. Text nodes of all classes are always present.
    hierarchical=False empties hier_img and hier_text (graph without
    cross-scale edges).
    """
    num_low_texts = int(texts.low.shape[0])
    num_high_texts = int(texts.high.shape[0])
    if masks.low.shape != (bag.num_low, num_low_texts):
        raise ValueError(
            f"low mask shape {masks.low.shape} does not match "
            f"{bag.num_low} patches x {num_low_texts} texts"
        )
    if masks.high.shape != (bag.num_high, num_high_texts):
        raise ValueError(
            f"high mask shape {masks.high.shape} does not match "
            f"{bag.num_high} patches x {num_high_texts} texts"
        )
    if np.any(masks.high & ~bag.validity[:, None]):
        raise ValueError("high mask selects padded patches")

    high_index = np.flatnonzero(bag.validity).astype(np.int64)
    high_compact = np.full(bag.num_high, -1, dtype=np.int64)
    high_compact[high_index] = np.arange(high_index.size)

    low_rows, low_cols = np.nonzero(masks.low)
    high_rows, high_cols = np.nonzero(masks.high)
    edges: Dict[str, np.ndarray] = {
        "intra_low": _pairs(low_rows, low_cols),
        "intra_high": _pairs(high_compact[high_rows], high_cols),
    }
    if hierarchical:
        edges["hier_img"] = _pairs(high_index // HIGH_PER_LOW, np.arange(high_index.size))
        edges["hier_text"] = _pairs(texts.parent_of_child, np.arange(num_high_texts))
    else:
        edges["hier_img"] = np.zeros((0, 2), dtype=np.int64)
        edges["hier_text"] = np.zeros((0, 2), dtype=np.int64)

    dtype = texts.low.dtype
    node_feats = {
        "img_low": torch.as_tensor(bag.low_feats, dtype=dtype),
        "img_high": torch.as_tensor(bag.high_feats[high_index], dtype=dtype),
        "text_low": texts.low,
        "text_high": texts.high,
    }
    return HHGraph(
        node_feats=node_feats,
        edges=edges,
        high_index=high_index,
        high_compact=high_compact,
        bag_id=bag.bag_id,
    )


def edge_counts(g: HHGraph) -> Dict[str, int]:
    """Number of stored (undirected) edges per relation."""
    return {relation: int(g.edges[relation].shape[0]) for relation in RELATIONS}


def expand_bidirectional(g: HHGraph, relation: str) -> Tuple[np.ndarray, ...]:
    """
    Directed view of one relation: every stored edge in both directions.

    Returns:
        (src_types, src_idx, dst_types, dst_idx) arrays of length 2E
    """
    src_type, dst_type = RELATIONS[relation]
    pairs = g.edges[relation]
    n = pairs.shape[0]
    src_types = np.array([src_type] * n + [dst_type] * n, dtype=object)
    dst_types = np.array([dst_type] * n + [src_type] * n, dtype=object)
    src_idx = np.concatenate([pairs[:, 0], pairs[:, 1]])
    dst_idx = np.concatenate([pairs[:, 1], pairs[:, 0]])
    return src_types, src_idx, dst_types, dst_idx


def without_relations(g: HHGraph, *relations: str) -> HHGraph:
    """Copy of g with the given relations emptied (node sets unchanged)."""
    edges = dict(g.edges)
    for relation in relations:
        edges[relation] = np.zeros((0, 2), dtype=np.int64)
    return HHGraph(
        node_feats=g.node_feats,
        edges=edges,
        high_index=g.high_index,
        high_compact=g.high_compact,
        bag_id=g.bag_id,
    )
