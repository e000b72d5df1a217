"""
Top-k patch-text logits, cross-entropy and the hierarchical text contrastive loss.
"""

from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import l2_normalize_tensor
from .types import ConfigurationError, HtclVariant


# Logit scale shipped with each encoder family
GAMMA_PRESETS = {
    "plip": 4.5871,
    "quiltnet": 4.6052,
    "conch": 4.0315,
}
DEFAULT_GAMMA = GAMMA_PRESETS["quiltnet"]


def class_logits(
    X: torch.Tensor,
    T: torch.Tensor,
    class_of_text: np.ndarray,
    num_classes: int,
    k: int,
    gamma: float = DEFAULT_GAMMA,
    return_topk: bool = False,
):
    """
    Per-class logit: gamma * mean of the k largest patch-text similarities.

    Candidates for class c are all (patch, text) pairs whose text belongs
    to c, flattened together; with fewer than k candidates all are used.

    Args:
        X: Patch states (n x D)
        T: Text states (t x D)
        class_of_text: Class of every text row
        num_classes: C
        k: Number of top scores averaged per class
        gamma: Logit scale
        return_topk: Also return {class: [(patch, text, score), ...]}

    Returns:
        Length-C logits (and the retained entries if requested)
    """
    if k < 1:
        raise ValueError(f"k must be at least 1 (got {k})")
    class_of_text = np.asarray(class_of_text)
    sims = l2_normalize_tensor(X) @ l2_normalize_tensor(T).T

    logits = []
    retained: Dict[int, List[Tuple[int, int, float]]] = {}
    for c in range(num_classes):
        cols = np.flatnonzero(class_of_text == c)
        if cols.size == 0:
            raise ConfigurationError(f"class {c} has no text prompts")
        if sims.shape[0] == 0:
            raise ValueError("cannot score a bag without patches")
        scores = sims[:, torch.as_tensor(cols, dtype=torch.long)].reshape(-1)
        top, idx = torch.topk(scores, min(k, scores.numel()))
        logits.append(gamma * top.mean())
        if return_topk:
            rows = (idx // cols.size).tolist()
            texts = cols[(idx % cols.size).cpu().numpy()].tolist()
            retained[c] = [(r, t, float(s)) for r, t, s in zip(rows, texts, top.detach().tolist())]

    out = torch.stack(logits)
    if return_topk:
        return out, retained
    return out


def fuse_and_ce(
    low_logits: torch.Tensor,
    high_logits: torch.Tensor,
    label: int,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Fused logits (low + high) and -log softmax(fused)[label]."""
    if low_logits.shape != high_logits.shape:
        raise ValueError(
            f"logit shapes differ: {tuple(low_logits.shape)} vs {tuple(high_logits.shape)}"
        )
    num_classes = low_logits.shape[0]
    if not 0 <= label < num_classes:
        raise ValueError(f"label {label} out of range for {num_classes} classes")
    fused = low_logits + high_logits
    target = torch.tensor([label], dtype=torch.long, device=fused.device)
    ce = F.cross_entropy(fused.unsqueeze(0), target)
    return fused, ce


def _sigmoid_pair_loss(sims: torch.Tensor, positive: np.ndarray) -> torch.Tensor:
    """
    Mean over anchors of -mean_pos log s(sim) - mean_neg log s(-sim).

    sims and positive are anchors x candidates.
    """
    positive = torch.as_tensor(positive, dtype=torch.bool, device=sims.device)
    negative = ~positive
    n_pos = positive.sum(dim=1)
    n_neg = negative.sum(dim=1)
    if bool((n_pos == 0).any()) or bool((n_neg == 0).any()):
        raise ConfigurationError(
            "every contrastive anchor needs at least one positive and one negative"
        )
    pos_term = -(F.logsigmoid(sims) * positive).sum(dim=1) / n_pos
    neg_term = -(F.logsigmoid(-sims) * negative).sum(dim=1) / n_neg
    return (pos_term + neg_term).mean()


def _cosine(A: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    return l2_normalize_tensor(A) @ l2_normalize_tensor(B).T


def htcl_class_wise(
    T_low: torch.Tensor,
    T_high: torch.Tensor,
    parents_per_class: int,
    children_per_parent: int,
) -> torch.Tensor:
    """
    Child-text anchors; positives are the parents of the anchor's class,
    negatives the parents of every other class.
    """
    parent_of_child = np.arange(T_high.shape[0]) // children_per_parent
    class_of_parent = np.arange(T_low.shape[0]) // parents_per_class
    class_of_child = class_of_parent[parent_of_child]
    positive = class_of_child[:, None] == class_of_parent[None, :]
    return _sigmoid_pair_loss(_cosine(T_high, T_low), positive)


def htcl_variant(
    variant: Union[HtclVariant, str],
    T_low: torch.Tensor,
    T_high: torch.Tensor,
    parents_per_class: int,
    children_per_parent: int,
) -> torch.Tensor:
    """
    Hierarchical text contrastive loss in any of its three anchor schemes.

    SHARE_PARENT anchors on the mean child embedding of each parent,
    INSTANCE_WISE on every child; both use the own parent as the only
    positive and every other parent as a negative.
    """
    try:
        variant = HtclVariant(variant)
    except ValueError:
        raise ConfigurationError(f"unknown HTCL variant: {variant!r}") from None

    if variant == HtclVariant.CLASS_WISE:
        return htcl_class_wise(T_low, T_high, parents_per_class, children_per_parent)

    num_parents = T_low.shape[0]
    parents = np.arange(num_parents)
    if variant == HtclVariant.SHARE_PARENT:
        anchors = T_high.reshape(num_parents, children_per_parent, -1).mean(dim=1)
        anchor_parent = parents
    else:
        anchors = T_high
        anchor_parent = np.arange(T_high.shape[0]) // children_per_parent
    positive = anchor_parent[:, None] == parents[None, :]
    return _sigmoid_pair_loss(_cosine(anchors, T_low), positive)


def total_loss(
    ce: torch.Tensor,
    htcl: Optional[torch.Tensor],
    lam: float,
) -> torch.Tensor:
    """ce + lam * htcl."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative (got {lam})")
    if htcl is None or lam == 0:
        return ce
    return ce + lam * htcl
