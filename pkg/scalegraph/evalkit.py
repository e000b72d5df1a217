"""
Classification metrics, the hierarchical hit ratio and interpretability triplets.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import accuracy_score, f1_score, roc_auc_score

from .datamodel import l2_normalize
from .types import HIGH_PER_LOW, FeatureBag, HHGraph, NodeStates, RunMetrics


def hit_ratio_at_k(
    bag: FeatureBag,
    E_low: np.ndarray,
    E_high: np.ndarray,
    children_per_parent: int,
    topk: int = 2,
    low_feats: Optional[np.ndarray] = None,
    high_feats: Optional[np.ndarray] = None,
) -> float:
    """
    Share of low patches whose region holds a child patch matching a child
    prompt of one of the patch's top-k parent prompts.

    Per low patch: take the top-k parent texts by cosine; a hit is scored
    if any valid child patch's best child text lies in their child sets
    (scanning stops at the first hit).

    Args:
        bag: Bag providing validity and (by default) the features
        E_low: Parent text embeddings (C*O x D)
        E_high: Child text embeddings (C*O*K x D)
        children_per_parent: K, child s belongs to parent s // K
        topk: Number of parent texts retained per low patch
        low_feats / high_feats: Replacement patch features (e.g. post-GNN
            states, high_feats with all R rows)
    """
    if topk < 1:
        raise ValueError(f"topk must be at least 1 (got {topk})")
    Z_low = np.asarray(bag.low_feats if low_feats is None else low_feats, dtype=np.float64)
    Z_high = np.asarray(bag.high_feats if high_feats is None else high_feats, dtype=np.float64)
    if Z_low.shape[0] == 0:
        raise ValueError("hit ratio is undefined for a bag without patches")

    S_low = l2_normalize(Z_low) @ l2_normalize(np.asarray(E_low, dtype=np.float64)).T
    S_high = l2_normalize(Z_high) @ l2_normalize(np.asarray(E_high, dtype=np.float64)).T
    child_parent = np.arange(S_high.shape[1]) // children_per_parent

    hits = 0
    for n in range(Z_low.shape[0]):
        top_parents = np.argsort(-S_low[n], kind="stable")[:topk]
        candidates = np.isin(child_parent, top_parents)
        for r in range(n * HIGH_PER_LOW, (n + 1) * HIGH_PER_LOW):
            if not bag.validity[r]:
                continue
            if candidates[int(np.argmax(S_high[r]))]:
                hits += 1
                break
    return hits / Z_low.shape[0]


def classification_metrics(
    predictions: Sequence[int],
    probabilities: np.ndarray,
    labels: Sequence[int],
    num_classes: Optional[int] = None,
) -> Dict[str, Optional[float]]:
    """
    Accuracy, macro one-vs-rest AUC and macro F1.

    AUC is None (missing, not 0) when labels hold a single class. For more
    than two classes, classes absent from labels are left out of the macro
    average.
    """
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    probabilities = np.asarray(probabilities, dtype=np.float64)
    if not (len(predictions) == len(labels) == len(probabilities)):
        raise ValueError("predictions, probabilities and labels must have equal lengths")
    if len(labels) == 0:
        raise ValueError("no samples to score")
    if not np.allclose(probabilities.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("probability rows must sum to 1")
    num_classes = num_classes or probabilities.shape[1]
    class_ids = list(range(num_classes))

    present = np.unique(labels)
    auc: Optional[float]
    if present.size < 2:
        auc = None
    elif num_classes == 2:
        auc = float(roc_auc_score(labels, probabilities[:, 1]))
    else:
        per_class = [
            roc_auc_score(labels == c, probabilities[:, c]) for c in class_ids if c in present
        ]
        auc = float(np.mean(per_class))

    return {
        "accuracy": float(accuracy_score(labels, predictions)),
        "auc": auc,
        "macro_f1": float(
            f1_score(labels, predictions, labels=class_ids, average="macro", zero_division=0)
        ),
    }


def summarize_metrics(records: Sequence[RunMetrics]) -> Dict[str, Dict[str, Optional[float]]]:
    """Mean and population std per metric over seeds; missing values are skipped."""
    frame = pd.DataFrame([
        {
            "accuracy": r.accuracy,
            "auc": r.auc,
            "macro_f1": r.macro_f1,
            "hit_ratio_at_2": r.hit_ratio_at_2,
        }
        for r in records
    ], dtype=float)
    summary = {}
    for column in frame.columns:
        values = frame[column].dropna()
        if values.empty:
            summary[column] = {"mean": None, "std": None}
        else:
            summary[column] = {"mean": float(values.mean()), "std": float(values.std(ddof=0))}
    return summary


@dataclass
class Triplet:
    """Anchor patch plus most similar / most dissimilar patches by text-score profile."""
    anchor: Optional[int]
    anchor_score: Optional[float]
    positives: List[Tuple[int, float]] = field(default_factory=list)
    negatives: List[Tuple[int, float]] = field(default_factory=list)


def scale_triplet(
    X: np.ndarray,
    T: np.ndarray,
    class_cols: np.ndarray,
    top_n: int = 3,
) -> Triplet:
    """
    Triplet at one scale.

    The anchor maximises similarity to any text of the class. Every patch
    is described by its similarity profile over all texts; positives are
    the patches whose profile is closest (cosine) to the anchor's,
    negatives the farthest.
    A scale with no patches gives an empty triplet (anchor None).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        return Triplet(anchor=None, anchor_score=None)
    X = l2_normalize(X)
    T = l2_normalize(np.asarray(T, dtype=np.float64))
    scores = X @ T.T
    class_scores = scores[:, np.asarray(class_cols)].max(axis=1)
    anchor = int(np.argmax(class_scores))

    profiles = l2_normalize(scores)
    closeness = profiles @ profiles[anchor]
    others = [i for i in np.argsort(-closeness, kind="stable") if i != anchor]
    positives = [(int(i), float(closeness[i])) for i in others[:top_n]]
    taken = {i for i, _ in positives}
    negatives = [
        (int(i), float(closeness[i])) for i in reversed(others) if int(i) not in taken
    ][:top_n]
    return Triplet(
        anchor=anchor,
        anchor_score=float(class_scores[anchor]),
        positives=positives,
        negatives=negatives,
    )


def interpretability_triplets(
    g: HHGraph,
    states: NodeStates,
    class_of_interest: int,
    parents_per_class: int,
    children_per_parent: int,
    top_n: int = 3,
) -> Dict[str, Triplet]:
    """
    Low- and high-scale triplets for one class; high-scale ids are reported
    as original flat indices r.
    """
    num_parents = int(states["text_low"].shape[0])
    num_classes = num_parents // parents_per_class
    if not 0 <= class_of_interest < num_classes:
        raise ValueError(f"class {class_of_interest} out of range for {num_classes} classes")

    class_of_parent = np.arange(num_parents) // parents_per_class
    class_of_child = class_of_parent[np.arange(num_parents * children_per_parent) // children_per_parent]

    def as_array(t):
        return t.detach().cpu().numpy()

    low = scale_triplet(
        as_array(states["img_low"]), as_array(states["text_low"]),
        np.flatnonzero(class_of_parent == class_of_interest), top_n,
    )
    high = scale_triplet(
        as_array(states["img_high"]), as_array(states["text_high"]),
        np.flatnonzero(class_of_child == class_of_interest), top_n,
    )
    remap = g.high_index
    high = Triplet(
        anchor=None if high.anchor is None else int(remap[high.anchor]),
        anchor_score=high.anchor_score,
        positives=[(int(remap[i]), s) for i, s in high.positives],
        negatives=[(int(remap[i]), s) for i, s in high.negatives],
    )
    return {"low": low, "high": high}
