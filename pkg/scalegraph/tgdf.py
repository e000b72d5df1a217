"""
Text-guided dynamic filtering.

Stage 1 keeps low-scale patch/text pairs whose cosine similarity reaches
mean + alpha * std of that text's column. Stage 2 gates high-scale scores
by the stage-1 decision of their parent patch and parent text, then applies
the same text-wise threshold to the gated matrix.
"""

from typing import Optional

import numpy as np

from .datamodel import l2_normalize
from .types import HIGH_PER_LOW, EncodedTexts, FeatureBag, FilterMasks, TgdfSwitches


# Scores within rounding distance of a threshold count as reaching it
TIE_TOLERANCE = 1e-12


def cosine_sim(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise similarity of unit rows (a plain dot product)."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ValueError(f"cannot compare rows of shapes {A.shape} and {B.shape}")
    return A @ B.T


def _column_threshold(S: np.ndarray, alpha: float) -> np.ndarray:
    # population std: defined for a single row and gives threshold = mean
    return S.mean(axis=0) + alpha * S.std(axis=0)


def low_scale_filter(S_low: np.ndarray, alpha: float) -> np.ndarray:
    """Text-wise soft threshold over all patches of the bag."""
    S_low = np.asarray(S_low, dtype=np.float64)
    if S_low.ndim != 2 or S_low.shape[0] == 0 or S_low.shape[1] == 0:
        raise ValueError(f"low-scale similarity matrix must be non-empty 2-D (got {S_low.shape})")
    return S_low >= _column_threshold(S_low, alpha) - TIE_TOLERANCE


def high_scale_filter(
    S_high: np.ndarray,
    low_mask: np.ndarray,
    alpha: float,
    validity: np.ndarray,
    parent_of_child: np.ndarray,
) -> np.ndarray:
    """
    Refine high-scale pairs under the propagated low-scale mask.

    Column statistics run over all R rows of the gated matrix, zeros
    included. An entry survives only if it reaches its column threshold,
    its parent pair survived stage 1 and the patch is real (not padding).
    """
    S_high = np.asarray(S_high, dtype=np.float64)
    low_mask = np.asarray(low_mask, dtype=bool)
    validity = np.asarray(validity, dtype=bool)
    parent_of_child = np.asarray(parent_of_child, dtype=np.int64)

    R, S = S_high.shape
    if low_mask.shape[0] * HIGH_PER_LOW != R:
        raise ValueError(f"low mask covers {low_mask.shape[0]} patches but S_high has {R} rows")
    if parent_of_child.shape != (S,):
        raise ValueError(f"parent_of_child needs {S} entries (got {parent_of_child.shape})")
    if validity.shape != (R,):
        raise ValueError(f"validity needs {R} entries (got {validity.shape})")
    if S and parent_of_child.max() >= low_mask.shape[1]:
        raise ValueError("parent_of_child points past the low-scale text columns")

    parents = np.arange(R) // HIGH_PER_LOW
    gate = low_mask[parents][:, parent_of_child]
    masked = S_high * gate
    passed = masked >= _column_threshold(masked, alpha) - TIE_TOLERANCE
    # without the gate an all-zero column would pass everywhere (0 >= 0)
    return passed & gate & validity[:, None]


def tgdf(
    bag: FeatureBag,
    texts: EncodedTexts,
    alpha: float,
    switches: Optional[TgdfSwitches] = None,
) -> FilterMasks:
    """
    Run both filtering stages for one bag.

    switches.low_filter=False keeps every low-scale pair;
    switches.mask_propagation=False filters the high scale on its own.
    """
    switches = switches or TgdfSwitches()
    E_low = l2_normalize(texts.low.detach().cpu().numpy().astype(np.float64))
    E_high = l2_normalize(texts.high.detach().cpu().numpy().astype(np.float64))

    S_low = cosine_sim(bag.low_feats, E_low)
    if switches.low_filter:
        low_mask = low_scale_filter(S_low, alpha)
    else:
        low_mask = np.ones_like(S_low, dtype=bool)

    gate = low_mask if switches.mask_propagation else np.ones_like(low_mask)
    S_high = cosine_sim(bag.high_feats, E_high)
    high_mask = high_scale_filter(S_high, gate, alpha, bag.validity, texts.parent_of_child)
    return FilterMasks(low=low_mask, high=high_mask, alpha=float(alpha))


def full_masks(bag: FeatureBag, texts: EncodedTexts) -> FilterMasks:
    """Masks with every pair kept (filtering disabled); padding stays excluded."""
    low = np.ones((bag.num_low, int(texts.low.shape[0])), dtype=bool)
    high = np.repeat(bag.validity[:, None], int(texts.high.shape[0]), axis=1)
    return FilterMasks(low=low, high=high, alpha=float("nan"))
