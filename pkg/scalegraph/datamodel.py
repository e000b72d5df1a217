"""
Hierarchy index arithmetic, feature bags and the stand-in text encoder.

A low-scale patch n covers a 4x4 grid of high-scale patches; the child at
grid position m has the flat index r = 16n + m.
"""

from typing import Optional, Sequence, Tuple

import numpy as np
import torch

from .types import (
    HIGH_PER_LOW,
    ConfigurationError,
    EncodedTexts,
    FeatureBag,
    TextHierarchy,
)


NORM_EPS = 1e-12


def flatten_index(n: int, m: int) -> int:
    """Flat high-scale index of grid position m under low patch n."""
    if n < 0:
        raise ValueError(f"low patch index must be non-negative (got {n})")
    if not 0 <= m < HIGH_PER_LOW:
        raise ValueError(f"grid position must be in [0, {HIGH_PER_LOW}) (got {m})")
    return HIGH_PER_LOW * n + m


def parent_patch(r: int) -> int:
    """Low-scale parent of high-scale patch r."""
    if r < 0:
        raise ValueError(f"high patch index must be non-negative (got {r})")
    return r // HIGH_PER_LOW


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """
    Scale v (or every row of a matrix) to unit length.

    Vectors with norm <= 1e-12 are returned unchanged so zero padding
    stays zero.
    """
    arr = np.asarray(v)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    norms = np.linalg.norm(arr, axis=-1, keepdims=True)
    safe = np.where(norms > NORM_EPS, norms, 1.0)
    return arr / safe


def l2_normalize_tensor(t: torch.Tensor) -> torch.Tensor:
    """Row-wise l2_normalize for tensors, differentiable away from zero rows."""
    norms = t.norm(dim=-1, keepdim=True)
    return t / torch.where(norms > NORM_EPS, norms, torch.ones_like(norms))


def pad_children(
    children: Sequence[np.ndarray],
    positions: Sequence[int],
    dim: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Place up to 16 child vectors on the 4x4 grid, zero-filling the gaps.

    Args:
        children: Child feature vectors
        positions: Grid position of each child, distinct, in [0, 16)
        dim: Feature dimension, required when children is empty

    Returns:
        (16 x D matrix, validity vector) with validity True exactly at positions
    """
    if len(children) != len(positions):
        raise ValueError("children and positions must have the same length")
    if len(set(int(p) for p in positions)) != len(positions):
        raise ValueError(f"duplicate grid positions: {list(positions)}")
    if dim is None:
        if not children:
            raise ValueError("dim is required when no children are given")
        dim = int(np.asarray(children[0]).shape[-1])

    grid = np.zeros((HIGH_PER_LOW, dim), dtype=np.float32)
    validity = np.zeros(HIGH_PER_LOW, dtype=bool)
    for child, pos in zip(children, positions):
        pos = int(pos)
        if not 0 <= pos < HIGH_PER_LOW:
            raise ValueError(f"grid position must be in [0, {HIGH_PER_LOW}) (got {pos})")
        child = np.asarray(child, dtype=np.float32)
        if child.shape != (dim,):
            raise ValueError(f"child vector has shape {child.shape}, expected ({dim},)")
        grid[pos] = child
        validity[pos] = True
    return grid, validity


def build_bag(
    bag_id: str,
    low_feats: np.ndarray,
    high_feats: np.ndarray,
    validity: np.ndarray,
    label: int,
) -> FeatureBag:
    """
    Validate and normalise raw features into a FeatureBag.

    Rows are L2-normalised on construction (cosine similarity is then a dot
    product) and invalid high rows are forced to exactly zero.
    """
    low = np.asarray(low_feats, dtype=np.float32)
    high = np.asarray(high_feats, dtype=np.float32)
    valid = np.asarray(validity, dtype=bool)

    if low.ndim != 2 or high.ndim != 2:
        raise ValueError("low_feats and high_feats must be matrices")
    if high.shape[0] != low.shape[0] * HIGH_PER_LOW:
        raise ValueError(
            f"high_feats has {high.shape[0]} rows, expected {low.shape[0] * HIGH_PER_LOW}"
        )
    if high.shape[1] != low.shape[1]:
        raise ValueError("low and high features must share the feature dimension")
    if valid.shape != (high.shape[0],):
        raise ValueError("validity must have one entry per high-scale row")
    if label < 0:
        raise ValueError(f"label must be non-negative (got {label})")

    low = l2_normalize(low).astype(np.float32)
    high = l2_normalize(high).astype(np.float32)
    high[~valid] = 0.0
    return FeatureBag(
        bag_id=str(bag_id),
        low_feats=low,
        high_feats=high,
        validity=valid,
        label=int(label),
    )


def check_hierarchy(h: TextHierarchy) -> None:
    """Reject hierarchies whose arrays disagree with their declared sizes."""
    if h.base_parent_emb.shape[0] != h.num_parents:
        raise ConfigurationError(
            f"expected {h.num_parents} parent embeddings, got {h.base_parent_emb.shape[0]}"
        )
    if h.base_child_emb.shape[0] != h.num_children:
        raise ConfigurationError(
            f"expected {h.num_children} child embeddings, got {h.base_child_emb.shape[0]}"
        )
    dims = {h.base_parent_emb.shape[1], h.base_child_emb.shape[1],
            h.context_low.shape[1], h.context_high.shape[1]}
    if len(dims) != 1:
        raise ConfigurationError(f"text hierarchy arrays disagree on D_base: {sorted(dims)}")
    if h.context_low.shape != h.context_high.shape:
        raise ConfigurationError("low and high context banks must have the same shape")


class EncoderStub(torch.nn.Module):
    """
    Frozen stand-in for a vision-language text encoder.

    Mean-pools the context tokens together with a prompt's base embedding
    and applies a fixed random projection D_base -> D. Only the context
    tokens receive gradients.
    """

    def __init__(self, base_dim: int, dim: int, seed: int = 0, identity: bool = False):
        super().__init__()
        if identity:
            if base_dim != dim:
                raise ConfigurationError("an identity projection needs base_dim == dim")
            projection = torch.eye(dim)
        else:
            gen = torch.Generator().manual_seed(seed)
            projection = torch.randn(dim, base_dim, generator=gen) / base_dim ** 0.5
        self.register_buffer("projection", projection)
        self.base_dim = base_dim
        self.dim = dim

    def forward(self, context: torch.Tensor, base: torch.Tensor) -> torch.Tensor:
        if context.shape[-1] != self.base_dim or base.shape[-1] != self.base_dim:
            raise ConfigurationError(
                f"encoder expects D_base={self.base_dim}, got context {tuple(context.shape)} "
                f"and base {tuple(base.shape)}"
            )
        # mean over rows of stack(context, base), for every prompt at once
        pooled = (context.sum(dim=0, keepdim=True) + base) / (context.shape[0] + 1)
        return l2_normalize_tensor(pooled @ self.projection.T.to(pooled.dtype))


def encode_texts(
    h: TextHierarchy,
    stub: EncoderStub,
    context_low: Optional[torch.Tensor] = None,
    context_high: Optional[torch.Tensor] = None,
) -> EncodedTexts:
    """
    Encode every parent and child prompt of the hierarchy.

    context_low / context_high default to the hierarchy's stored tokens;
    the model passes its learnable parameters here so gradients reach them.
    """
    ctx_low = context_low if context_low is not None else torch.as_tensor(h.context_low)
    ctx_high = context_high if context_high is not None else torch.as_tensor(h.context_high)
    dtype = ctx_low.dtype
    parents = torch.as_tensor(h.base_parent_emb, dtype=dtype, device=ctx_low.device)
    children = torch.as_tensor(h.base_child_emb, dtype=dtype, device=ctx_high.device)
    return EncodedTexts(
        low=stub(ctx_low, parents),
        high=stub(ctx_high.to(dtype), children),
        parents_per_class=h.parents_per_class,
        children_per_parent=h.children_per_parent,
    )
