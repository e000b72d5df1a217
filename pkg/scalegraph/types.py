"""
Shared type definitions for scalegraph.
"""

from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch


# Grid of high-scale children under one low-scale patch (4x4)
HIGH_PER_LOW = 16


class ConfigurationError(ValueError):
    """Raised when a run, model or dataset configuration is unusable."""


class DivergenceError(RuntimeError):
    """Raised when a training loss stops being finite."""


class HierVariant(str, Enum):
    """Hierarchical aggregator used on hier_img / hier_text edges."""
    MSA = "msa"       # relation-specific weights + scale embeddings
    SAA = "saa"       # shared weights + scale embeddings
    MAA = "maa"       # relation-specific weights, no scale embeddings
    ATTN = "attn"     # shared weights, no scale embeddings
    SAGE = "sage"     # mean-neighbour GraphSAGE, no attention


class HtclVariant(str, Enum):
    CLASS_WISE = "class_wise"
    SHARE_PARENT = "share_parent"
    INSTANCE_WISE = "instance_wise"


class BaselineKind(str, Enum):
    MEAN_POOL = "mean_pool"
    MAX_POOL = "max_pool"
    ATTN_MIL = "attn_mil"


class HierDirection(str, Enum):
    BI = "bi"
    TOP_DOWN = "top_down"
    NONE = "none"


class ScaleMode(str, Enum):
    BOTH = "both"
    LOW = "low"
    HIGH = "high"


# Node types and relations of the hierarchical heterogeneous graph
NODE_TYPES = ("img_low", "img_high", "text_low", "text_high")

# relation -> (source node type, destination node type); edges are bidirectional
RELATIONS: Dict[str, Tuple[str, str]] = {
    "intra_low": ("img_low", "text_low"),
    "intra_high": ("img_high", "text_high"),
    "hier_img": ("img_low", "img_high"),
    "hier_text": ("text_low", "text_high"),
}
INTRA_RELATIONS = ("intra_low", "intra_high")
HIER_RELATIONS = ("hier_img", "hier_text")

# Scale of every node type (scale embeddings are indexed by scale, not modality)
NODE_SCALE = {
    "img_low": "low",
    "text_low": "low",
    "img_high": "high",
    "text_high": "high",
}


@dataclass(frozen=True)
class FeatureBag:
    """One slide: low-scale patches, their 16 high-scale children and a label."""
    bag_id: str
    low_feats: np.ndarray       # N x D, unit rows
    high_feats: np.ndarray      # (N*16) x D, zero rows where validity is False
    validity: np.ndarray        # bool, length N*16
    label: int

    @property
    def num_low(self) -> int:
        return int(self.low_feats.shape[0])

    @property
    def num_high(self) -> int:
        return int(self.high_feats.shape[0])

    @property
    def dim(self) -> int:
        return int(self.low_feats.shape[1])

    @property
    def num_valid_high(self) -> int:
        return int(self.validity.sum())


@dataclass(frozen=True)
class TextHierarchy:
    """
    Per class, O parent prompts each with K child prompts.

    Parents are laid out class-major (o = c*O + j) and children parent-major
    (s = o*K + k), so every index map is integer division.
    """
    num_classes: int
    parents_per_class: int
    children_per_parent: int
    base_parent_emb: np.ndarray     # (C*O) x D_base
    base_child_emb: np.ndarray      # (C*O*K) x D_base
    context_low: np.ndarray         # L x D_base, initial value of the learnable tokens
    context_high: np.ndarray        # L x D_base

    @property
    def num_parents(self) -> int:
        return self.num_classes * self.parents_per_class

    @property
    def num_children(self) -> int:
        return self.num_parents * self.children_per_parent

    @property
    def base_dim(self) -> int:
        return int(self.base_parent_emb.shape[1])

    @property
    def context_length(self) -> int:
        return int(self.context_low.shape[0])

    @property
    def parent_of_child(self) -> np.ndarray:
        return np.arange(self.num_children) // self.children_per_parent

    @property
    def class_of_parent(self) -> np.ndarray:
        return np.arange(self.num_parents) // self.parents_per_class

    @property
    def class_of_child(self) -> np.ndarray:
        return self.class_of_parent[self.parent_of_child]


@dataclass
class EncodedTexts:
    """Unit-norm text embeddings for the current context tokens."""
    low: torch.Tensor               # (C*O) x D
    high: torch.Tensor              # (C*O*K) x D
    parents_per_class: int
    children_per_parent: int

    @property
    def num_classes(self) -> int:
        return int(self.low.shape[0]) // self.parents_per_class

    @property
    def parent_of_child(self) -> np.ndarray:
        return np.arange(int(self.high.shape[0])) // self.children_per_parent

    @property
    def class_of_parent(self) -> np.ndarray:
        return np.arange(int(self.low.shape[0])) // self.parents_per_class

    @property
    def class_of_child(self) -> np.ndarray:
        return self.class_of_parent[self.parent_of_child]


@dataclass(frozen=True)
class TgdfSwitches:
    """Component switches for filtering ablations."""
    mask_propagation: bool = True
    low_filter: bool = True


@dataclass(frozen=True)
class FilterMasks:
    low: np.ndarray     # bool, N x (C*O)
    high: np.ndarray    # bool, R x (C*O*K)
    alpha: float


@dataclass
class HHGraph:
    """
    Hierarchical heterogeneous graph for one bag.

    Edges are stored once per relation as (src, dst) rows in the orientation
    given by RELATIONS and are read in both directions by message passing.
    img_high nodes hold valid high patches only; high_index maps compact
    row -> original high index r, and high_compact maps r -> row (or -1).
    """
    node_feats: Dict[str, torch.Tensor]
    edges: Dict[str, np.ndarray]
    high_index: np.ndarray
    high_compact: np.ndarray
    bag_id: str = ""

    def num_nodes(self, node_type: str) -> int:
        return int(self.node_feats[node_type].shape[0])


NodeStates = Dict[str, torch.Tensor]


@dataclass
class LogitsBundle:
    low: torch.Tensor
    high: torch.Tensor
    fused: torch.Tensor
    # per class: (scale, patch index, text index, score) of the retained top-k entries
    contributions: Dict[int, List[Tuple[str, int, int, float]]] = field(default_factory=dict)


@dataclass
class RunMetrics:
    """Metrics for one seed of one configuration."""
    seed: int
    accuracy: float
    auc: Optional[float]
    macro_f1: float
    hit_ratio_at_2: Optional[float] = None
    best_val_f1: Optional[float] = None
    epochs: int = 0


@dataclass(frozen=True)
class RunConfig:
    """
    Immutable snapshot of one experiment configuration.
    Produced by Config.snapshot(); every run reads only this.
    """
    # Few-shot protocol
    shots: int = 16
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)

    # Filtering and loss
    alpha: float = 0.5
    lam: float = 0.5

    # Text hierarchy
    context_tokens: int = 16
    parents_per_class: int = 4
    children_per_parent: int = 3

    # Graph network
    layers: int = 2
    heads: int = 2
    aggregator: str = HierVariant.MSA.value
    hier_direction: str = HierDirection.BI.value

    # Logits
    topk_low: int = 2
    topk_high: int = 100
    gamma: float = 4.6052
    scale_mode: str = ScaleMode.BOTH.value

    # Optimisation
    lr: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 1
    max_epochs: int = 50
    patience: int = 10

    # Ablations
    htcl_variant: str = HtclVariant.CLASS_WISE.value
    tgdf_mask_propagation: bool = True
    tgdf_low_filter: bool = True
    use_tgdf: bool = True
    use_hhg: bool = True
    use_htcl: bool = True

    # Evaluation
    hit_ratio_source: str = "post_gnn"     # "post_gnn" | "raw"
    hit_ratio_topk: int = 2

    # Data and outputs
    dataset_path: str = ""
    output_dir: str = "runs"
    encoder_seed: int = 0
    encoder_projection: str = "identity"   # "identity" | "random"
    float64: bool = False
    workers: int = 1
    time: bool = False
    quiet: bool = False

    @property
    def tgdf_switches(self) -> TgdfSwitches:
        return TgdfSwitches(
            mask_propagation=self.tgdf_mask_propagation,
            low_filter=self.tgdf_low_filter,
        )

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.float64 else torch.float32

    def to_dict(self) -> dict:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data["seeds"] = list(self.seeds)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown run config keys: {unknown}")
        values = dict(data)
        if "seeds" in values:
            values["seeds"] = tuple(int(s) for s in values["seeds"])
        return cls(**values)

    def validate(self) -> None:
        """Reject configurations no run can honour."""
        if self.shots not in (4, 8, 16):
            raise ConfigurationError(f"shots must be one of 4, 8, 16 (got {self.shots})")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if self.batch_size != 1:
            raise ConfigurationError("batch_size must be 1: bags have different sizes")
        if self.alpha < 0 or self.lam < 0:
            raise ConfigurationError("alpha and lam must be non-negative")
        if self.topk_low < 1 or self.topk_high < 1 or self.hit_ratio_topk < 1:
            raise ConfigurationError("top-k values must be at least 1")
        if self.layers < 1 or self.heads < 1:
            raise ConfigurationError("layers and heads must be at least 1")
        if self.max_epochs < 1 or self.patience < 1:
            raise ConfigurationError("max_epochs and patience must be at least 1")
        if self.parents_per_class < 1 or self.children_per_parent < 1:
            raise ConfigurationError("the text hierarchy needs at least one parent and one child")
        if self.encoder_projection not in ("identity", "random"):
            raise ConfigurationError(f"unknown encoder_projection: {self.encoder_projection}")
        if self.hit_ratio_source not in ("post_gnn", "raw"):
            raise ConfigurationError(f"unknown hit_ratio_source: {self.hit_ratio_source}")
        for value, enum in (
            (self.aggregator, HierVariant),
            (self.htcl_variant, HtclVariant),
            (self.hier_direction, HierDirection),
            (self.scale_mode, ScaleMode),
        ):
            try:
                enum(value)
            except ValueError:
                raise ConfigurationError(f"unknown {enum.__name__} value: {value!r}") from None
