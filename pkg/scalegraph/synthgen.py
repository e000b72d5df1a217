"""
Seeded synthetic bags with a genuine parent/child prototype hierarchy.

Every class owns O parent prototypes on the unit sphere and every parent K
child prototypes near it. A bag of class c mixes signal patches (low patch
near one of c's parents, its children near that parent's child prototypes)
with background patches drawn around prototypes shared by all classes.
Text base embeddings are noisy copies of the prototypes.
"""

from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np

from .datamodel import build_bag, l2_normalize, pad_children
from .types import HIGH_PER_LOW, ConfigurationError, FeatureBag, TextHierarchy


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 3
    bags_per_class: int = 30
    min_patches: int = 4
    max_patches: int = 12
    dim: int = 64
    parents_per_class: int = 4
    children_per_parent: int = 3
    signal_fraction: float = 0.8        # rho
    noise: float = 0.5                  # tau, norm of patch noise
    text_noise: Optional[float] = None  # defaults to tau
    class_separation: float = 0.8       # spread of prototypes around a shared centre
    child_spread: float = 0.5           # child prototype distance from its parent
    background_prototypes: int = 4
    missing_child_rate: float = 0.1     # share of zero-padded children
    context_tokens: int = 16
    context_scale: float = 0.02
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        if self.num_classes < 1 or self.bags_per_class < 1:
            raise ConfigurationError("need at least one class and one bag per class")
        if not 1 <= self.min_patches <= self.max_patches:
            raise ConfigurationError("patch counts must satisfy 1 <= min_patches <= max_patches")
        if self.dim < 1 or self.parents_per_class < 1 or self.children_per_parent < 1:
            raise ConfigurationError("dim, parents_per_class and children_per_parent must be positive")
        if not 0 <= self.signal_fraction <= 1:
            raise ConfigurationError(f"signal_fraction must lie in [0, 1] (got {self.signal_fraction})")
        if self.noise <= 0:
            raise ConfigurationError(f"noise must be positive (got {self.noise})")
        if self.text_noise is not None and self.text_noise < 0:
            raise ConfigurationError("text_noise must be non-negative")
        if not 0 <= self.missing_child_rate < 1:
            raise ConfigurationError("missing_child_rate must lie in [0, 1)")
        if self.background_prototypes < 1 or self.context_tokens < 1:
            raise ConfigurationError("background_prototypes and context_tokens must be positive")


def _unit(rng: np.random.Generator, *shape: int) -> np.ndarray:
    return l2_normalize(rng.standard_normal(shape))


def _jitter(rng: np.random.Generator, centre: np.ndarray, scale: float) -> np.ndarray:
    """centre plus a random direction of length `scale`, renormalised."""
    return l2_normalize(centre + scale * _unit(rng, *centre.shape))


@dataclass
class Prototypes:
    parents: np.ndarray       # (C*O) x D
    children: np.ndarray      # (C*O*K) x D
    background: np.ndarray    # B x D
    background_children: np.ndarray   # B x K x D


def make_prototypes(cfg: SynthConfig, rng: np.random.Generator) -> Prototypes:
    centre = _unit(rng, cfg.dim)
    num_parents = cfg.num_classes * cfg.parents_per_class
    parents = _jitter(rng, np.tile(centre, (num_parents, 1)), cfg.class_separation)
    children = _jitter(
        rng, np.repeat(parents, cfg.children_per_parent, axis=0), cfg.child_spread
    )
    background = _jitter(rng, np.tile(centre, (cfg.background_prototypes, 1)), cfg.class_separation)
    background_children = _jitter(
        rng,
        np.repeat(background[:, None, :], cfg.children_per_parent, axis=1),
        cfg.child_spread,
    )
    return Prototypes(parents, children, background, background_children)


def _make_bag(
    cfg: SynthConfig,
    protos: Prototypes,
    bag_id: str,
    label: int,
    rng: np.random.Generator,
) -> FeatureBag:
    K = cfg.children_per_parent
    n_low = int(rng.integers(cfg.min_patches, cfg.max_patches + 1))
    n_signal = int(round(cfg.signal_fraction * n_low))
    is_signal = np.zeros(n_low, dtype=bool)
    is_signal[rng.permutation(n_low)[:n_signal]] = True

    low_rows, high_blocks, valid_blocks = [], [], []
    for n in range(n_low):
        if is_signal[n]:
            parent = label * cfg.parents_per_class + int(rng.integers(cfg.parents_per_class))
            centre = protos.parents[parent]
            child_protos = protos.children[parent * K:(parent + 1) * K]
        else:
            b = int(rng.integers(cfg.background_prototypes))
            centre = protos.background[b]
            child_protos = protos.background_children[b]

        low_rows.append(_jitter(rng, centre, cfg.noise))
        present = np.flatnonzero(rng.random(HIGH_PER_LOW) >= cfg.missing_child_rate)
        picks = rng.integers(K, size=present.size)
        children = [_jitter(rng, child_protos[k], cfg.noise) for k in picks]
        grid, validity = pad_children(children, present.tolist(), dim=cfg.dim)
        high_blocks.append(grid)
        valid_blocks.append(validity)

    return build_bag(
        bag_id,
        np.stack(low_rows),
        np.concatenate(high_blocks),
        np.concatenate(valid_blocks),
        label,
    )


def generate_dataset(cfg: SynthConfig) -> Tuple[List[FeatureBag], TextHierarchy]:
    """
    Deterministic dataset for a config: balanced bags plus the text hierarchy.

    The seed stream is split per bag (SeedSequence.spawn), so every bag can
    be regenerated independently of the others.
    """
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    proto_seq, text_seq, *bag_seqs = root.spawn(2 + cfg.num_classes * cfg.bags_per_class)

    protos = make_prototypes(cfg, np.random.default_rng(proto_seq))

    bags = []
    for c in range(cfg.num_classes):
        for i in range(cfg.bags_per_class):
            seq = bag_seqs[c * cfg.bags_per_class + i]
            bag_id = f"c{c}_b{i:03d}"
            bags.append(_make_bag(cfg, protos, bag_id, c, np.random.default_rng(seq)))

    text_rng = np.random.default_rng(text_seq)
    text_noise = cfg.noise if cfg.text_noise is None else cfg.text_noise
    if text_noise > 0:
        parent_text = _jitter(text_rng, protos.parents, text_noise)
        child_text = _jitter(text_rng, protos.children, text_noise)
    else:
        parent_text, child_text = protos.parents.copy(), protos.children.copy()
    shape = (cfg.context_tokens, cfg.dim)
    hierarchy = TextHierarchy(
        num_classes=cfg.num_classes,
        parents_per_class=cfg.parents_per_class,
        children_per_parent=cfg.children_per_parent,
        base_parent_emb=parent_text.astype(np.float32),
        base_child_emb=child_text.astype(np.float32),
        context_low=(cfg.context_scale * text_rng.standard_normal(shape)).astype(np.float32),
        context_high=(cfg.context_scale * text_rng.standard_normal(shape)).astype(np.float32),
    )
    return bags, hierarchy
