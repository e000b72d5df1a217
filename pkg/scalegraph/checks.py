"""
Invariant and gradient suites behind `python -m scalegraph check`.

The oracles here are written independently of the production code paths
(plain loops, scipy for the closed forms) so the two can be compared.
"""

import math
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.special import log_expit

from .aggregators import init_near_identity
from .aggregators.attention import AttentionAggregator
from .datamodel import build_bag, l2_normalize
from .evalkit import hit_ratio_at_k
from .hhgraph import build_hhg, edge_counts
from .hhgnn import HHGNN
from .model import ScaleGraphModel
from .objective import htcl_variant
from .synthgen import SynthConfig, generate_dataset
from .tgdf import TIE_TOLERANCE, full_masks, tgdf
from .types import (
    HIGH_PER_LOW,
    EncodedTexts,
    FeatureBag,
    FilterMasks,
    HierDirection,
    HierVariant,
    HtclVariant,
    RunConfig,
    TgdfSwitches,
)


@dataclass
class CheckResult:
    """Outcome of one check suite."""
    name: str
    passed: bool
    detail: str = ""


# Random instances

def random_bag(
    rng: np.random.Generator,
    num_low: int,
    dim: int,
    missing_rate: float = 0.2,
    label: int = 0,
    bag_id: str = "toy",
) -> FeatureBag:
    low = rng.standard_normal((num_low, dim))
    high = rng.standard_normal((num_low * HIGH_PER_LOW, dim))
    validity = rng.random(num_low * HIGH_PER_LOW) >= missing_rate
    return build_bag(bag_id, low, high, validity, label)


def random_texts(
    rng: np.random.Generator,
    num_classes: int,
    parents_per_class: int,
    children_per_parent: int,
    dim: int,
    dtype: torch.dtype = torch.float64,
) -> EncodedTexts:
    num_parents = num_classes * parents_per_class
    low = l2_normalize(rng.standard_normal((num_parents, dim)))
    high = l2_normalize(rng.standard_normal((num_parents * children_per_parent, dim)))
    return EncodedTexts(
        low=torch.as_tensor(low, dtype=dtype),
        high=torch.as_tensor(high, dtype=dtype),
        parents_per_class=parents_per_class,
        children_per_parent=children_per_parent,
    )


# Oracles

def _dot(a: Sequence[float], b: Sequence[float]) -> float:
    return math.fsum(x * y for x, y in zip(a, b))


def _threshold(column: List[float], alpha: float) -> float:
    mean = math.fsum(column) / len(column)
    var = math.fsum((x - mean) ** 2 for x in column) / len(column)
    return mean + alpha * math.sqrt(var)


def reference_tgdf(
    bag: FeatureBag,
    E_low: np.ndarray,
    E_high: np.ndarray,
    children_per_parent: int,
    alpha: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """Two-stage filtering written out entry by entry."""
    N, R = bag.num_low, bag.num_high
    P, S = E_low.shape[0], E_high.shape[0]
    low = bag.low_feats.tolist()
    high = bag.high_feats.tolist()

    low_mask = np.zeros((N, P), dtype=bool)
    for o in range(P):
        column = [_dot(low[n], E_low[o]) for n in range(N)]
        thr = _threshold(column, alpha)
        for n in range(N):
            low_mask[n, o] = column[n] >= thr - TIE_TOLERANCE

    high_mask = np.zeros((R, S), dtype=bool)
    for s in range(S):
        parent = s // children_per_parent
        eligible = [bool(low_mask[r // HIGH_PER_LOW, parent]) for r in range(R)]
        column = [_dot(high[r], E_high[s]) if eligible[r] else 0.0 for r in range(R)]
        thr = _threshold(column, alpha)
        for r in range(R):
            high_mask[r, s] = eligible[r] and bool(bag.validity[r]) and column[r] >= thr - TIE_TOLERANCE
    return low_mask, high_mask


def reference_hit_ratio(
    bag: FeatureBag,
    E_low: np.ndarray,
    E_high: np.ndarray,
    children_per_parent: int,
    topk: int,
) -> float:
    """Hit ratio by brute force over patches, parents and children."""
    def cos(a, b):
        na, nb = math.sqrt(_dot(a, a)), math.sqrt(_dot(b, b))
        return _dot(a, b) / (na * nb) if na > 0 and nb > 0 else 0.0

    hits = 0
    for n in range(bag.num_low):
        scores = [(cos(bag.low_feats[n], E_low[o]), o) for o in range(E_low.shape[0])]
        # ties keep the lower index first
        ranked = sorted(scores, key=lambda t: (-t[0], t[1]))
        top = {o for _, o in ranked[:topk]}
        allowed = {s for s in range(E_high.shape[0]) if s // children_per_parent in top}
        for r in range(n * HIGH_PER_LOW, (n + 1) * HIGH_PER_LOW):
            if not bag.validity[r]:
                continue
            best = max(range(E_high.shape[0]), key=lambda s: (cos(bag.high_feats[r], E_high[s]), -s))
            if best in allowed:
                hits += 1
                break
    return hits / bag.num_low


# Suites

def check_tgdf_oracle(trials: int = 100, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        C, O, K = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
        bag = random_bag(rng, int(rng.integers(1, 9)), 6)
        texts = random_texts(rng, C, O, K, 6)
        alpha = float(rng.choice([0.0, 0.1, 0.5, 1.0]))
        masks = tgdf(bag, texts, alpha)
        ref_low, ref_high = reference_tgdf(bag, texts.low.numpy(), texts.high.numpy(), K, alpha)
        if not (np.array_equal(masks.low, ref_low) and np.array_equal(masks.high, ref_high)):
            return CheckResult("tgdf_oracle", False, f"mismatch on trial {trial}")
    return CheckResult("tgdf_oracle", True, f"{trials} random instances")


def check_tgdf_monotonicity(trials: int = 50, seed: int = 0) -> CheckResult:
    """
    Raising alpha never adds a low-scale pair, nor a high-scale pair when
    propagation is off; every kept high pair has a kept parent pair.

    With propagation on the stage-2 columns change with alpha (gated rows
    become zeros), so the high mask is not compared across alphas there.
    """
    rng = np.random.default_rng(seed)
    alphas = (0.0, 0.25, 0.5, 1.0)
    flat = TgdfSwitches(mask_propagation=False)
    for trial in range(trials):
        C, O, K = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
        bag = random_bag(rng, int(rng.integers(1, 9)), 6)
        texts = random_texts(rng, C, O, K, 6)
        masks = [tgdf(bag, texts, a) for a in alphas]
        unpropagated = [tgdf(bag, texts, a, flat) for a in alphas]
        for m in masks:
            rows, cols = np.nonzero(m.high)
            if not m.low[rows // HIGH_PER_LOW, cols // K].all():
                return CheckResult("tgdf_monotonicity", False, f"trial {trial}: orphan high pair at alpha={m.alpha}")
        for prev, cur in zip(masks, masks[1:]):
            if (cur.low & ~prev.low).any():
                return CheckResult("tgdf_monotonicity", False, f"trial {trial}: low mask grew at alpha={cur.alpha}")
        for prev, cur in zip(unpropagated, unpropagated[1:]):
            if (cur.high & ~prev.high).any():
                return CheckResult("tgdf_monotonicity", False, f"trial {trial}: high mask grew at alpha={cur.alpha}")
    return CheckResult("tgdf_monotonicity", True, f"{trials} instances x {len(alphas)} alphas")


def check_hit_ratio_oracle(trials: int = 100, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        C, O, K = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        bag = random_bag(rng, int(rng.integers(1, 5)), 5, missing_rate=0.5)
        E_low = rng.standard_normal((C * O, 5))
        E_high = rng.standard_normal((C * O * K, 5))
        topk = int(rng.integers(1, 4))
        got = hit_ratio_at_k(bag, E_low, E_high, K, topk=topk)
        want = reference_hit_ratio(bag, E_low, E_high, K, topk)
        if got != want:
            return CheckResult("hit_ratio_oracle", False, f"trial {trial}: {got} != {want}")
    return CheckResult("hit_ratio_oracle", True, f"{trials} random instances")


def check_graph_cardinality(trials: int = 50, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        C, O, K = 2, int(rng.integers(1, 3)), int(rng.integers(1, 3))
        bag = random_bag(rng, int(rng.integers(1, 4)), 4)
        texts = random_texts(rng, C, O, K, 4)
        masks = tgdf(bag, texts, 0.5)
        counts = edge_counts(build_hhg(bag, texts, masks))
        expected = {
            "intra_low": int(masks.low.sum()),
            "intra_high": int(masks.high.sum()),
            "hier_img": bag.num_valid_high,
            "hier_text": C * O * K,
        }
        if counts != expected:
            return CheckResult("graph_cardinality", False, f"trial {trial}: {counts} != {expected}")
    return CheckResult("graph_cardinality", True, f"{trials} random graphs")


def check_htcl_closed_form() -> CheckResult:
    """All-zero similarities give 2 ln 2; exact +/-1 similarities give -2 log sigmoid(1)."""
    eye = torch.eye(4, dtype=torch.float64)
    expected_zero = -2 * float(log_expit(0.0))
    expected_unit = -2 * float(log_expit(1.0))
    T_low, T_high = eye[:2], eye[2:]
    errors = []
    for variant in HtclVariant:
        got = float(htcl_variant(variant, T_low, T_high, 1, 1))
        if abs(got - expected_zero) > 1e-9:
            errors.append(f"{variant.value} zero-sims: {got}")

    signed = torch.stack([eye[0], -eye[0]])
    got = float(htcl_variant(HtclVariant.CLASS_WISE, signed, signed.clone(), 1, 1))
    if abs(got - expected_unit) > 1e-9:
        errors.append(f"unit-sims: {got}")
    return CheckResult("htcl_closed_form", not errors, "; ".join(errors))


def _aggregator_graph(seed: int = 0):
    rng = np.random.default_rng(seed)
    bag = random_bag(rng, 2, 8, missing_rate=0.5)
    texts = random_texts(rng, 2, 2, 2, 8)
    return build_hhg(bag, texts, tgdf(bag, texts, 0.5))


def check_attention_normalisation(seed: int = 0) -> CheckResult:
    torch.manual_seed(seed)
    g = _aggregator_graph(seed)
    agg = AttentionAggregator(8, 2).double()
    scale = {"low": torch.zeros(8, dtype=torch.float64), "high": torch.zeros(8, dtype=torch.float64)}
    _, attention = agg(g, g.node_feats, scale, HierDirection.BI, return_attention=True)
    worst = 0.0
    for node_type, beta in attention.items():
        sums = torch.zeros(g.num_nodes(node_type), beta.shape[1], dtype=beta.dtype)
        dst = _destinations(g, node_type)
        sums.index_add_(0, dst, beta)
        received = torch.zeros(g.num_nodes(node_type), dtype=torch.bool)
        received[dst] = True
        worst = max(worst, float((sums[received] - 1).abs().max()))
    return CheckResult("attention_normalisation", worst <= 1e-6, f"max deviation {worst:.2e}")


def _destinations(g, node_type: str) -> torch.Tensor:
    index = {
        "img_high": ("hier_img", 1),
        "img_low": ("hier_img", 0),
        "text_high": ("hier_text", 1),
        "text_low": ("hier_text", 0),
    }
    relation, column = index[node_type]
    return torch.as_tensor(g.edges[relation][:, column], dtype=torch.long)


def check_variant_reductions(seed: int = 0) -> CheckResult:
    """MSA with tied weights equals SAA; MSA with zero scale embeddings equals MAA."""
    torch.manual_seed(seed)
    g = _aggregator_graph(seed)
    states = g.node_feats
    scale = {"low": 0.1 * torch.randn(8, dtype=torch.float64), "high": 0.1 * torch.randn(8, dtype=torch.float64)}
    zeros = {k: torch.zeros_like(v) for k, v in scale.items()}

    msa = AttentionAggregator(8, 2, relation_specific=True, use_scale=True).double()
    saa = AttentionAggregator(8, 2, relation_specific=False, use_scale=True).double()
    maa = AttentionAggregator(8, 2, relation_specific=True, use_scale=False).double()
    with torch.no_grad():
        for name in ("q", "k", "v"):
            shared = saa.proj["shared"][name].weight
            msa.proj["hier_text"][name].weight.copy_(shared)
            msa.proj["hier_img"][name].weight.copy_(shared)
        maa.load_state_dict(msa.state_dict())

        tied = msa(g, states, scale)
        reference = saa(g, states, scale)
        unscaled = msa(g, states, zeros)
        no_scale = maa(g, states, scale)

    errors = []
    for t in tied:
        if not torch.equal(tied[t], reference[t]):
            errors.append(f"tied MSA != SAA on {t}")
        if not torch.equal(unscaled[t], no_scale[t]):
            errors.append(f"zero-scale MSA != MAA on {t}")
    return CheckResult("variant_reductions", not errors, "; ".join(errors))


def check_module_bypass(seed: int = 0) -> CheckResult:
    """Without filtering and hierarchy edges the final states equal the inputs."""
    bags, hierarchy = generate_dataset(_toy_synth(seed))
    config = replace(_toy_run_config(), use_tgdf=False, use_hhg=False, use_htcl=False)
    torch.manual_seed(seed)
    model = ScaleGraphModel(hierarchy, config, bags[0].dim)
    with torch.no_grad():
        out = model.score_bag(bags[0])
    same = all(torch.equal(out.states[t], out.graph.node_feats[t]) for t in out.states)
    return CheckResult("module_bypass", same, "" if same else "states differ from inputs")


# Gradients

def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    denom = max(float(analytic.norm()), float(numeric.norm()), 1e-12)
    return float((analytic - numeric).norm()) / denom


def finite_difference(
    loss_fn: Callable[[], torch.Tensor],
    tensors: Dict[str, torch.Tensor],
    eps: float = 1e-6,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> Dict[str, float]:
    """
    Relative error between autograd and central differences per tensor.
    With max_entries, a seeded sample of entries is compared per tensor.
    """
    for t in tensors.values():
        t.grad = None
    loss_fn().backward()
    analytic = {name: t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)
                for name, t in tensors.items()}

    rng = np.random.default_rng(seed)
    errors = {}
    with torch.no_grad():
        for name, t in tensors.items():
            flat = t.view(-1)
            entries = np.arange(flat.numel())
            if max_entries is not None and entries.size > max_entries:
                entries = np.sort(rng.choice(entries, size=max_entries, replace=False))
            numeric = torch.zeros(entries.size, dtype=t.dtype)
            for j, i in enumerate(entries):
                original = float(flat[i])
                flat[i] = original + eps
                plus = float(loss_fn())
                flat[i] = original - eps
                minus = float(loss_fn())
                flat[i] = original
                numeric[j] = (plus - minus) / (2 * eps)
            errors[name] = relative_error(analytic[name].view(-1)[entries], numeric)
    return errors


def _toy_synth(seed: int = 0) -> SynthConfig:
    return SynthConfig(
        num_classes=2,
        bags_per_class=1,
        min_patches=2,
        max_patches=2,
        dim=8,
        parents_per_class=2,
        children_per_parent=2,
        context_tokens=2,
        missing_child_rate=0.25,
        seed=seed,
    )


def _toy_run_config() -> RunConfig:
    return RunConfig(
        parents_per_class=2,
        children_per_parent=2,
        context_tokens=2,
        topk_low=2,
        topk_high=5,
        float64=True,
        quiet=True,
    )


def pipeline_gradient_check(
    seed: int = 0,
    max_entries: Optional[int] = 16,
    variant: str = HierVariant.MSA.value,
) -> Dict[str, float]:
    """
    Finite-difference check of the summed loss over a 2-bag toy problem
    against every learnable tensor. Filtering masks are computed once and
    held fixed.
    """
    bags, hierarchy = generate_dataset(_toy_synth(seed))
    config = replace(_toy_run_config(), aggregator=variant)
    torch.manual_seed(seed)
    model = ScaleGraphModel(hierarchy, config, bags[0].dim)
    with torch.no_grad():
        texts = model.encode()
        frozen: Dict[str, FilterMasks] = {b.bag_id: model.filter_masks(b, texts) for b in bags}

    def loss_fn() -> torch.Tensor:
        return sum(model.score_bag(b, masks=frozen[b.bag_id]).loss for b in bags)

    tensors = {name: p for name, p in model.named_parameters() if p.requires_grad}
    return finite_difference(loss_fn, tensors, max_entries=max_entries, seed=seed)


def aggregator_gradient_check(seed: int = 0) -> Dict[str, float]:
    """Attention outputs on a 5-node graph against every projection and the scale embeddings."""
    rng = np.random.default_rng(seed)
    bag = build_bag(
        "five",
        rng.standard_normal((1, 6)),
        rng.standard_normal((HIGH_PER_LOW, 6)),
        np.arange(HIGH_PER_LOW) < 2,
        0,
    )
    texts = random_texts(rng, 1, 1, 1, 6)
    g = build_hhg(bag, texts, full_masks(bag, texts))
    torch.manual_seed(seed)
    gnn = HHGNN(6, layers=1, heads=2).double()
    agg = gnn.layers[0].hier
    for block in agg.proj.values():
        for linear in block.values():
            init_near_identity(linear, noise=0.3)
    readout = {t: torch.as_tensor(rng.standard_normal(tuple(h.shape))) for t, h in g.node_feats.items()}

    def loss_fn() -> torch.Tensor:
        out = agg(g, g.node_feats, gnn.scale_emb)
        return sum((out[t] * readout[t]).sum() for t in out)

    tensors = dict(agg.named_parameters())
    tensors["scale_low"] = gnn.scale_low
    tensors["scale_high"] = gnn.scale_high
    return finite_difference(loss_fn, tensors)


def check_gradients(seed: int = 0, tol: float = 1e-3, max_entries: Optional[int] = 16) -> CheckResult:
    errors = pipeline_gradient_check(seed, max_entries=max_entries)
    worst = max(errors, key=errors.get)
    return CheckResult(
        "pipeline_gradients",
        errors[worst] < tol,
        f"{len(errors)} tensors, worst {worst} rel err {errors[worst]:.2e}",
    )


def check_aggregator_gradients(seed: int = 0, tol: float = 1e-4) -> CheckResult:
    errors = aggregator_gradient_check(seed)
    worst = max(errors, key=errors.get)
    return CheckResult(
        "aggregator_gradients",
        errors[worst] < tol,
        f"{len(errors)} tensors, worst {worst} rel err {errors[worst]:.2e}",
    )


SUITES: Dict[str, Callable[[], CheckResult]] = {
    "tgdf_oracle": check_tgdf_oracle,
    "tgdf_monotonicity": check_tgdf_monotonicity,
    "hit_ratio_oracle": check_hit_ratio_oracle,
    "graph_cardinality": check_graph_cardinality,
    "htcl_closed_form": check_htcl_closed_form,
    "attention_normalisation": check_attention_normalisation,
    "variant_reductions": check_variant_reductions,
    "module_bypass": check_module_bypass,
    "aggregator_gradients": check_aggregator_gradients,
    "pipeline_gradients": check_gradients,
}


def run_all_checks(names: Optional[Sequence[str]] = None, quiet: bool = False) -> List[CheckResult]:
    """Run the named suites (all by default); a crashing suite counts as failed."""
    results = []
    for name in names or list(SUITES):
        if name not in SUITES:
            raise ValueError(f"unknown check: {name}")
        try:
            result = SUITES[name]()
        except Exception as e:
            result = CheckResult(name, False, f"{type(e).__name__}: {e}")
        results.append(result)
        if not quiet:
            status = "PASS" if result.passed else "FAIL"
            print(f"[Check] {result.name}: {status} {result.detail}".rstrip())
    return results
