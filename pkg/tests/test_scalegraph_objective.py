"""
Tests for scalegraph.objective.
"""

import math

import numpy as np
import pytest
import torch


def unit(v):
    v = torch.as_tensor(v, dtype=torch.float64)
    return v / v.norm(dim=-1, keepdim=True)


class TestClassLogits:
    """Tests for class_logits."""

    def test_single_pair_per_class(self):
        """One patch, one text per class, k=1: logit = gamma * cosine."""
        from scalegraph.objective import class_logits
        X = unit([[1.0, 0.0]])
        T = unit([[1.0, 0.0], [0.6, 0.8]])
        logits = class_logits(X, T, np.array([0, 1]), 2, k=1, gamma=2.0)
        assert torch.allclose(logits, torch.tensor([2.0, 1.2], dtype=torch.float64))

    def test_k_larger_than_available(self):
        """With fewer than k candidates the mean of all scores is used."""
        from scalegraph.objective import class_logits
        rng = np.random.default_rng(0)
        X, T = unit(rng.normal(size=(3, 4))), unit(rng.normal(size=(4, 4)))
        class_of_text = np.array([0, 0, 1, 1])
        logits = class_logits(X, T, class_of_text, 2, k=100, gamma=1.0)
        sims = (X @ T.T).numpy()
        expected = [sims[:, class_of_text == c].mean() for c in range(2)]
        assert np.allclose(logits.numpy(), expected)

    def test_low_patch_does_not_move_topk(self):
        """A patch scoring below every retained entry leaves the logits unchanged."""
        from scalegraph.objective import class_logits
        X = unit([[1.0, 0.0], [0.9, 0.1]])
        T = unit([[1.0, 0.0], [0.0, 1.0]])
        before = class_logits(X, T, np.array([0, 1]), 2, k=1)
        after = class_logits(torch.cat([X, unit([[-1.0, -1.0]])]), T, np.array([0, 1]), 2, k=1)
        assert torch.allclose(before, after)

    def test_permutation_invariant(self):
        """Shuffling patches does not change the logits."""
        from scalegraph.objective import class_logits
        rng = np.random.default_rng(1)
        X, T = unit(rng.normal(size=(6, 5))), unit(rng.normal(size=(4, 5)))
        a = class_logits(X, T, np.array([0, 0, 1, 1]), 2, k=3)
        b = class_logits(X[torch.as_tensor(rng.permutation(6))], T, np.array([0, 0, 1, 1]), 2, k=3)
        assert torch.allclose(a, b)

    def test_retained_entries(self):
        """return_topk lists the (patch, text, score) behind each logit."""
        from scalegraph.objective import class_logits
        X = unit([[1.0, 0.0], [0.0, 1.0]])
        T = unit([[1.0, 0.0], [0.0, 1.0]])
        _, retained = class_logits(X, T, np.array([0, 1]), 2, k=1, return_topk=True)
        assert retained[0] == [(0, 0, pytest.approx(1.0))]
        assert retained[1] == [(1, 1, pytest.approx(1.0))]

    def test_class_without_texts(self):
        """A class with no prompt is a configuration error."""
        from scalegraph.objective import class_logits
        from scalegraph.types import ConfigurationError
        with pytest.raises(ConfigurationError):
            class_logits(unit([[1.0, 0.0]]), unit([[1.0, 0.0]]), np.array([0]), 2, k=1)

    def test_k_zero(self):
        """k must be at least 1."""
        from scalegraph.objective import class_logits
        with pytest.raises(ValueError):
            class_logits(unit([[1.0, 0.0]]), unit([[1.0, 0.0]]), np.array([0]), 1, k=0)


class TestFuseAndCe:
    """Tests for fuse_and_ce."""

    def test_uniform_two_class(self):
        """Uniform fused logits over 2 classes give ln 2."""
        from scalegraph.objective import fuse_and_ce
        fused, ce = fuse_and_ce(torch.tensor([0.3, 0.3]), torch.tensor([0.2, 0.2]), 1)
        assert torch.allclose(fused, torch.tensor([0.5, 0.5]))
        assert ce.item() == pytest.approx(math.log(2), abs=1e-6)

    def test_cancelling_scales(self):
        """low = -high gives zero fused logits and CE = ln C."""
        from scalegraph.objective import fuse_and_ce
        low = torch.tensor([1.5, -0.2, 0.7], dtype=torch.float64)
        _, ce = fuse_and_ce(low, -low, 2)
        assert ce.item() == pytest.approx(math.log(3), abs=1e-9)

    def test_three_class_against_direct_softmax(self):
        """Matches -log softmax computed with math.fsum."""
        from scalegraph.objective import fuse_and_ce
        low = torch.tensor([0.1, 1.2, -0.4], dtype=torch.float64)
        high = torch.tensor([0.5, -0.3, 0.9], dtype=torch.float64)
        _, ce = fuse_and_ce(low, high, 0)
        fused = [0.6, 0.9, 0.5]
        expected = -(fused[0] - math.log(math.fsum(math.exp(f) for f in fused)))
        assert ce.item() == pytest.approx(expected, abs=1e-12)

    def test_label_out_of_range(self):
        """Labels outside [0, C) are argument errors."""
        from scalegraph.objective import fuse_and_ce
        with pytest.raises(ValueError):
            fuse_and_ce(torch.zeros(2), torch.zeros(2), 2)

    def test_shape_mismatch(self):
        """Scale logits must have equal lengths."""
        from scalegraph.objective import fuse_and_ce
        with pytest.raises(ValueError):
            fuse_and_ce(torch.zeros(2), torch.zeros(3), 0)


class TestHtcl:
    """Tests for the hierarchical text contrastive loss."""

    def orthogonal_texts(self, C=2, O=1, K=2):
        """Parents and children on distinct axes so every cosine is zero."""
        eye = torch.eye(C * O + C * O * K, dtype=torch.float64)
        return eye[: C * O], eye[C * O:]

    @pytest.mark.parametrize("variant", ["class_wise", "share_parent", "instance_wise"])
    def test_zero_similarities(self, variant):
        """All-zero sims give 2 ln 2 for every variant."""
        from scalegraph.objective import htcl_variant
        T_low, T_high = self.orthogonal_texts()
        loss = htcl_variant(variant, T_low, T_high, 1, 2)
        assert loss.item() == pytest.approx(2 * math.log(2), abs=1e-6)

    def test_unit_separation(self):
        """Positives at +1, negatives at -1: 2 * -log sigmoid(1)."""
        from scalegraph.objective import htcl_class_wise
        T_low = torch.tensor([[1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64)
        T_high = torch.tensor([[1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64)
        loss = htcl_class_wise(T_low, T_high, 1, 1)
        assert loss.item() == pytest.approx(0.6265, abs=1e-4)

    def test_monotone_in_positive_similarity(self):
        """Moving an anchor toward its positive lowers the loss."""
        from scalegraph.objective import htcl_class_wise
        T_low = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        far = torch.tensor([[0.2, 1.0], [0.0, 1.0]], dtype=torch.float64)
        near = torch.tensor([[0.4, 1.0], [0.0, 1.0]], dtype=torch.float64)
        assert htcl_class_wise(T_low, near, 1, 1) < htcl_class_wise(T_low, far, 1, 1)

    def test_single_child_variants_agree(self):
        """K = 1: share-parent and instance-wise anchors coincide."""
        from scalegraph.objective import htcl_variant
        gen = torch.Generator().manual_seed(0)
        T_low = torch.randn(4, 6, generator=gen, dtype=torch.float64)
        T_high = torch.randn(4, 6, generator=gen, dtype=torch.float64)
        a = htcl_variant("share_parent", T_low, T_high, 2, 1)
        b = htcl_variant("instance_wise", T_low, T_high, 2, 1)
        assert a.item() == pytest.approx(b.item(), abs=1e-12)

    def test_class_wise_one_parent_per_class(self):
        """O = 1: class-wise equals instance-wise."""
        from scalegraph.objective import htcl_variant
        gen = torch.Generator().manual_seed(1)
        T_low = torch.randn(2, 5, generator=gen, dtype=torch.float64)
        T_high = torch.randn(6, 5, generator=gen, dtype=torch.float64)
        a = htcl_variant("class_wise", T_low, T_high, 1, 3)
        b = htcl_variant("instance_wise", T_low, T_high, 1, 3)
        assert a.item() == pytest.approx(b.item(), abs=1e-12)

    def test_single_class_rejected(self):
        """No negatives for any anchor is a configuration error."""
        from scalegraph.objective import htcl_class_wise
        from scalegraph.types import ConfigurationError
        with pytest.raises(ConfigurationError):
            htcl_class_wise(torch.eye(2)[:1], torch.eye(2), 1, 2)

    def test_unknown_variant(self):
        """Unknown variant names are configuration errors."""
        from scalegraph.objective import htcl_variant
        from scalegraph.types import ConfigurationError
        with pytest.raises(ConfigurationError):
            htcl_variant("pairwise", torch.eye(2), torch.eye(2), 1, 1)


class TestTotalLoss:
    """Tests for total_loss."""

    def test_lambda_zero(self):
        """lambda = 0 returns ce."""
        from scalegraph.objective import total_loss
        ce = torch.tensor(1.3)
        assert total_loss(ce, torch.tensor(9.0), 0.0) is ce

    def test_weighted_sum(self):
        """ce = 1, htcl = 2, lambda = 0.5 gives 2.0."""
        from scalegraph.objective import total_loss
        assert total_loss(torch.tensor(1.0), torch.tensor(2.0), 0.5).item() == pytest.approx(2.0)

    def test_affine_in_lambda(self):
        """Three lambdas lie on one line."""
        from scalegraph.objective import total_loss
        ce, htcl = torch.tensor(0.7, dtype=torch.float64), torch.tensor(1.9, dtype=torch.float64)
        values = [total_loss(ce, htcl, lam).item() for lam in (0.1, 0.5, 0.9)]
        assert values[1] - values[0] == pytest.approx(values[2] - values[1], abs=1e-12)

    def test_negative_lambda(self):
        """Negative lambda is an argument error."""
        from scalegraph.objective import total_loss
        with pytest.raises(ValueError):
            total_loss(torch.tensor(1.0), torch.tensor(1.0), -0.1)


def small_model(**kwargs):
    """A graph model over a two-class synthetic hierarchy, plus its bags."""
    from dataclasses import replace
    from scalegraph.model import ScaleGraphModel
    from scalegraph.synthgen import SynthConfig, generate_dataset
    from scalegraph.types import RunConfig
    bags, hierarchy = generate_dataset(SynthConfig(
        num_classes=2, bags_per_class=2, min_patches=2, max_patches=3, dim=8,
        parents_per_class=2, children_per_parent=2, context_tokens=2, seed=1,
    ))
    config = replace(RunConfig(parents_per_class=2, children_per_parent=2, context_tokens=2, topk_high=5),
                     **kwargs)
    torch.manual_seed(0)
    return ScaleGraphModel(hierarchy, config, 8), bags


class TestHtclGradientPath:
    """HTCL on post-message-passing text states trains the context tokens."""

    def test_htcl_alone_reaches_context_tokens(self):
        """Backpropagating only the HTCL term gives non-zero context gradients."""
        model, bags = small_model()
        out = model.score_bag(bags[0])
        assert out.htcl is not None
        out.htcl.backward()
        assert model.context_high.grad is not None
        assert model.context_high.grad.abs().sum() > 0
        assert model.context_low.grad.abs().sum() > 0

    def test_lambda_scales_htcl_gradient(self):
        """The HTCL share of the context gradient is lambda times the HTCL gradient."""
        model, bags = small_model(lam=0.5)
        out = model.score_bag(bags[0])
        (g_total,) = torch.autograd.grad(out.loss, model.context_high, retain_graph=True)
        (g_ce,) = torch.autograd.grad(out.ce, model.context_high, retain_graph=True)
        (g_htcl,) = torch.autograd.grad(out.htcl, model.context_high)
        assert torch.allclose(g_total, g_ce + 0.5 * g_htcl, atol=1e-6)
        assert g_htcl.abs().sum() > 0

    def test_lambda_zero_skips_htcl(self):
        """lambda = 0 computes no HTCL term and the loss is the cross-entropy."""
        model, bags = small_model(lam=0.0)
        out = model.score_bag(bags[0])
        assert out.htcl is None
        assert out.loss is out.ce
