"""
Tests for scalegraph.datamodel.

Index arithmetic, child padding, bag construction and the text encoder stub.
"""

import numpy as np
import pytest
import torch


class TestIndexArithmetic:
    """Tests for flatten_index and parent_patch."""

    @pytest.mark.parametrize("n,m,r", [(0, 0, 0), (2, 5, 37), (3, 15, 63)])
    def test_flatten_index(self, n, m, r):
        """r = 16n + m."""
        from scalegraph.datamodel import flatten_index
        assert flatten_index(n, m) == r

    @pytest.mark.parametrize("r,n", [(0, 0), (37, 2), (63, 3)])
    def test_parent_patch(self, r, n):
        """Parent of r is r // 16."""
        from scalegraph.datamodel import parent_patch
        assert parent_patch(r) == n

    def test_flatten_rejects_out_of_range_position(self):
        """Grid positions outside [0, 16) are argument errors."""
        from scalegraph.datamodel import flatten_index
        with pytest.raises(ValueError):
            flatten_index(0, 16)
        with pytest.raises(ValueError):
            flatten_index(0, -1)

    def test_parent_rejects_negative(self):
        """Negative high-scale indices are argument errors."""
        from scalegraph.datamodel import parent_patch
        with pytest.raises(ValueError):
            parent_patch(-1)

    def test_round_trip(self):
        """parent_patch(flatten_index(n, m)) == n for every position."""
        from scalegraph.datamodel import flatten_index, parent_patch
        for n in range(4):
            for m in range(16):
                assert parent_patch(flatten_index(n, m)) == n


class TestPadChildren:
    """Tests for pad_children."""

    def test_full_grid(self):
        """16 children at positions 0..15 give an all-true validity."""
        from scalegraph.datamodel import pad_children
        children = [np.full(3, i, dtype=np.float32) for i in range(16)]
        grid, validity = pad_children(children, list(range(16)))
        assert validity.all()
        assert np.array_equal(grid[5], children[5])

    def test_empty_list(self):
        """No children: zero matrix, validity all-false."""
        from scalegraph.datamodel import pad_children
        grid, validity = pad_children([], [], dim=4)
        assert grid.shape == (16, 4)
        assert not grid.any()
        assert not validity.any()

    def test_single_child(self):
        """One child at position 7: row 7 holds it, the other rows are zero."""
        from scalegraph.datamodel import pad_children
        child = np.array([1.0, 2.0, 3.0])
        grid, validity = pad_children([child], [7])
        assert np.allclose(grid[7], child)
        assert validity.sum() == 1 and validity[7]
        assert not np.delete(grid, 7, axis=0).any()

    def test_duplicate_positions_rejected(self):
        """Duplicate positions are argument errors."""
        from scalegraph.datamodel import pad_children
        with pytest.raises(ValueError, match="duplicate"):
            pad_children([np.ones(2), np.ones(2)], [3, 3])

    def test_empty_without_dim_rejected(self):
        """dim is needed when nothing determines it."""
        from scalegraph.datamodel import pad_children
        with pytest.raises(ValueError):
            pad_children([], [])


class TestNormalisation:
    """Tests for l2_normalize and build_bag."""

    def test_three_four_five(self):
        """(3, 4) -> (0.6, 0.8)."""
        from scalegraph.datamodel import l2_normalize
        assert np.allclose(l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8])

    def test_unit_vector_unchanged(self):
        """A unit vector maps to itself."""
        from scalegraph.datamodel import l2_normalize
        v = np.array([0.0, 1.0, 0.0])
        assert np.array_equal(l2_normalize(v), v)

    def test_zero_vector_unchanged(self):
        """The zero vector stays zero instead of becoming NaN."""
        from scalegraph.datamodel import l2_normalize
        out = l2_normalize(np.zeros((2, 3)))
        assert np.array_equal(out, np.zeros((2, 3)))

    def test_integer_input(self):
        """Integer arrays are promoted to float."""
        from scalegraph.datamodel import l2_normalize
        assert np.allclose(l2_normalize(np.array([3, 4])), [0.6, 0.8])

    def test_build_bag_normalises_and_zeroes_padding(self):
        """Valid rows have unit norm; invalid rows are exactly zero."""
        from scalegraph.datamodel import build_bag
        rng = np.random.default_rng(0)
        validity = np.arange(32) % 3 != 0
        bag = build_bag("b", rng.normal(size=(2, 5)) * 7, rng.normal(size=(32, 5)), validity, 1)
        assert np.allclose(np.linalg.norm(bag.low_feats, axis=1), 1.0, atol=1e-6)
        assert np.allclose(np.linalg.norm(bag.high_feats[validity], axis=1), 1.0, atol=1e-6)
        assert not bag.high_feats[~validity].any()
        assert bag.num_low == 2 and bag.num_high == 32 and bag.dim == 5

    def test_build_bag_rejects_wrong_high_count(self):
        """high_feats must have exactly 16 rows per low patch."""
        from scalegraph.datamodel import build_bag
        with pytest.raises(ValueError, match="expected 32"):
            build_bag("b", np.ones((2, 3)), np.ones((30, 3)), np.ones(30, dtype=bool), 0)


class TestEncoder:
    """Tests for EncoderStub and encode_texts."""

    def make_hierarchy(self, C=2, O=2, K=3, L=4, D=6, seed=0):
        from scalegraph.types import TextHierarchy
        rng = np.random.default_rng(seed)
        return TextHierarchy(
            num_classes=C,
            parents_per_class=O,
            children_per_parent=K,
            base_parent_emb=rng.normal(size=(C * O, D)).astype(np.float32),
            base_child_emb=rng.normal(size=(C * O * K, D)).astype(np.float32),
            context_low=rng.normal(size=(L, D)).astype(np.float32),
            context_high=rng.normal(size=(L, D)).astype(np.float32),
        )

    def test_zero_context_identity_projection(self):
        """Zero context and P = I reduce to l2_normalize(base)."""
        from scalegraph.datamodel import EncoderStub, l2_normalize
        stub = EncoderStub(4, 4, identity=True)
        base = torch.tensor([[3.0, 4.0, 0.0, 0.0]])
        out = stub(torch.zeros(5, 4), base)
        assert torch.allclose(out, torch.as_tensor(l2_normalize(base.numpy())))

    def test_identical_prompts_identical_outputs(self):
        """Same base and same context give the same embedding."""
        from scalegraph.datamodel import EncoderStub
        stub = EncoderStub(5, 3, seed=1)
        base = torch.ones(2, 5)
        out = stub(torch.randn(4, 5), base)
        assert torch.equal(out[0], out[1])

    def test_dimension_mismatch(self):
        """Context with the wrong width is a configuration error."""
        from scalegraph.datamodel import EncoderStub
        from scalegraph.types import ConfigurationError
        stub = EncoderStub(5, 3)
        with pytest.raises(ConfigurationError):
            stub(torch.zeros(2, 4), torch.zeros(1, 5))

    def test_encoded_rows_unit_norm(self):
        """Every encoded prompt has unit norm."""
        from scalegraph.datamodel import EncoderStub, encode_texts
        h = self.make_hierarchy()
        texts = encode_texts(h, EncoderStub(6, 8, seed=3))
        assert texts.low.shape == (4, 8)
        assert texts.high.shape == (12, 8)
        assert torch.allclose(texts.low.norm(dim=1), torch.ones(4), atol=1e-6)
        assert torch.allclose(texts.high.norm(dim=1), torch.ones(12), atol=1e-6)

    def test_gradients_reach_context_only(self):
        """Context tokens receive gradients; the projection is a buffer."""
        from scalegraph.datamodel import EncoderStub, encode_texts
        h = self.make_hierarchy()
        stub = EncoderStub(6, 8, seed=3)
        ctx_low = torch.tensor(h.context_low, requires_grad=True)
        ctx_high = torch.tensor(h.context_high, requires_grad=True)
        texts = encode_texts(h, stub, ctx_low, ctx_high)
        (texts.low.sum() + texts.high[:, 0].sum()).backward()
        assert ctx_low.grad is not None and ctx_low.grad.abs().sum() > 0
        assert ctx_high.grad is not None and ctx_high.grad.abs().sum() > 0
        assert list(stub.parameters()) == []

    def test_index_maps(self):
        """parent_of_child and class maps are integer divisions."""
        h = self.make_hierarchy(C=2, O=2, K=3)
        assert h.parent_of_child.tolist() == [0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]
        assert h.class_of_parent.tolist() == [0, 0, 1, 1]
        assert h.class_of_child.tolist() == [0] * 6 + [1] * 6

    def test_check_hierarchy_rejects_bad_counts(self):
        """A child table of the wrong length is rejected."""
        from dataclasses import replace
        from scalegraph.datamodel import check_hierarchy
        from scalegraph.types import ConfigurationError
        h = self.make_hierarchy()
        bad = replace(h, base_child_emb=h.base_child_emb[:-1])
        with pytest.raises(ConfigurationError):
            check_hierarchy(bad)
