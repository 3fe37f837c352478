"""Relevance aggregation, normalization, pseudo-labels, and the mask loss.

The rollout hand cases are derived independently on paper: with per-layer
update R <- R + mean_heads(clamp+(grad * attn)) @ R starting from the
identity, small token counts admit exact closed forms that the code must
reproduce to float64 precision.
"""

import numpy as np
import pytest

from fieldedit.autodiff import Tensor
from fieldedit.distillation import (
    aggregate_relevance,
    mask_loss,
    normalize_relevance,
    pseudo_label,
    relevance_map,
)
from fieldedit.gradcheck import fd_gradient
from fieldedit.guidance import DEFAULT_VOCAB, SyntheticOracleEncoder, ToyTransformerEncoder


def _records(*layers):
    """Each layer is (attn, grad) as plain nested lists; adds the head axis."""
    out = []
    for attn, grad in layers:
        a = np.asarray(attn, dtype=np.float64)[None]
        g = np.asarray(grad, dtype=np.float64)[None]
        out.append((a, g))
    return out


class TestAggregateRelevance:
    def test_single_layer_concentrated_two_patch(self):
        # Every token attends fully to patch 1; positive unit gradient.
        # cam = attn, R = I + attn, row 0 over patches = (1, 0).
        attn = [[0.0, 1.0, 0.0]] * 3
        grad = [[1.0, 1.0, 1.0]] * 3
        raw = aggregate_relevance(_records((attn, grad)), (1, 2))
        assert raw.shape == (1, 2)
        np.testing.assert_allclose(raw, [[1.0, 0.0]], atol=1e-12)

    def test_single_layer_uniform_two_patch(self):
        # Uniform attention 1/3 with uniform positive gradient g:
        # cam = g/3 everywhere, R = I + cam, row 0 patches = (g/3, g/3).
        g = 0.6
        attn = [[1 / 3] * 3] * 3
        grad = [[g] * 3] * 3
        raw = aggregate_relevance(_records((attn, grad)), (1, 2))
        np.testing.assert_allclose(raw, [[g / 3, g / 3]], rtol=1e-12)

    def test_negative_gradient_head_is_clamped_away(self):
        # Head 1: rows (0.2, 0.5, 0.3), grad +1 -> contributes itself.
        # Head 2: grad -1 -> clamp+ kills it.  Head mean halves head 1.
        a1 = np.full((3, 3), 0.0)
        a1[:] = [0.2, 0.5, 0.3]
        a2 = np.full((3, 3), 0.0)
        a2[:] = [0.6, 0.2, 0.2]
        attn = np.stack([a1, a2])
        grad = np.stack([np.ones((3, 3)), -np.ones((3, 3))])
        raw = aggregate_relevance([(attn, grad)], (1, 2))
        np.testing.assert_allclose(raw, [[0.25, 0.15]], atol=1e-12)

    def test_two_layer_hand_propagation(self):
        # Layer 1: R1 = I + A1 with A1 rows below.  Layer 2 attends fully
        # to token 1, so cam2 @ R1 copies R1's row 1 into every row:
        # R2[0] = R1[0] + R1[1] = (1.1,0.6,0.3) + (0.3,1.4,0.3).
        a1 = [[0.1, 0.6, 0.3], [0.3, 0.4, 0.3], [0.5, 0.25, 0.25]]
        a2 = [[0.0, 1.0, 0.0]] * 3
        ones = [[1.0, 1.0, 1.0]] * 3
        raw = aggregate_relevance(_records((a1, ones), (a2, ones)), (1, 2))
        np.testing.assert_allclose(raw, [[2.0, 0.6]], atol=1e-12)

    def test_two_layer_row_constant_closed_form(self):
        # When every row of A equals a and grads are 1 across both layers,
        # A @ A = A so (I+A)(I+A) = I + 3A and row 0 patches = 3 * a[1:].
        a = [[0.0, 0.75, 0.25]] * 3
        ones = [[1.0, 1.0, 1.0]] * 3
        raw = aggregate_relevance(_records((a, ones), (a, ones)), (1, 2))
        np.testing.assert_allclose(raw, [[2.25, 0.75]], atol=1e-12)

    def test_four_patch_grid_ordering(self):
        # Only the CLS row matters for the output; make it distinct and
        # check reshape order (row-major over the patch grid).
        attn = np.zeros((5, 5))
        attn[0] = [0.0, 0.4, 0.3, 0.2, 0.1]
        attn[1:] = 0.2
        grad = np.ones((5, 5))
        raw = aggregate_relevance([(attn[None], grad[None])], (2, 2))
        np.testing.assert_allclose(raw, [[0.4, 0.3], [0.2, 0.1]], atol=1e-12)

    def test_empty_records_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            aggregate_relevance([], (1, 2))

    def test_token_grid_mismatch_rejected(self):
        attn = np.ones((1, 3, 3)) / 3
        with pytest.raises(ValueError, match="does not match"):
            aggregate_relevance([(attn, attn)], (2, 2))

    def test_attn_grad_shape_mismatch_rejected(self):
        attn = np.ones((1, 3, 3)) / 3
        grad = np.ones((1, 4, 4))
        with pytest.raises(ValueError, match="mismatch"):
            aggregate_relevance([(attn, grad)], (1, 2))


class TestNormalizeRelevance:
    def test_affine_rescale(self):
        out = normalize_relevance(np.array([[0.4, 0.3], [0.2, 0.1]]))
        np.testing.assert_allclose(out, [[1.0, 2 / 3], [1 / 3, 0.0]],
                                   atol=1e-12)
        assert out.max() == 1.0 and out.min() == 0.0

    def test_uniform_maps_to_ones(self):
        out = normalize_relevance(np.full((3, 3), 0.5))
        np.testing.assert_array_equal(out, np.ones((3, 3)))

    def test_zero_maps_to_zeros_with_warning(self):
        with pytest.warns(RuntimeWarning, match="zero"):
            out = normalize_relevance(np.zeros((2, 2)))
        np.testing.assert_array_equal(out, np.zeros((2, 2)))

    def test_tiny_uniform_counts_as_zero(self):
        with pytest.warns(RuntimeWarning):
            out = normalize_relevance(np.full((2, 2), 1e-13))
        np.testing.assert_array_equal(out, np.zeros((2, 2)))

    def test_negative_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            normalize_relevance(np.array([[0.5, -0.1]]))


class _FakeAttnEncoder:
    """Returns canned attention records regardless of the image."""

    def __init__(self, records, grid):
        self._records = records
        self._grid = grid

    def attention_records(self, img, prompt):
        return self._records, self._grid


class _FakeSaliencyEncoder:
    """Relevance is the red channel of the image itself."""

    def saliency(self, img, prompt):
        return np.asarray(img, dtype=np.float64)[:, :, 0]


class TestRelevanceMap:
    def test_resize_then_normalize_hand_case(self):
        # Raw patch map [[0,1],[0,1]] upsampled 2x with pixel-center
        # alignment gives columns (0, 0.25, 0.75, 1) in every row; the
        # map already spans [0,1] so normalization leaves it unchanged.
        attn = np.zeros((5, 5))
        attn[0] = [0.0, 0.0, 1.0, 0.0, 1.0]
        attn[1:] = 0.2
        enc = _FakeAttnEncoder([(attn[None], np.ones((1, 5, 5)))], (2, 2))
        img = np.zeros((8, 8, 3))
        out = relevance_map(enc, img, "anything", (4, 4))
        expected = np.tile([0.0, 0.25, 0.75, 1.0], (4, 1))
        np.testing.assert_allclose(out, expected, atol=1e-9)

    def test_two_patch_normalized_mask(self):
        attn = [[0.0, 1.0, 0.0]] * 3
        grad = [[1.0, 1.0, 1.0]] * 3
        enc = _FakeAttnEncoder(_records((attn, grad)), (1, 2))
        out = relevance_map(enc, np.zeros((4, 4, 3)), "p", (1, 2))
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-6)

    def test_zero_gradient_gives_zero_mask(self):
        attn = np.full((1, 3, 3), 1 / 3)
        grad = np.zeros((1, 3, 3))
        enc = _FakeAttnEncoder([(attn, grad)], (1, 2))
        with pytest.warns(RuntimeWarning):
            out = relevance_map(enc, np.zeros((4, 4, 3)), "p", (2, 4))
        assert out.shape == (2, 4)
        np.testing.assert_array_equal(out, np.zeros((2, 4)))

    def test_uniform_gives_uniform_ones(self):
        attn = np.full((1, 3, 3), 1 / 3)
        grad = np.full((1, 3, 3), 2.0)
        enc = _FakeAttnEncoder([(attn, grad)], (1, 2))
        out = relevance_map(enc, np.zeros((4, 4, 3)), "p", (3, 3))
        np.testing.assert_array_equal(out, np.ones((3, 3)))

    def test_saliency_branch(self):
        img = np.zeros((2, 2, 3))
        img[0, 0, 0] = 0.8
        img[1, 1, 0] = 0.2
        out = relevance_map(_FakeSaliencyEncoder(), img, "p", (2, 2))
        np.testing.assert_allclose(out, [[1.0, 0.0], [0.0, 0.25]], atol=1e-12)

    def test_encoder_without_mechanism_rejected(self):
        with pytest.raises(TypeError, match="relevance"):
            relevance_map(object(), np.zeros((2, 2, 3)), "p", (2, 2))

    def test_toy_transformer_end_to_end(self):
        enc = ToyTransformerEncoder(seed=11)
        rng = np.random.default_rng(0)
        img = rng.uniform(0.0, 1.0, size=(32, 32, 3))
        out = relevance_map(enc, img, "left blob", (16, 16))
        assert out.shape == (16, 16)
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert out.max() == pytest.approx(1.0)
        out2 = relevance_map(enc, img, "left blob", (16, 16))
        np.testing.assert_array_equal(out, out2)

    def test_synthetic_oracle_localizes_left_bump(self):
        # Bright bump on the left half, nothing on the right: the mask
        # for "left blob" must concentrate well inside the left half.
        H = W = 32
        ys, xs = np.mgrid[0:H, 0:W]
        bump = np.exp(-(((ys - 16) / 5.0) ** 2 + ((xs - 8) / 5.0) ** 2))
        img = np.stack([bump, bump, bump], axis=2) * 0.9
        enc = SyntheticOracleEncoder(DEFAULT_VOCAB)
        out = relevance_map(enc, img, "left blob", (H, W))
        inside = out[:, : W // 2].mean()
        outside = out[:, W // 2:].mean()
        assert inside >= 2.0 * max(outside, 1e-12)


class TestPseudoLabel:
    def test_disabled_ignores_target(self):
        src = np.zeros((2, 2, 3))
        src[0, 0, 0] = 1.0
        tgt = np.zeros((2, 2, 3))
        tgt[1, 1, 0] = 5.0
        enc = _FakeSaliencyEncoder()
        lab = pseudo_label(enc, src, tgt, "p", (2, 2), deformation_enabled=False)
        np.testing.assert_allclose(lab, [[1.0, 0.0], [0.0, 0.0]], atol=1e-12)
        lab2 = pseudo_label(enc, src, np.random.default_rng(0).uniform(size=(2, 2, 3)),
                            "p", (2, 2), deformation_enabled=False)
        np.testing.assert_array_equal(lab, lab2)

    def test_enabled_takes_pixelwise_max(self):
        src = np.zeros((2, 2, 3))
        src[0, 0, 0] = 1.0
        tgt = np.zeros((2, 2, 3))
        tgt[1, 1, 0] = 2.0
        enc = _FakeSaliencyEncoder()
        lab = pseudo_label(enc, src, tgt, "p", (2, 2), deformation_enabled=True)
        np.testing.assert_allclose(lab, [[1.0, 0.0], [0.0, 1.0]], atol=1e-12)

    def test_max_dominates_componentwise(self):
        rng = np.random.default_rng(7)
        src = rng.uniform(0.1, 1.0, size=(4, 4, 3))
        tgt = rng.uniform(0.1, 1.0, size=(4, 4, 3))
        enc = _FakeSaliencyEncoder()
        m_s = pseudo_label(enc, src, tgt, "p", (4, 4), deformation_enabled=False)
        m_t = pseudo_label(enc, tgt, src, "p", (4, 4), deformation_enabled=False)
        both = pseudo_label(enc, src, tgt, "p", (4, 4), deformation_enabled=True)
        np.testing.assert_allclose(both, np.maximum(m_s, m_t), atol=1e-12)


class TestMaskLoss:
    def test_hand_value(self):
        m = Tensor(np.array([[0.5, 0.25]]), requires_grad=True)
        lab = np.array([[1.0, 0.75]])
        loss = mask_loss(m, lab)
        assert float(loss.data) == pytest.approx(0.25, abs=1e-12)

    def test_gradient_matches_closed_form_and_fd(self):
        rng = np.random.default_rng(3)
        m = Tensor(rng.uniform(0.1, 0.9, size=(3, 4)), requires_grad=True)
        lab = rng.uniform(0.0, 1.0, size=(3, 4))
        loss = mask_loss(m, lab)
        loss.backward()
        analytic = m.grad.copy()
        np.testing.assert_allclose(analytic, 2.0 * (m.data - lab) / 12.0,
                                   rtol=1e-12)
        fd = fd_gradient(lambda: mask_loss(m, lab), m)
        np.testing.assert_allclose(analytic, fd, rtol=1e-6)

    def test_label_is_detached(self):
        m = Tensor(np.array([[0.5]]), requires_grad=True)
        loss = mask_loss(m, np.array([[0.9]]))
        loss.backward()
        assert m.grad is not None

    def test_shape_mismatch_rejected(self):
        m = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ValueError, match="shape"):
            mask_loss(m, np.zeros((2, 3)))

    def test_perfect_match_is_zero(self):
        lab = np.random.default_rng(1).uniform(size=(4, 4))
        m = Tensor(lab.copy(), requires_grad=True)
        assert float(mask_loss(m, lab).data) == 0.0
