import math

import numpy as np
import pytest

from layoutgen import losses, numerics as nd
from layoutgen.constraints import (
    AttributeConstraint,
    AttributeKind,
    PartialLayout,
    RandomMask,
    sample_random_mask,
)
from layoutgen.core import BBox, Category, Element, Layout, flatten
from layoutgen.errors import ShapeError, UnspecifiedAttributeError
from layoutgen.losses import (
    LossWeights,
    attribute_consistent_loss,
    attribute_disentangled_loss,
    flatten_predictions,
    masked_partial_loss,
    partial_loss,
    reconstruction_loss,
    soft_count,
    total_loss,
)
from layoutgen.numerics import Tape, gradcheck

EPS = losses.EPSILON_SHARPNESS


def leaf(values):
    return Tape().leaf(np.asarray(values, dtype=float))


def probs_row(p_target: float, target: int):
    """One logits row whose eps-softmax puts p_target on the target index."""
    rest = (1.0 - p_target) / 4.0
    row = np.full(5, math.log(rest) / EPS)
    row[target] = math.log(p_target) / EPS
    return row


class TestSoftCount:
    def test_uniform_logits_give_q_over_k(self):
        z = leaf(np.zeros((5, 5)))
        for cat in Category:
            assert float(soft_count(z, cat, EPS).value) == pytest.approx(1.0)

    def test_sharp_single_query(self):
        z = leaf([[1.0, 0, 0, 0, 0]])
        n = soft_count(z, Category.TEXT, EPS)
        # closed form: e^100 / (e^100 + 4) is within 1e-9 of 1
        assert abs(float(n.value) - 1.0) < 1e-9

    def test_counts_sum_to_q(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            z = leaf(rng.uniform(-1, 1, size=(10, 5)))
            total = sum(float(soft_count(z, c, EPS).value) for c in Category)
            assert total == pytest.approx(10.0, abs=1e-12)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            soft_count(leaf(np.zeros((2, 4))), Category.TEXT, EPS)


class TestAttributeConsistent:
    def test_count_above_one_gives_zero(self):
        z = leaf([probs_row(0.75, Category.TEXT)] * 2)  # N_text = 1.5
        loss = attribute_consistent_loss(z, AttributeConstraint(AttributeKind.TEXT_ONLY), EPS)
        assert float(loss.value) == 0.0

    def test_count_below_one(self):
        z = leaf([probs_row(0.3, Category.TEXT)])  # N_text = 0.3
        loss = attribute_consistent_loss(z, AttributeConstraint(AttributeKind.TEXT_ONLY), EPS)
        assert float(loss.value) == pytest.approx(0.7, abs=1e-9)

    def test_boundary_exactly_one(self):
        z = leaf(np.zeros((5, 5)))  # every count exactly 1
        loss = attribute_consistent_loss(z, AttributeConstraint(AttributeKind.LOGO_NO_EMB), EPS)
        assert float(loss.value) == 0.0

    def test_unspecified_rejected(self):
        with pytest.raises(UnspecifiedAttributeError):
            attribute_consistent_loss(
                leaf(np.zeros((2, 5))), AttributeConstraint(AttributeKind.UNSPECIFIED), EPS)


class TestAttributeDisentangled:
    def test_empty_undesired_set_is_zero(self):
        rng = np.random.default_rng(1)
        z = leaf(rng.uniform(-2, 2, size=(6, 5)))
        loss = attribute_disentangled_loss(
            z, AttributeConstraint(AttributeKind.WITH_EMBELLISHMENT), EPS)
        assert float(loss.value) == 0.0

    def test_uniform_logits_logo_attr(self):
        z = leaf(np.zeros((3, 5)))  # N_emb = 3/5
        loss = attribute_disentangled_loss(z, AttributeConstraint(AttributeKind.LOGO_NO_EMB), EPS)
        assert float(loss.value) == pytest.approx(0.6, abs=1e-12)

    def test_sharp_text_mass_is_tiny(self):
        z = leaf([[1.0, 0, 0, 0, 0]] * 4)
        loss = attribute_disentangled_loss(z, AttributeConstraint(AttributeKind.TEXT_ONLY), EPS)
        assert float(loss.value) < 1e-6

    def test_unspecified_rejected(self):
        with pytest.raises(UnspecifiedAttributeError):
            attribute_disentangled_loss(
                leaf(np.zeros((2, 5))), AttributeConstraint(AttributeKind.UNSPECIFIED), EPS)


def pl_from_parts(q, cat_rows=(), box_slots=()):
    """cat_rows: (row, Category); box_slots: (row, offset, value)."""
    entries = np.zeros((q, 9))
    presence = np.zeros((q, 9), dtype=bool)
    for row, cat in cat_rows:
        presence[row, :5] = True
        entries[row, cat] = 1.0
    for row, offset, value in box_slots:
        presence[row, 5 + offset] = True
        entries[row, 5 + offset] = value
    return PartialLayout(entries, presence)


class TestPartialLoss:
    def test_exact_match_is_zero(self):
        pl = pl_from_parts(2, cat_rows=[(0, Category.TEXT)],
                           box_slots=[(0, 0, 0.5), (1, 2, 0.3)])
        pred = np.zeros((2, 9))
        pred[0, Category.TEXT] = 1.0
        pred[0, 5] = 0.5
        pred[1, 7] = 0.3
        assert float(partial_loss(leaf(pred), pl).value) == 0.0

    def test_single_coordinate_offset(self):
        pl = pl_from_parts(1, box_slots=[(0, 0, 0.5)])
        pred = np.zeros((1, 9))
        pred[0, 5] = 0.6
        assert float(partial_loss(leaf(pred), pl).value) == pytest.approx(0.1)

    def test_category_block_terms(self):
        pl = pl_from_parts(1, cat_rows=[(0, Category.TEXT)])
        pred = np.zeros((1, 9))
        pred[0, :5] = [0.6, 0.1, 0.1, 0.1, 0.1]
        assert float(partial_loss(leaf(pred), pl).value) == pytest.approx(0.8)

    def test_zero_iff_agreement(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            q = int(rng.integers(1, 6))
            entries = rng.uniform(0, 1, size=(q, 9))
            presence = rng.random((q, 9)) < 0.4
            pl = PartialLayout(entries, presence)
            pred = rng.uniform(0, 1, size=(q, 9))
            value = float(partial_loss(leaf(pred), pl).value)
            agrees = np.array_equal(np.where(presence, pred, 0.0), pl.entries)
            assert (value == 0.0) == agrees

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            partial_loss(leaf(np.zeros((3, 9))), pl_from_parts(2))


class TestMaskedPartialLoss:
    def test_all_ones_mask_equals_partial_loss(self):
        rng = np.random.default_rng(3)
        pl = pl_from_parts(3, box_slots=[(0, 0, 0.5), (1, 1, 0.25), (2, 3, 0.75)])
        pred = rng.uniform(0, 1, size=(3, 9))
        full = float(partial_loss(leaf(pred), pl).value)
        masked = float(masked_partial_loss(leaf(pred), pl, RandomMask.all_ones(pl)).value)
        assert masked == pytest.approx(full, abs=1e-15)

    def test_masking_the_mismatch_gives_zero(self):
        pl = pl_from_parts(1, box_slots=[(0, 0, 0.5)])
        pred = np.zeros((1, 9))
        pred[0, 5] = 0.9
        mask = RandomMask(np.zeros((1, 9)), pl.presence)
        assert float(masked_partial_loss(leaf(pred), pl, mask).value) == 0.0

    def test_never_exceeds_partial_loss(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            q = int(rng.integers(1, 6))
            entries = rng.uniform(0, 1, size=(q, 9))
            presence = rng.random((q, 9)) < 0.5
            if not presence.any():
                presence[0, 5] = True
            pl = PartialLayout(entries, presence)
            pred = rng.uniform(0, 1, size=(q, 9))
            mask = sample_random_mask(pl, seed=int(rng.integers(2**31)))
            lp = float(partial_loss(leaf(pred), pl).value)
            lpm = float(masked_partial_loss(leaf(pred), pl, mask).value)
            assert lpm <= lp + 1e-15


class TestFlattenPredictions:
    def test_layout_matches_hand_built(self):
        rng = np.random.default_rng(5)
        raw = rng.uniform(0.01, 1, size=(4, 5))
        probs_np = raw / raw.sum(axis=1, keepdims=True)
        boxes_np = rng.uniform(0, 1, size=(4, 4))
        t = Tape()
        flat = flatten_predictions(t.leaf(probs_np), t.leaf(boxes_np))
        np.testing.assert_allclose(flat.value, np.hstack([probs_np, boxes_np]))


class TestReconstruction:
    def _layout(self, *specs):
        return Layout(tuple(Element(c, BBox(*b)) for c, b in specs))

    def test_perfect_reproduction_is_zero(self):
        layout = self._layout((Category.TEXT, (0.5, 0.1, 0.4, 0.05)),
                              (Category.LOGO, (0.2, 0.8, 0.1, 0.1)))
        gt_flat = flatten(layout, q_total=4)
        t = Tape()
        probs = t.leaf(gt_flat[:, :5])
        boxes = t.leaf(gt_flat[:, 5:])
        assert float(reconstruction_loss(probs, boxes, layout).value) == pytest.approx(0.0)

    def test_empty_layout_all_none_is_zero(self):
        layout = Layout(())
        t = Tape()
        probs = np.zeros((3, 5))
        probs[:, Category.NONE] = 1.0
        value = reconstruction_loss(t.leaf(probs), t.leaf(np.full((3, 4), 0.5)), layout)
        assert float(value.value) == pytest.approx(0.0)

    def test_box_perturbation_sensitivity(self):
        # Perturbing one matched coordinate by delta moves the loss by
        # lam_box * delta / n_matched while the assignment stays put.
        layout = self._layout((Category.TEXT, (0.5, 0.5, 0.4, 0.1)),
                              (Category.LOGO, (0.2, 0.2, 0.1, 0.1)))
        gt_flat = flatten(layout, q_total=3)
        delta = 1e-3
        base_boxes = gt_flat[:, 5:].copy()
        moved = base_boxes.copy()
        moved[0, 0] += delta

        def value(boxes_np):
            t = Tape()
            return float(reconstruction_loss(
                t.leaf(gt_flat[:, :5]), t.leaf(boxes_np), layout).value)

        diff = value(moved) - value(base_boxes)
        assert diff == pytest.approx(5.0 * delta / 2.0, rel=1e-6)


class TestTotalLoss:
    def _scalars(self, *values):
        t = Tape()
        return t, [t.leaf(np.asarray(v, dtype=float)) for v in values]

    def test_all_zero(self):
        t, (rec, ac, ad, plrm) = self._scalars(0.0, 0.0, 0.0, 0.0)
        assert float(total_loss(rec, ac, ad, plrm).value) == 0.0

    def test_weighted_sum(self):
        t, (rec, ac, ad, plrm) = self._scalars(1.0, 0.5, 2.0, 0.1)
        value = total_loss(rec, ac, ad, plrm, LossWeights(beta=1.0, gamma=0.1, eta=1.0))
        assert float(value.value) == pytest.approx(1.8)

    def test_disabled_parts_drop_out(self):
        t, (rec, plrm) = self._scalars(2.0, 0.25)
        value = total_loss(rec, None, None, plrm)
        assert float(value.value) == pytest.approx(2.25)

    def test_report_schema(self):
        report = losses.loss_report(1.0, 0.5, 2.0, 0.1)
        assert set(report) == {"l_rec", "l_ac", "l_ad", "l_plrm", "total"}
        assert report["total"] == pytest.approx(1.8)


def _off_kink_logits(rng):
    """Logits whose attribute counts stay away from the hinge at 1."""
    for _ in range(100):
        z = rng.uniform(-0.03, 0.03, size=(10, 5))
        t = Tape()
        n_a = float(soft_count(t.leaf(z), Category.LOGO, EPS).value)
        if abs(n_a - 1.0) > 1e-3:
            return z
    raise AssertionError("could not find off-kink logits")


class TestGradients:
    def test_soft_count_gradcheck(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            z = rng.uniform(-0.03, 0.03, size=(10, 5))
            err = gradcheck(lambda L: soft_count(L, Category.TEXT, EPS), [z])
            assert err < 1e-4

    def test_attribute_losses_gradcheck(self):
        rng = np.random.default_rng(7)
        attr = AttributeConstraint(AttributeKind.LOGO_NO_EMB)
        for _ in range(5):
            z = _off_kink_logits(rng)
            assert gradcheck(lambda L: attribute_consistent_loss(L, attr, EPS), [z]) < 1e-4
            assert gradcheck(lambda L: attribute_disentangled_loss(L, attr, EPS), [z]) < 1e-4

    def test_partial_losses_gradcheck(self):
        rng = np.random.default_rng(8)
        pl = pl_from_parts(4, cat_rows=[(0, Category.TEXT)],
                           box_slots=[(1, 0, 0.4), (2, 3, 0.6)])
        mask = sample_random_mask(pl, seed=1)
        for _ in range(5):
            pred = rng.uniform(0.05, 0.95, size=(4, 9))
            # keep every |pred - target| term well away from its kink
            pred[np.abs(pred - pl.entries) < 1e-3] += 5e-3
            assert gradcheck(lambda P: partial_loss(P, pl), [pred]) < 1e-4
            assert gradcheck(lambda P: masked_partial_loss(P, pl, mask), [pred]) < 1e-4

    def test_reconstruction_gradcheck(self):
        rng = np.random.default_rng(9)
        layout = Layout((
            Element(Category.TEXT, BBox(0.5, 0.2, 0.4, 0.1)),
            Element(Category.LOGO, BBox(0.2, 0.7, 0.15, 0.1)),
        ))
        for _ in range(3):
            raw = rng.uniform(-1.5, 1.5, size=(4, 5))
            boxes = rng.uniform(-1.0, 1.0, size=(4, 4))
            err = gradcheck(
                lambda R, B: reconstruction_loss(
                    nd.softmax_over_last_axis(R), nd.sigmoid(B), layout),
                [raw, boxes],
            )
            assert err < 1e-4
