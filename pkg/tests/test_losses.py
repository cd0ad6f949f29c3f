from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from margintrack.losses import (
    band_loss_slopes,
    band_loss_values,
    band_membership,
    classification_loss,
    cross_modality_loss,
    cross_modality_terms,
    hardest_triplet_terms,
    lifted_struct_loss,
    lifted_struct_loss_grads,
    mmsl_pair_loss,
    mmsl_set_losses,
    mmsl_total,
    npair_loss,
    npair_loss_grads,
    softmax_ce,
    triplet_loss,
)
from margintrack.metricspace import ContractViolation, GradTape, finite_diff_check
from margintrack.mining import LabeledEmbedding, MarginParams, mine

PARAMS = MarginParams(alpha=1.6, beta=0.1, m=0.2, delta=0.2)


def labeled(vec, label, sid, modality="rgb") -> LabeledEmbedding:
    return LabeledEmbedding(np.asarray(vec, dtype=np.float64), label, modality, sid)


class TestTripletLoss:
    def test_inactive_hinge(self):
        # d(a,p) = 0.25, d(a,n) = 0.81, m = 0.2: 0.25 + 0.2 - 0.81 < 0
        a, p, n = np.zeros(1), np.array([0.5]), np.array([0.9])
        assert triplet_loss([(a, p, n)], m=0.2).value == 0.0

    def test_equal_distances(self):
        a, p = np.zeros(1), np.array([1.0])
        assert triplet_loss([(a, p, p)], m=0.2).value == pytest.approx(0.2, abs=1e-15)

    def test_degenerate_identity(self):
        a, p = np.zeros(1), np.array([1.0])
        assert triplet_loss([(a, p, p)], m=0.0).value == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ContractViolation):
            triplet_loss([], m=0.2)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_zero_whenever_negative_far_enough(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=2)
        p = rng.normal(size=2)
        d_ap = float(np.sum((a - p) ** 2))
        # place the negative far enough that d(a,n) >= d(a,p) + m
        n = a + np.array([np.sqrt(d_ap + 0.2 + 1e-6), 0.0])
        assert triplet_loss([(a, p, n)], m=0.2).value == 0.0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        trips = [tuple(rng.normal(size=(3, 2))) for _ in range(5)]
        v1 = triplet_loss(trips, m=0.2).value
        v2 = triplet_loss(trips[::-1], m=0.2).value
        assert v1 == pytest.approx(v2, abs=1e-14)


class TestNpairLoss:
    def test_symmetric_logits_give_log2(self):
        anchors = np.array([[1.0, 0.0], [0.0, 1.0]])
        positives = np.zeros((2, 2))
        assert npair_loss(anchors, positives).value == pytest.approx(
            math.log(2.0), abs=1e-15
        )

    def test_wide_gap_vanishes(self):
        # a_i . p_i exceeds a_i . p_j by 10 for every other identity j
        anchors = np.array([[10.0, 0.0], [0.0, 10.0]])
        positives = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert npair_loss(anchors, positives).value < 1e-4

    def test_single_identity_rejected(self):
        with pytest.raises(ContractViolation):
            npair_loss(np.ones((1, 2)), np.ones((1, 2)))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(1)
        A = rng.normal(size=(3, 2))
        P = rng.normal(size=(3, 2))
        _, dA, dP = npair_loss_grads(A, P)
        tape = GradTape(params=np.concatenate([A.ravel(), P.ravel()]))
        tape.accumulate(np.concatenate([dA.ravel(), dP.ravel()]))

        def lossfn(theta):
            a = theta[:6].reshape(3, 2)
            p = theta[6:].reshape(3, 2)
            return npair_loss(a, p).value

        report = finite_diff_check(lossfn, tape)
        assert report.passed, report.max_rel_error


class TestLiftedStructLoss:
    def test_far_negative_clips_to_zero(self):
        batch = [
            labeled([0.0, 0.0], "positive", 0),
            labeled([0.0, 0.0], "positive", 1),
            labeled([np.sqrt(21.0), 0.0], "negative", 2),  # beta - d = -20
        ]
        assert lifted_struct_loss(batch, beta=1.0).value == 0.0

    def test_negative_on_the_beta_shell(self):
        # both positive endpoints see one negative link at d = beta, so the
        # hinge argument is log(2) and the mean over 2 * |pairs| halves it
        batch = [
            labeled([0.0, 0.0], "positive", 0),
            labeled([0.0, 0.0], "positive", 1),
            labeled([1.0, 0.0], "negative", 2),
        ]
        assert lifted_struct_loss(batch, beta=1.0).value == pytest.approx(
            math.log(2.0) / 2.0, abs=1e-15
        )

    def test_needs_a_positive_pair(self):
        batch = [labeled([0.0], "positive", 0), labeled([1.0], "negative", 1)]
        with pytest.raises(ContractViolation):
            lifted_struct_loss(batch, beta=1.0)

    def test_needs_an_opposite_link(self):
        batch = [labeled([0.0], "positive", 0), labeled([1.0], "positive", 1)]
        with pytest.raises(ContractViolation):
            lifted_struct_loss(batch, beta=1.0)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        embs = rng.normal(size=(4, 2))
        labels = ["positive", "positive", "negative", "negative"]
        batch = [labeled(embs[i], labels[i], i) for i in range(4)]
        _, dE = lifted_struct_loss_grads(batch, beta=1.0)
        tape = GradTape(params=embs.ravel())
        tape.accumulate(dE.ravel())

        def lossfn(theta):
            rows = theta.reshape(4, 2)
            b = [labeled(rows[i], labels[i], i) for i in range(4)]
            return lifted_struct_loss(b, beta=1.0).value

        report = finite_diff_check(lossfn, tape)
        assert report.passed, report.max_rel_error

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        embs = rng.normal(size=(5, 2))
        labels = ["positive", "positive", "negative", "positive", "negative"]
        batch = [labeled(embs[i], labels[i], i) for i in range(5)]
        v1 = lifted_struct_loss(batch, beta=0.5).value
        v2 = lifted_struct_loss(batch[::-1], beta=0.5).value
        assert v1 == pytest.approx(v2, abs=1e-12)


class TestBandPairLoss:
    def test_inside_positive_band_returns_beta_exactly(self):
        assert mmsl_pair_loss(1.55, True, PARAMS) == 0.1

    def test_inside_negative_band_returns_beta_exactly(self):
        assert mmsl_pair_loss(1.85, False, PARAMS) == 0.1

    def test_positive_far_outside(self):
        # |2.0 - 1.5| + |2.0 - 1.6| = 0.9
        assert mmsl_pair_loss(2.0, True, PARAMS) == pytest.approx(0.9, abs=1e-12)

    def test_negative_distance_rejected(self):
        with pytest.raises(ContractViolation):
            mmsl_pair_loss(-0.1, True, PARAMS)

    def test_non_finite_rejected(self):
        with pytest.raises(ContractViolation):
            mmsl_pair_loss(float("nan"), True, PARAMS)

    @settings(max_examples=80, deadline=None)
    @given(d=st.floats(0.0, 4.0))
    def test_never_below_beta_and_flat_only_on_band(self, d):
        val = mmsl_pair_loss(d, True, PARAMS)
        assert val >= PARAMS.beta
        inside = PARAMS.alpha - PARAMS.beta <= d <= PARAMS.alpha
        if inside:
            assert val == PARAMS.beta
        else:
            assert val > PARAMS.beta

    @settings(max_examples=80, deadline=None)
    @given(d=st.floats(0.0, 4.0), positive=st.booleans())
    def test_slope_magnitude_at_most_two(self, d, positive):
        slope = float(band_loss_slopes(d, positive, PARAMS))
        assert abs(slope) <= 2.0

    def test_beta_zero_degenerate_band(self):
        p = MarginParams(alpha=1.6, beta=0.0, m=0.2)
        assert float(band_loss_values(1.6, True, p)) == 0.0
        assert float(band_loss_values(1.7, True, p)) > 0.0

    def test_band_membership_eps_padding(self):
        d = np.array([1.449, 1.451, 1.649, 1.651])
        got = band_membership(d, True, PARAMS, eps=0.05)
        assert got.tolist() == [False, True, True, False]


class TestSetLosses:
    def test_empty_sets_are_zero(self):
        anchor = np.zeros(1)
        mined = mine(anchor, [], PARAMS)
        assert mmsl_set_losses(anchor, [], mined, PARAMS) == (0.0, 0.0)

    def test_single_confusing_positive(self):
        anchor = np.zeros(1)
        samples = [labeled([np.sqrt(2.0)], "positive", 0)]
        mined = mine(anchor, samples, PARAMS)
        l_p, l_n = mmsl_set_losses(anchor, samples, mined, PARAMS)
        assert l_p == pytest.approx(0.9, abs=1e-12)
        assert l_n == 0.0

    def test_two_confusing_negatives(self):
        # per-sample band losses: |1.8-1.7| + |1.9-1.7| = 0.3 and
        # |1.8-1.75| + |1.9-1.75| = 0.2, so the set mean is 0.25
        anchor = np.zeros(1)
        samples = [
            labeled([np.sqrt(1.7)], "negative", 0),
            labeled([np.sqrt(1.75)], "negative", 1),
        ]
        mined = mine(anchor, samples, PARAMS)
        assert mined.confusing_negatives == [0, 1]
        l_p, l_n = mmsl_set_losses(anchor, samples, mined, PARAMS)
        assert l_p == 0.0
        assert l_n == pytest.approx(0.25, abs=1e-12)

    def test_samples_inside_bands_mine_empty_and_cost_nothing(self):
        anchor = np.zeros(1)
        samples = [
            labeled([np.sqrt(1.55)], "positive", 0),  # inside [1.5, 1.6]
            labeled([np.sqrt(1.85)], "negative", 1),  # inside [1.8, 1.9]
        ]
        mined = mine(anchor, samples, PARAMS)
        assert mined.confusing_positives == []
        assert mined.confusing_negatives == []
        assert mmsl_set_losses(anchor, samples, mined, PARAMS) == (0.0, 0.0)


class TestCrossModalityLoss:
    def test_satisfied_margins(self):
        val = cross_modality_loss(
            pos_r=[1.0], neg_r=[2.0], pos_t=[1.0], neg_t=[2.0], delta=0.2
        )
        assert val == 0.0

    def test_one_direction_violated(self):
        # max pos_r - min neg_t + delta = 1.9 - 1.8 + 0.2 = 0.3
        val = cross_modality_loss(
            pos_r=[1.9], neg_r=[5.0], pos_t=[0.1], neg_t=[1.8], delta=0.2
        )
        assert val == pytest.approx(0.3, abs=1e-12)

    def test_boundary_equality_is_satisfied(self):
        c = 1.3
        val = cross_modality_loss(
            pos_r=[c], neg_r=[c], pos_t=[c], neg_t=[c], delta=0.0
        )
        assert val == 0.0

    def test_empty_list_rejected(self):
        with pytest.raises(ContractViolation):
            cross_modality_loss([], [1.0], [1.0], [1.0], delta=0.2)

    def test_subgradients_hit_argmax_and_argmin_only(self):
        pos_r = np.array([0.5, 1.9, 1.0])
        neg_t = np.array([2.5, 1.8, 3.0])
        total, (g_pr, g_nr, g_pt, g_nt) = cross_modality_terms(
            pos_r, np.array([5.0]), np.array([0.1]), neg_t, delta=0.2
        )
        assert total == pytest.approx(0.3, abs=1e-12)
        assert g_pr.tolist() == [0.0, 1.0, 0.0]
        assert g_nt.tolist() == [0.0, -1.0, 0.0]
        assert g_pt.tolist() == [0.0]
        assert g_nr.tolist() == [0.0]

    def test_mean_positive_reduction(self):
        total, (g_pr, _, _, g_nt) = cross_modality_terms(
            np.array([1.0, 2.0]),
            np.array([9.0]),
            np.array([0.1]),
            np.array([1.6]),
            delta=0.2,
            positive_reduction="mean",
        )
        assert total == pytest.approx(1.5 - 1.6 + 0.2, abs=1e-12)
        assert g_pr.tolist() == [0.5, 0.5]
        assert g_nt.tolist() == [-1.0]

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), delta=st.floats(0.0, 0.5))
    def test_zero_iff_both_margins_hold(self, seed, delta):
        rng = np.random.default_rng(seed)
        lists = [rng.uniform(0.0, 3.0, size=rng.integers(1, 6)) for _ in range(4)]
        pos_r, neg_r, pos_t, neg_t = lists
        val = cross_modality_loss(pos_r, neg_r, pos_t, neg_t, delta)
        holds = (pos_r.max() + delta <= neg_t.min()) and (
            pos_t.max() + delta <= neg_r.min()
        )
        assert (val == 0.0) == holds


class TestHardestTriplet:
    def test_hand_case(self):
        loss, dd_pos, dd_neg = hardest_triplet_terms(
            np.array([1.0, 0.2]), np.array([1.5, 0.9]), m=0.2
        )
        # hardest negative is 0.9: args are 0.3 (active) and -0.5 (inactive)
        assert loss == pytest.approx(0.15, abs=1e-12)
        assert dd_pos.tolist() == [0.5, 0.0]
        assert dd_neg.tolist() == [0.0, -0.5]

    def test_empty_rejected(self):
        with pytest.raises(ContractViolation):
            hardest_triplet_terms(np.array([]), np.array([1.0]), m=0.2)


class TestTotalsAndClassification:
    def test_all_zero(self):
        lv = mmsl_total((0.0, 0.0), (0.0, 0.0), 0.0)
        assert lv.value == 0.0
        assert all(v == 0.0 for v in lv.term_breakdown.values())

    def test_plain_sum(self):
        lv = mmsl_total((0.3, 0.1), (0.2, 0.1), 0.1)
        assert lv.value == pytest.approx(0.8, abs=1e-15)
        assert lv.term_breakdown["L_rgb"] == pytest.approx(0.4, abs=1e-15)
        assert lv.term_breakdown["L_t"] == pytest.approx(0.3, abs=1e-15)
        assert lv.term_breakdown["L_cross"] == pytest.approx(0.1, abs=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(vals=st.lists(st.floats(0.0, 5.0), min_size=5, max_size=5))
    def test_breakdown_resums_to_value(self, vals):
        lv = mmsl_total((vals[0], vals[1]), (vals[2], vals[3]), vals[4])
        assert lv.value == pytest.approx(
            sum(lv.term_breakdown.values()), abs=1e-12
        )

    def test_uniform_softmax_is_log_two(self):
        logits = np.zeros((4, 2))
        labels = ["positive", "negative", "positive", "negative"]
        assert classification_loss(logits, labels).value == pytest.approx(
            math.log(2.0), abs=1e-15
        )

    def test_confident_correct_is_tiny(self):
        logits = np.array([[20.0, 0.0], [0.0, 20.0]])
        labels = ["positive", "negative"]
        assert classification_loss(logits, labels).value < 1e-8

    def test_bool_labels_match_strings(self):
        logits = np.array([[1.0, -1.0], [-2.0, 0.5]])
        a = classification_loss(logits, [True, False]).value
        b = classification_loss(logits, ["positive", "negative"]).value
        assert a == b

    def test_softmax_ce_gradient(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(3, 2))
        t = np.array([0, 1, 0])
        _, dz = softmax_ce(z, t)
        tape = GradTape(params=z.ravel())
        tape.accumulate(dz.ravel())
        report = finite_diff_check(
            lambda th: softmax_ce(th.reshape(3, 2), t)[0], tape
        )
        assert report.passed, report.max_rel_error

    def test_bad_logit_shape_rejected(self):
        with pytest.raises(ContractViolation):
            softmax_ce(np.zeros((2, 3)), np.zeros(2, dtype=int))
