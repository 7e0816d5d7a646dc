"""Core loss behavior: dynamic weights, losses, schedule, mixup.

Expected values marked "hand" below were computed by direct evaluation
of the printed formulas, independent of the implementation under test.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmt.losses import (
    GammaPair,
    WeightCase,
    combined_loss,
    combined_loss_from_logits,
    combined_loss_logit_grad,
    cross_entropy,
    dynamic_weight,
    dynamic_weight_array,
    dynamic_weight_map,
    entropy,
    gamma_schedule,
    labeled_loss,
    mixup_batch,
    one_hot,
    softmax,
    unlabeled_loss,
    validate_probability_vector,
)


def prob_vectors(n_classes=None):
    sizes = st.just(n_classes) if n_classes else st.integers(2, 6)
    return sizes.flatmap(
        lambda c: st.lists(
            st.floats(1e-6, 1.0, allow_nan=False), min_size=c, max_size=c
        ).map(lambda xs: np.array(xs) / np.sum(xs))
    )


class TestEntropy:
    def test_one_hot_is_zero(self):
        assert entropy(np.array([1.0, 0.0, 0.0, 0.0])) == 0.0

    def test_uniform_two_classes(self):
        assert entropy(np.array([0.5, 0.5])) == pytest.approx(math.log(2), abs=1e-12)

    def test_uniform_four_classes(self):
        assert entropy(np.full(4, 0.25)) == pytest.approx(math.log(4), abs=1e-12)

    def test_invalid_vector_rejected(self):
        with pytest.raises(ValueError):
            entropy(np.array([0.9, 0.2]))
        with pytest.raises(ValueError):
            entropy(np.array([-0.1, 1.1]))

    @given(prob_vectors())
    def test_bounds(self, p):
        h = entropy(p)
        assert -1e-12 <= h <= math.log(p.size) + 1e-9

    @given(st.integers(2, 8))
    def test_extremes_iff(self, c):
        one = np.zeros(c)
        one[c // 2] = 1.0
        assert entropy(one) == 0.0
        assert entropy(np.full(c, 1.0 / c)) == pytest.approx(math.log(c), abs=1e-9)


def oracle_weight(y_a, c_a, p_b_vec, g1, g2):
    """Literal case-by-case re-statement, kept independent of dmt.losses."""
    best_cls, best_p = 0, p_b_vec[0]
    for c, p in enumerate(p_b_vec):
        if p > best_p:
            best_cls, best_p = c, p
    if y_a == best_cls:
        return p_b_vec[y_a] ** g1, "agreement"
    if c_a >= best_p:
        return p_b_vec[y_a] ** g2, "negative"
    return 0.0, "positive"


class TestDynamicWeight:
    def test_agreement_with_argmax_tie(self):
        # argmax tie on [0.5, 0.5] resolves to index 0 == pseudo label
        res = dynamic_weight(0, 0.9, np.array([0.5, 0.5]), GammaPair(5, 5))
        assert res.case is WeightCase.AGREEMENT
        assert res.weight == pytest.approx(0.5**5, rel=1e-12)

    def test_negative_disagreement(self):
        res = dynamic_weight(0, 0.9, np.array([0.3, 0.7]), GammaPair(5, 5))
        assert res.case is WeightCase.NEGATIVE_DISAGREEMENT
        assert res.weight == pytest.approx(0.3**5, rel=1e-12)

    def test_positive_disagreement_is_exactly_zero(self):
        res = dynamic_weight(0, 0.6, np.array([0.2, 0.8]), GammaPair(5, 5))
        assert res.case is WeightCase.POSITIVE_DISAGREEMENT
        assert res.weight == 0.0

    def test_confidence_tie_is_negative_disagreement(self):
        # c_a == c_b falls in the middle case per the >= comparison
        res = dynamic_weight(0, 0.7, np.array([0.3, 0.7]), GammaPair(1, 1))
        assert res.case is WeightCase.NEGATIVE_DISAGREEMENT

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            dynamic_weight(3, 0.9, np.array([0.5, 0.5]), GammaPair(1))

    def test_confidence_out_of_range(self):
        with pytest.raises(ValueError):
            dynamic_weight(0, 0.0, np.array([0.5, 0.5]), GammaPair(1))

    def test_matches_oracle_on_randomized_tuples(self):
        rng = np.random.default_rng(7)
        gammas = GammaPair(3.0, 1.5)
        for _ in range(2000):
            c = int(rng.integers(2, 6))
            p = rng.dirichlet(np.ones(c))
            y_a = int(rng.integers(c))
            c_a = float(rng.uniform(1e-6, 1.0))
            got = dynamic_weight(y_a, c_a, p, gammas)
            want, _ = oracle_weight(y_a, c_a, p, 3.0, 1.5)
            if want == 0.0:
                assert got.weight == 0.0
            else:
                assert got.weight == pytest.approx(want, rel=1e-12)

    @given(prob_vectors(), st.floats(1e-6, 1.0), st.floats(0, 8), st.floats(0, 8))
    @settings(max_examples=200)
    def test_weight_in_unit_interval(self, p, c_a, g1, g2):
        res = dynamic_weight(0, c_a, p, GammaPair(g1, g2))
        assert 0.0 <= res.weight <= 1.0
        if res.case is WeightCase.POSITIVE_DISAGREEMENT:
            assert res.weight == 0.0

    def test_zero_gammas_give_unit_weights_off_case3(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            p = rng.dirichlet(np.ones(4))
            res = dynamic_weight(int(rng.integers(4)), float(rng.uniform(0.1, 1)), p, GammaPair(0, 0))
            if res.case is not WeightCase.POSITIVE_DISAGREEMENT:
                assert res.weight == 1.0

    def test_monotone_in_p_b_within_case(self):
        g = GammaPair(3, 3)
        # agreement case, growing probability of the pseudo class
        lo = dynamic_weight(0, 0.9, np.array([0.6, 0.4]), g)
        hi = dynamic_weight(0, 0.9, np.array([0.8, 0.2]), g)
        assert lo.case is hi.case is WeightCase.AGREEMENT
        assert hi.weight > lo.weight

    def test_non_increasing_in_gamma(self):
        p = np.array([0.6, 0.4])
        weights = [dynamic_weight(0, 0.9, p, GammaPair(g, g)).weight for g in (0, 1, 2, 5)]
        assert all(a >= b for a, b in zip(weights, weights[1:]))


class TestDynamicWeightMap:
    def test_all_ignored_gives_zero_map(self):
        labels = np.full((3, 3), 255, dtype=np.uint8)
        confs = np.zeros((3, 3))
        p = np.full((3, 3, 2), 0.5)
        wm = dynamic_weight_map(labels, confs, p, GammaPair(1))
        assert np.all(wm.weights == 0.0)
        assert np.all(wm.cases == WeightCase.IGNORED)

    def test_single_pixel_reduces_to_scalar_op(self):
        labels = np.array([[1]], dtype=np.uint8)
        confs = np.array([[0.8]])
        p = np.array([[[0.3, 0.7]]])
        wm = dynamic_weight_map(labels, confs, p, GammaPair(2, 2))
        scalar = dynamic_weight(1, 0.8, np.array([0.3, 0.7]), GammaPair(2, 2))
        assert wm.weights[0, 0] == pytest.approx(scalar.weight, rel=1e-12)
        assert wm.cases[0, 0] == scalar.case

    def test_mixed_map_matches_pixel_loop(self):
        rng = np.random.default_rng(11)
        p = rng.dirichlet(np.ones(3), size=(2, 2))
        labels = rng.integers(0, 3, size=(2, 2)).astype(np.uint8)
        labels[0, 1] = 255
        confs = rng.uniform(0.2, 1.0, size=(2, 2))
        wm = dynamic_weight_map(labels, confs, p, GammaPair(2, 1))
        for i in range(2):
            for j in range(2):
                if labels[i, j] == 255:
                    assert wm.weights[i, j] == 0.0
                    assert wm.cases[i, j] == WeightCase.IGNORED
                else:
                    ref = dynamic_weight(int(labels[i, j]), confs[i, j], p[i, j], GammaPair(2, 1))
                    assert wm.weights[i, j] == pytest.approx(ref.weight, rel=1e-12)
                    assert wm.cases[i, j] == ref.case

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dynamic_weight_map(
                np.zeros((2, 2), dtype=np.uint8), np.ones((2, 3)), np.full((2, 2, 2), 0.5), GammaPair(1)
            )


class TestLosses:
    def test_unlabeled_all_case3_is_zero(self):
        batch = [(0, 0.5, np.array([0.1, 0.9])), (1, 0.2, np.array([0.8, 0.2]))]
        assert unlabeled_loss(batch, GammaPair(1), n_total=2) == 0.0

    def test_unlabeled_perfect_agreement_is_zero(self):
        assert unlabeled_loss([(0, 1.0, np.array([1.0, 0.0]))], GammaPair(1), 1) == 0.0

    def test_unlabeled_hand_value(self):
        # hand: w = 0.7, ce = -ln 0.7 = 0.3566749, product = 0.2496724
        loss = unlabeled_loss([(0, 0.9, np.array([0.7, 0.3]))], GammaPair(1, 1), 1)
        assert loss == pytest.approx(0.7 * -math.log(0.7), rel=1e-12)
        assert loss == pytest.approx(0.24967, abs=5e-6)

    def test_unlabeled_bad_batch_size(self):
        with pytest.raises(ValueError):
            unlabeled_loss([], GammaPair(1), 0)

    def test_labeled_perfect(self):
        assert labeled_loss([(1, np.array([0.0, 1.0]))], 1) == 0.0

    def test_labeled_hand_value(self):
        assert labeled_loss([(1, np.array([0.1, 0.9]))], 1) == pytest.approx(
            -math.log(0.9), rel=1e-12
        )

    def test_labeled_empty_slice(self):
        assert labeled_loss([], 4) == 0.0

    def test_labeled_bad_class(self):
        with pytest.raises(IndexError):
            labeled_loss([(5, np.array([0.5, 0.5]))], 1)

    def test_combined_empty_parts(self):
        lab = [(1, np.array([0.2, 0.8]))]
        unl = [(0, 0.9, np.array([0.7, 0.3]))]
        only_lab = combined_loss(lab, [], GammaPair(1))
        assert only_lab.combined == only_lab.labeled
        only_unl = combined_loss([], unl, GammaPair(1))
        assert only_unl.combined == only_unl.unlabeled

    def test_combined_hand_value_shared_denominator(self):
        lab = [(1, np.array([0.1, 0.9]))]
        unl = [(0, 0.9, np.array([0.7, 0.3]))]
        out = combined_loss(lab, unl, GammaPair(1, 1), n_total=2)
        want = (-math.log(0.9) + 0.7 * -math.log(0.7)) / 2.0
        assert out.combined == pytest.approx(want, rel=1e-12)
        assert out.combined == pytest.approx(out.labeled + out.unlabeled, rel=1e-9)

    def test_combined_n_mismatch(self):
        with pytest.raises(ValueError):
            combined_loss([(0, np.array([1.0, 0.0]))], [], GammaPair(1), n_total=5)

    def test_cross_entropy_floors_zero_probability(self):
        assert cross_entropy(0, np.array([0.0, 1.0])) == pytest.approx(-math.log(1e-12))

    def test_zero_gamma_degenerates_to_masked_cross_entropy(self):
        rng = np.random.default_rng(5)
        batch = []
        for _ in range(32):
            p = rng.dirichlet(np.ones(3))
            batch.append((int(rng.integers(3)), float(rng.uniform(0.1, 1.0)), p))
        got = unlabeled_loss(batch, GammaPair(0, 0), len(batch))
        want = 0.0
        for y, c, p in batch:
            _, case = oracle_weight(y, c, p, 0, 0)
            if case != "positive":
                want += -math.log(max(p[y], 1e-12))
        assert got == pytest.approx(want / len(batch), rel=1e-12)


class TestGammaSchedule:
    def test_endpoint_at_t_max(self):
        assert gamma_schedule(100, 100, 4.0) == pytest.approx(4.0, abs=1e-12)

    def test_start_value(self):
        assert gamma_schedule(0, 100, 4.0) == pytest.approx(4.0 * math.exp(5), rel=1e-9)
        assert gamma_schedule(0, 100, 4.0) == pytest.approx(593.65, abs=0.01)

    def test_midpoint(self):
        assert gamma_schedule(50, 100, 1.0) == pytest.approx(math.exp(1.25), rel=1e-12)
        assert gamma_schedule(50, 100, 1.0) == pytest.approx(3.4903, abs=1e-4)

    def test_strictly_decreasing(self):
        values = [gamma_schedule(t, 100, 2.0) for t in range(101)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_clamps_and_warns_beyond_t_max(self):
        with pytest.warns(UserWarning):
            assert gamma_schedule(120, 100, 4.0) == pytest.approx(4.0, abs=1e-12)

    def test_negative_sign_ramps_up(self):
        values = [gamma_schedule(t, 100, 2.0, sign=-1) for t in range(101)]
        assert all(a < b for a, b in zip(values, values[1:]))
        assert values[-1] == pytest.approx(2.0, abs=1e-12)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            gamma_schedule(0, 0, 1.0)
        with pytest.raises(ValueError):
            gamma_schedule(-1, 10, 1.0)


class TestMixup:
    def _batch(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(6, 4))
        q = one_hot(rng.integers(0, 3, size=6), 3)
        w = rng.uniform(size=6)
        return x, q, w

    def test_lambda_one_is_identity(self):
        x, q, w = self._batch()
        out = mixup_batch(x, q, w, 1.0, np.random.default_rng(0))
        assert np.array_equal(out.inputs, x)
        assert np.array_equal(out.targets, q)
        assert np.array_equal(out.weights, w)

    def test_lambda_zero_is_the_partner(self):
        x, q, w = self._batch()
        out = mixup_batch(x, q, w, 0.0, np.random.default_rng(0))
        assert np.array_equal(out.inputs, x[out.pairing])
        assert np.array_equal(out.targets, q[out.pairing])

    def test_midpoint_weights(self):
        x = np.zeros((2, 1))
        q = one_hot(np.array([0, 1]), 2)
        out = mixup_batch(x, q, np.array([1.0, 0.0]), 0.5, np.random.default_rng(1))
        partner = out.pairing
        mixed = 0.5 * np.array([1.0, 0.0]) + 0.5 * np.array([1.0, 0.0])[partner]
        assert np.allclose(out.weights, mixed)
        if partner[0] == 1:  # actually crossed pairs give exactly 0.5
            assert out.weights[0] == pytest.approx(0.5)

    def test_lambda_out_of_range(self):
        x, q, w = self._batch()
        with pytest.raises(ValueError):
            mixup_batch(x, q, w, 1.5, np.random.default_rng(0))


def finite_difference(fn, z, h=1e-6):
    g = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        zp = z.copy()
        zp[idx] += h
        zm = z.copy()
        zm[idx] -= h
        g[idx] = (fn(zp) - fn(zm)) / (2.0 * h)
    return g


class TestLogitGradient:
    def test_matches_central_differences(self):
        rng = np.random.default_rng(17)
        z_lab = rng.normal(size=(2, 3))
        labels = np.array([0, 2])
        z_unl = rng.normal(size=(2, 3))
        pseudo = np.array([1, 0])
        conf = np.array([0.8, 0.6])
        gammas = GammaPair(2.0, 1.0)

        got_lab, got_unl = combined_loss_logit_grad(z_lab, labels, z_unl, pseudo, conf, gammas)

        fd_lab = finite_difference(
            lambda z: combined_loss_from_logits(z, labels, z_unl, pseudo, conf, gammas).combined,
            z_lab,
        )
        fd_unl = finite_difference(
            lambda z: combined_loss_from_logits(z_lab, labels, z, pseudo, conf, gammas).combined,
            z_unl,
        )
        assert np.allclose(got_lab, fd_lab, rtol=1e-6, atol=1e-9)
        assert np.allclose(got_unl, fd_unl, rtol=1e-6, atol=1e-9)

    def test_zero_gamma_recovers_cross_entropy_gradient(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(3, 4))
        pseudo = np.array([0, 1, 2])
        conf = np.full(3, 0.99)  # high labeller confidence keeps cases 1/2
        _, grad = combined_loss_logit_grad(
            np.zeros((0, 4)), np.zeros(0, dtype=int), z, pseudo, conf, GammaPair(0, 0)
        )
        p = softmax(z)
        want = (p - one_hot(pseudo, 4)) / 3.0
        assert np.allclose(grad, want, atol=1e-12)


class TestValidation:
    @given(prob_vectors())
    def test_valid_vectors_pass(self, p):
        validate_probability_vector(p)

    def test_sum_tolerance(self):
        validate_probability_vector(np.array([0.5, 0.500009]))
        with pytest.raises(ValueError):
            validate_probability_vector(np.array([0.5, 0.6]))
