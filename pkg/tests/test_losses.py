import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from multimix import autodiff as ad
from multimix import losses
from multimix.autodiff import Tensor

probs_2 = arrays(np.float64, st.tuples(st.integers(1, 12), st.just(2)), elements=st.floats(0.01, 10)).map(
    lambda a: a / a.sum(axis=1, keepdims=True)
)


class TestCrossEntropy:
    def test_hand_value(self):
        logits = Tensor(np.array([[0.0, 0.0], [2.0, 0.0]]))
        ce = losses.cross_entropy(logits, [0, 1]).data
        ref = (math.log(2) + (math.log(1 + math.exp(2)))) / 2
        assert float(ce) == pytest.approx(ref)

    def test_full_versus_retained_normalization(self):
        logits = Tensor(np.array([[1.0, 0.0], [0.0, 3.0], [2.0, 0.0], [0.0, 0.0]]))
        labels, mask = np.array([0, 1, 0, 1]), np.array([1, 1, 0, 0], bool)
        full = float(losses.cross_entropy(logits, labels, mask, "full").data)
        kept = float(losses.cross_entropy(logits, labels, mask, "retained").data)
        assert full == pytest.approx(kept * 2 / 4)

    def test_nothing_retained_is_zero_with_zero_grad(self):
        logits = Tensor(np.random.default_rng(0).normal(size=(5, 2)), requires_grad=True)
        ce = losses.cross_entropy(logits, np.zeros(5, int), np.zeros(5, bool))
        assert float(ce.data) == 0.0
        np.testing.assert_array_equal(ad.backward(ce)[logits], 0.0)

    def test_bad_labels(self):
        with pytest.raises(ValueError):
            losses.cross_entropy(Tensor(np.zeros((2, 2))), [0, 2])

    def test_gradient_is_softmax_minus_onehot(self):
        z = np.random.default_rng(1).normal(size=(4, 2))
        t = Tensor(z, requires_grad=True)
        y = np.array([0, 1, 1, 0])
        g = ad.backward(losses.cross_entropy(t, y))[t]
        p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
        np.testing.assert_allclose(g, (p - np.eye(2)[y]) / 4, atol=1e-12)


class TestPseudoLabels:
    def test_threshold_and_ties(self):
        p = np.array([[0.7, 0.3], [0.5, 0.5], [0.2, 0.8], [0.69, 0.31]])
        plb = losses.pseudo_label(p, 0.7)
        np.testing.assert_array_equal(plb.labels, [0, 0, 1, 0])
        np.testing.assert_array_equal(plb.mask, [True, False, True, False])
        assert plb.retained == 2

    @settings(max_examples=100, deadline=None)
    @given(probs_2)
    def test_retained_count_monotone_in_t(self, p):
        counts = [losses.pseudo_label(p, t).retained for t in np.arange(0.5, 0.951, 0.05)]
        assert all(a >= b for a, b in zip(counts, counts[1:]))


class TestDice:
    def test_identical_hard_masks(self):
        s = (np.random.default_rng(0).random((3, 1, 8, 8)) > 0.5).astype(float)
        assert float(losses.dice_loss(Tensor(s), s).data) == pytest.approx(0.0, abs=1e-7)

    def test_disjoint_is_one(self):
        a = np.zeros((1, 1, 4, 4))
        b = np.zeros((1, 1, 4, 4))
        a[..., :2, :] = 1
        b[..., 2:, :] = 1
        assert float(losses.dice_loss(Tensor(a), b).data) == pytest.approx(1.0, abs=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            losses.dice_loss(Tensor(np.zeros((1, 1, 4, 4))), np.zeros((1, 1, 4, 2)))

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (2, 1, 4, 4), elements=st.floats(0, 1)),
           arrays(np.float64, (2, 1, 4, 4), elements=st.floats(0, 1)))
    def test_in_unit_interval(self, p, s):
        v = float(losses.dice_loss(Tensor(p), s).data)
        assert -1e-12 <= v <= 1.0 + 1e-12


class TestKL:
    def test_zero_when_equal(self):
        p = Tensor(np.random.default_rng(0).random((2, 1, 4, 4)))
        assert float(losses.kl_consistency(p, p).data) == pytest.approx(0.0, abs=1e-15)

    def test_closed_form(self):
        p, q = 0.3, 0.6
        ref = p * math.log(p / q) + (1 - p) * math.log((1 - p) / (1 - q))
        got = losses.kl_consistency(Tensor(np.full((1, 1, 2, 2), p)), Tensor(np.full((1, 1, 2, 2), q)))
        assert float(got.data) == pytest.approx(ref)

    def test_target_side_is_detached(self):
        p = Tensor(np.full((1, 1, 2, 2), 0.3), requires_grad=True)
        q = Tensor(np.full((1, 1, 2, 2), 0.6), requires_grad=True)
        g = ad.backward(losses.kl_consistency(p, q))
        assert p not in g
        # d/dq of the mean KL = (q - p) / (q (1 - q)) / n
        np.testing.assert_allclose(g[q], (0.6 - 0.3) / (0.6 * 0.4) / 4)

    def test_clamped_extremes_are_finite(self):
        p = Tensor(np.array([[[[0.0, 1.0]]]]))
        q = Tensor(np.array([[[[1.0, 0.0]]]]))
        assert np.isfinite(float(losses.kl_consistency(p, q).data))

    @settings(max_examples=120, deadline=None)
    @given(arrays(np.float64, (1, 1, 3, 3), elements=st.floats(0, 1)),
           arrays(np.float64, (1, 1, 3, 3), elements=st.floats(0, 1)))
    def test_nonnegative(self, p, q):
        assert float(losses.kl_consistency(Tensor(p), Tensor(q)).data) >= -1e-12


class TestTotal:
    def terms(self):
        one = lambda v: Tensor(np.array(v))  # noqa: E731
        return {"L_c_sup": one(0.5), "L_c_unsup": one(0.4)}, {"L_s_dice": one(0.2), "L_s_kl": one(0.1)}

    def test_weighted_sum(self):
        c, s = self.terms()
        hp = losses.HyperParams()
        total, rep = losses.total_loss(c, s, hp, retained=3)
        assert float(total.data) == pytest.approx(0.5 + 0.25 * 0.4 + 5.0 * 0.2 + 0.01 * 0.1)
        assert rep.recomposed() == pytest.approx(rep.L_total)
        assert rep.retained_count == 3

    def test_doubling_lambda_doubles_unsup_contribution(self):
        c, s = self.terms()
        _, r1 = losses.total_loss(c, s, losses.HyperParams(lam=0.25))
        _, r2 = losses.total_loss(c, s, losses.HyperParams(lam=0.5))
        assert r2.L_c_unsup == pytest.approx(2 * r1.L_c_unsup)
        assert r2.L_c_sup == r1.L_c_sup

    def test_nan_raises(self):
        c, s = self.terms()
        c["L_c_sup"] = Tensor(np.array(np.nan))
        with pytest.raises(ad.NonFiniteError):
            losses.total_loss(c, s, losses.HyperParams())

    @pytest.mark.parametrize("kw", [dict(t=0.5), dict(t=1.1), dict(lam=-1.0), dict(m=0),
                                    dict(unsup_normalization="x")])
    def test_validate(self, kw):
        with pytest.raises(ValueError):
            losses.HyperParams(**kw).validate()
