import math

import mpmath
import numpy as np
import pytest

from bptriplet import losses as L
from bptriplet import tensor as T
from bptriplet.losses import LossConfig, TripletBatch
from bptriplet.tensor import ConfigError, Tensor

from conftest import check_grad

mpmath.mp.dps = 50

# extended-precision oracles, frozen
E_NEG_02 = 0.8187307530779818  # exp(-0.2)
BP_EXAMPLE = 0.03625384938440363  # (1 - exp(-0.2)) * 0.2
LN2 = 0.6931471805599453
LN4 = 1.3862943611198906


def test_frozen_oracles_match_mpmath():
    assert float(mpmath.exp(-mpmath.mpf("0.2"))) == E_NEG_02
    assert float((1 - mpmath.exp(-mpmath.mpf("0.2"))) * mpmath.mpf("0.2")) == BP_EXAMPLE
    assert float(mpmath.log(2)) == LN2
    assert float(mpmath.log(4)) == LN4


def _triplet(d_ap, d_an):
    """Anchor, positive and negative on a line with the given squared distances."""
    feats = np.array([[0.0], [math.sqrt(d_ap)], [-math.sqrt(d_an)]])
    return TripletBatch(Tensor(feats), [(0, 1, 2)], labels=[0, 0, 1])


class TestConfig:
    @pytest.mark.parametrize("kw", [{"alpha": 0.0}, {"gamma": -1.0}, {"margin": -0.1}, {"lambda1": -1.0}])
    def test_rejects_bad_values(self, kw):
        with pytest.raises(ConfigError):
            LossConfig(**kw)

    def test_defaults(self):
        cfg = LossConfig()
        assert (cfg.alpha, cfg.gamma, cfg.lambda1, cfg.lambda2) == (1.0, 1.0, 1.0, 1.0)


class TestTripletBatch:
    def test_validate(self):
        f = Tensor(np.zeros((3, 2)))
        TripletBatch(f, [(0, 1, 2)], [0, 0, 1]).validate()
        with pytest.raises(ValueError):
            TripletBatch(f, [(0, 0, 2)]).validate()
        with pytest.raises(ValueError):
            TripletBatch(f, [(0, 1, 2)], [0, 1, 1]).validate()
        with pytest.raises(IndexError):
            TripletBatch(f, [(0, 1, 3)]).validate()


class TestLikelihood:
    def test_zero_exponent(self):
        assert L.pair_likelihood(1, 0, 0.4, 0.4, 1.0, 0.0) == 1.0

    def test_both_similar_branch(self):
        got = L.pair_likelihood(1, 1, 0.3, 0.7, 2.0, 0.5)
        assert got == pytest.approx(math.exp(-2.0 * (0.3 + 0.7)), rel=1e-15)

    def test_mixed_example(self):
        assert L.pair_likelihood(1, 0, 0.5, 0.6, 1.0, 0.3) == pytest.approx(E_NEG_02, rel=1e-15)

    def test_closed_form_matches_every_branch(self, rng):
        for _ in range(2000):
            s_ij, s_ik = rng.integers(0, 2, size=2)
            d_ij, d_ik, m = rng.uniform(0, 3, size=3)
            a = rng.uniform(0.1, 3)
            closed = L.pair_likelihood(s_ij, s_ik, d_ij, d_ik, a, m)
            cases = L.pair_likelihood_cases(s_ij, s_ik, d_ij, d_ik, a, m)
            assert abs(closed - cases) <= 1e-14 * abs(cases)

    def test_bad_similarity(self):
        with pytest.raises(ValueError):
            L.pair_likelihood_cases(2, 0, 0.1, 0.1, 1.0, 0.0)


class TestModulatingWeight:
    def test_range_and_monotone(self):
        v = np.linspace(-2, 10, 1000)
        w = L.modulating_weight(v, 1.0, 1.0)
        assert np.all((w >= 0) & (w < 1))
        assert np.all(np.diff(w) >= 0)
        assert L.modulating_weight(0.0, 1.0, 1.0) == 0.0

    def test_gamma_zero_is_one(self):
        np.testing.assert_array_equal(L.modulating_weight([-1.0, 0.0, 2.0], 1.0, 0.0), [1.0, 1.0, 1.0])

    def test_fractional_gamma_finite_for_negative_v(self):
        w = L.modulating_weight(np.array([-3.0, 0.5]), 2.0, 0.5)
        assert np.all(np.isfinite(w))
        assert w[0] == 0.0


class TestBpTriplet:
    def test_inactive_hinge(self):
        assert L.bp_triplet_loss(_triplet(0.1, 0.9), LossConfig()).item() == 0.0

    def test_gamma_zero_is_hinge(self):
        got = L.bp_triplet_loss(_triplet(0.5, 0.6), LossConfig(gamma=0.0)).item()
        assert got == pytest.approx(0.2, rel=1e-12)

    def test_gamma_one_example(self):
        got = L.bp_triplet_loss(_triplet(0.5, 0.6), LossConfig()).item()
        assert got == pytest.approx(BP_EXAMPLE, rel=1e-12)

    def test_empty_triplets_zero(self):
        assert L.bp_triplet_loss(TripletBatch(Tensor(np.ones((3, 2))), []), LossConfig()).item() == 0.0

    def test_nonnegative_and_zero_iff_all_satisfied(self, rng):
        for _ in range(100):
            f = Tensor(rng.standard_normal((6, 3)))
            trips = [(0, 1, 2), (3, 4, 5), (1, 0, 5)]
            batch = TripletBatch(f, trips)
            loss = L.bp_triplet_loss(batch, LossConfig()).item()
            v = L.triplet_violations(batch, 0.3).data
            assert loss >= 0
            assert (loss == 0) == bool(np.all(v <= 0))

    def test_gamma_zero_equals_alpha_hinge_elementwise(self, rng):
        for _ in range(200):
            f = Tensor(rng.standard_normal((5, 4)))
            batch = TripletBatch(f, [(0, 1, 2), (3, 4, 0), (2, 3, 1)])
            a = rng.uniform(0.1, 4)
            bp = L.bp_triplet_terms(batch, LossConfig(alpha=a, gamma=0.0)).data
            hinge = L.hinge_triplet_terms(batch, 0.3).data
            assert np.max(np.abs(bp - a * hinge)) < 1e-12

    def test_gradient_check(self, rng):
        trips = [(0, 1, 2), (3, 4, 5), (0, 4, 2)]
        check_grad(lambda f: L.bp_triplet_loss(TripletBatch(f, trips), LossConfig(margin=1.0)),
                   [rng.standard_normal((6, 3))])

    def test_gradient_check_fractional_gamma(self, rng):
        trips = [(0, 1, 2), (3, 4, 5)]
        cfg = LossConfig(alpha=2.0, gamma=0.5, margin=2.0)
        check_grad(lambda f: L.bp_triplet_loss(TripletBatch(f, trips), cfg), [rng.standard_normal((6, 3))])

    def test_stop_weight_gradient_drops_weight_term(self, rng):
        feats = rng.standard_normal((3, 2))
        cfg_stop = LossConfig(margin=2.0, stop_weight_grad=True)
        batch_fn = lambda f: TripletBatch(f, [(0, 1, 2)])
        f = Tensor(feats, requires_grad=True)
        with T.Tape() as tape:
            loss = L.bp_triplet_loss(batch_fn(f), cfg_stop)
        tape.backward(loss)
        # with the weight held fixed the gradient is w * dv/df
        v = L.triplet_violations(batch_fn(Tensor(feats)), 2.0).item()
        w = L.modulating_weight(v, 1.0, 1.0)
        g = Tensor(feats, requires_grad=True)
        with T.Tape() as tape:
            hinge = T.sum(L.hinge_triplet_terms(batch_fn(g), 2.0))
        tape.backward(hinge)
        np.testing.assert_allclose(f.grad, w * g.grad, rtol=1e-12)


class TestClassification:
    def test_half_probability(self):
        lp = Tensor(np.log([[0.5, 0.5]]))
        assert L.classification_loss(lp, [0]).item() == pytest.approx(LN2, rel=1e-15)

    def test_entropy_extremes(self):
        src = T.log_softmax(Tensor([[1.0, 0.0, 0.0, 0.0]]))
        one_hot = T.log_softmax(Tensor([[0.0, -1e4, -1e4, -1e4]]))
        uniform = T.log_softmax(Tensor([[0.0, 0.0, 0.0, 0.0]]))
        assert L.target_entropy(one_hot).item() == 0.0
        assert L.target_entropy(uniform).item() == pytest.approx(LN4, rel=1e-15)
        base = L.classification_loss(src, [0]).item()
        with_tgt = L.classification_loss(src, [0], uniform).item()
        assert with_tgt - base == pytest.approx(LN4, rel=1e-12)

    def test_entropy_bounded(self, rng):
        lp = T.log_softmax(Tensor(rng.standard_normal((50, 5)) * 4))
        per_row = -np.sum(np.exp(lp.data) * lp.data, axis=1)
        assert np.all((per_row >= 0) & (per_row <= math.log(5) + 1e-12))

    def test_source_term_is_mean_nll(self, rng):
        lp = T.log_softmax(Tensor(rng.standard_normal((7, 3))))
        y = rng.integers(0, 3, 7)
        expected = -np.mean(lp.data[np.arange(7), y])
        assert L.classification_loss(lp, y).item() == pytest.approx(expected, rel=1e-14)
        assert L.classification_loss(lp, y, raw_sum=True).item() == pytest.approx(7 * expected, rel=1e-14)

    def test_gradient_check(self, rng):
        y = np.array([0, 2, 1])

        def fn(src, tgt):
            return L.classification_loss(T.log_softmax(src), y, T.log_softmax(tgt))

        check_grad(fn, [rng.standard_normal((3, 3)), rng.standard_normal((4, 3))])

    def test_label_checks(self):
        lp = Tensor(np.log([[0.5, 0.5]]))
        with pytest.raises(ValueError):
            L.classification_loss(lp, [2])


class TestAdversarial:
    def test_confusion(self):
        lp = Tensor(np.log(np.full((6, 2), 0.5)))
        assert L.adversarial_loss(lp, [0, 0, 0, 1, 1, 1]).item() == pytest.approx(LN2, rel=1e-15)

    def test_perfect(self):
        lp = T.log_softmax(Tensor([[0.0, -1e4], [-1e4, 0.0]]))
        assert L.adversarial_loss(lp, [0, 1]).item() == 0.0

    def test_hand_summed_batch(self):
        probs = [[0.7, 0.3], [0.2, 0.8], [0.9, 0.1], [0.4, 0.6]]
        labels = [0, 1, 1, 0]
        oracle = -sum(mpmath.log(mpmath.mpf(str(p[d]))) for p, d in zip(probs, labels)) / 4
        got = L.adversarial_loss(Tensor(np.log(probs)), labels).item()
        assert got == pytest.approx(float(oracle), rel=1e-14)

    def test_permutation_invariant(self, rng):
        lp = T.log_softmax(Tensor(rng.standard_normal((10, 2))))
        d = rng.integers(0, 2, 10)
        perm = rng.permutation(10)
        a = L.adversarial_loss(lp, d).item()
        b = L.adversarial_loss(Tensor(lp.data[perm]), d[perm]).item()
        assert a == pytest.approx(b, rel=1e-14)

    def test_gradient_check(self, rng):
        d = np.array([0, 1, 1, 0, 1])
        check_grad(lambda z: L.adversarial_loss(T.log_softmax(z), d), [rng.standard_normal((5, 2))])


class TestTotal:
    def test_lambdas_zero(self):
        cfg = LossConfig(lambda1=0.0, lambda2=0.0)
        assert L.total_loss(Tensor(0.1), Tensor(0.2), Tensor(0.3), cfg).item() == 0.3

    def test_sum(self):
        assert L.total_loss(Tensor(0.1), Tensor(0.2), Tensor(0.3), LossConfig()).item() == pytest.approx(0.6, abs=1e-15)

    def test_weights(self):
        cfg = LossConfig(lambda1=0.5, lambda2=2.0)
        assert L.total_loss(1.0, 1.0, Tensor(1.0), cfg).item() == 3.5
