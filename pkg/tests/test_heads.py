"""Few-shot head tests: prototypes, scoring, relevance initialization,
and head-level explanation passes."""

import numpy as np
import pytest

from egt.errors import ConfigError, ContractError, NumericError
from egt.heads import (
    CosineHead,
    RelationHead,
    class_prototypes,
    cosine_explain,
    cosine_scores,
    lrp_through_head,
    relation_head,
    relevance_init_nonparametric,
    relevance_init_parametric,
    scaled_softmax,
)
from egt.lrp import LrpConfig
from egt.tensornet import Conv2d, Flatten, Linear, Network, ReLU

from util_nets import max_rel_err


class TestPrototypes:
    def test_hand_means(self):
        feats = np.array([[1.0, 2.0], [3.0, 4.0], [10.0, 0.0]])
        labels = np.array([0, 0, 1])
        protos = class_prototypes(feats, labels, 2)
        np.testing.assert_allclose(protos, [[2.0, 3.0], [10.0, 0.0]])

    def test_map_shaped_features(self):
        rng = np.random.default_rng(0)
        feats = rng.normal(size=(6, 4, 2, 2))
        labels = np.array([0, 1, 2, 0, 1, 2])
        protos = class_prototypes(feats, labels, 3)
        assert protos.shape == (3, 4, 2, 2)
        np.testing.assert_allclose(protos[1], (feats[1] + feats[4]) / 2)

    def test_empty_class_rejected(self):
        feats = np.ones((2, 3))
        with pytest.raises(ContractError, match="class 2"):
            class_prototypes(feats, np.array([0, 1]), 3)


class TestCosineScores:
    def test_hand_value(self):
        got = cosine_scores(np.array([1.0, 0.0]), np.array([[1.0, 1.0]]))
        np.testing.assert_allclose(got, [1.0 / np.sqrt(2.0)])

    def test_range_and_self_similarity(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            q = rng.normal(size=8)
            p = rng.normal(size=(5, 8))
            s = cosine_scores(q, p)
            assert s.shape == (5,)
            assert np.all(np.abs(s) <= 1.0 + 1e-12)
            np.testing.assert_allclose(cosine_scores(q, q[None]), [1.0], atol=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(2)
        q = rng.normal(size=6)
        p = rng.normal(size=(3, 6))
        np.testing.assert_allclose(cosine_scores(3.7 * q, p), cosine_scores(q, 0.2 * p))

    def test_batched_matches_rows(self):
        rng = np.random.default_rng(3)
        qs = rng.normal(size=(4, 6))
        p = rng.normal(size=(3, 6))
        batched = cosine_scores(qs, p)
        for i in range(4):
            np.testing.assert_allclose(batched[i], cosine_scores(qs[i], p))

    def test_zero_norm_rejected(self):
        with pytest.raises(NumericError, match="zero-norm"):
            cosine_scores(np.zeros(4), np.ones((2, 4)))
        with pytest.raises(NumericError, match="zero-norm"):
            cosine_scores(np.ones(4), np.zeros((2, 4)))

    def test_dim_mismatch(self):
        with pytest.raises(ContractError):
            cosine_scores(np.ones(4), np.ones((2, 5)))


class TestScaledSoftmax:
    def test_hand_value(self):
        got = scaled_softmax(np.array([1.0, 0.0]), beta=1.0)
        np.testing.assert_allclose(got, [0.7310585786300049, 0.2689414213699951],
                                   rtol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        p = scaled_softmax(rng.normal(size=(7, 5)), beta=7.0)
        np.testing.assert_allclose(p.sum(axis=1), np.ones(7), rtol=1e-12)
        assert np.all(p > 0)

    def test_beta_sharpens(self):
        scores = np.array([0.9, 0.5, 0.1])
        soft = scaled_softmax(scores, beta=1.0)
        sharp = scaled_softmax(scores, beta=10.0)
        assert sharp[0] > soft[0]
        assert np.argmax(soft) == np.argmax(sharp) == 0

    def test_shift_invariance(self):
        scores = np.array([100.0, 101.0, 99.0])
        np.testing.assert_allclose(scaled_softmax(scores, 2.0),
                                   scaled_softmax(scores - 100.0, 2.0), rtol=1e-12)

    def test_large_scores_stay_finite(self):
        p = scaled_softmax(np.array([1000.0, 0.0]), beta=7.0)
        assert np.isfinite(p).all()
        np.testing.assert_allclose(p, [1.0, 0.0], atol=1e-300)

    def test_beta_validated(self):
        with pytest.raises(ContractError, match="beta"):
            scaled_softmax(np.array([1.0, 0.0]), beta=0.0)


class TestRelevanceInit:
    def test_hand_values_k5(self):
        r = relevance_init_nonparametric(np.array([0.5, 0.9, 0.2, 0.1, 0.05]))
        np.testing.assert_allclose(r[0], np.log(4.0), rtol=1e-12)
        np.testing.assert_allclose(r[1], np.log(36.0), rtol=1e-12)

    def test_chance_level_is_zero(self):
        # P = 1/K maps to relevance 0; exact for K=5 where 0.2 is clean.
        r = relevance_init_nonparametric(np.full(5, 0.2))
        assert np.all(r == 0.0)
        for k in (2, 3, 7):
            r = relevance_init_nonparametric(np.full(k, 1.0 / k))
            np.testing.assert_allclose(r, np.zeros(k), atol=1e-9)

    def test_sign_tracks_chance(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            p = scaled_softmax(rng.normal(size=6), beta=3.0)
            r = relevance_init_nonparametric(p)
            assert np.all((r > 0) == (p > 1.0 / 6.0 + 1e-15))

    def test_extreme_probs_finite(self):
        r = relevance_init_nonparametric(np.array([1.0, 0.0, 0.0, 0.0, 0.0]))
        assert np.isfinite(r).all()
        assert r[0] > 0 and r[1] < 0

    def test_monotone_in_prob(self):
        probs = np.linspace(0.01, 0.99, 25)
        rows = np.stack([probs, 1.0 - probs], axis=1)
        r = relevance_init_nonparametric(rows)[:, 0]
        assert np.all(np.diff(r) > 0)

    def test_needs_two_classes(self):
        with pytest.raises(ContractError):
            relevance_init_nonparametric(np.array([1.0]))

    def test_parametric_identity(self):
        logits = np.array([0.3, -2.0, 5.5])
        got = relevance_init_parametric(logits)
        np.testing.assert_allclose(got, logits)
        got[0] = 99.0
        assert logits[0] == 0.3


def _unit(v):
    return v / np.linalg.norm(v)


class TestCosineExplain:
    def test_hand_value(self):
        # Unit prototype [1, 0]: only the first coordinate contributes.
        rel = cosine_explain(np.array([3.0, 4.0]), np.array([1.0, 0.0]),
                             relevance=2.0, epsilon=0.0)
        np.testing.assert_allclose(rel, [2.0, 0.0])

    def test_conservation_at_zero_epsilon(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            q = rng.normal(size=10)
            p = rng.normal(size=10)
            r = float(rng.normal())
            rel = cosine_explain(q, p, r, epsilon=0.0)
            np.testing.assert_allclose(rel.sum(), r, rtol=1e-9, atol=1e-12)

    def test_epsilon_shrinks_total(self):
        q = np.abs(np.random.default_rng(7).normal(size=6)) + 0.1
        p = np.ones(6)
        totals = [cosine_explain(q, p, 1.0, epsilon=e).sum()
                  for e in (0.0, 0.01, 0.1, 1.0)]
        assert all(t1 > t2 > 0 for t1, t2 in zip(totals, totals[1:]))

    def test_zero_denominator_guard(self):
        rel = cosine_explain(np.array([1.0, -1.0]), _unit(np.array([1.0, 1.0])),
                             relevance=3.0, epsilon=0.0)
        np.testing.assert_allclose(rel, [0.0, 0.0])

    def test_prototype_scale_invariance(self):
        # Contributions use the normalized prototype, so its scale drops out.
        q = np.array([0.5, -1.5, 2.0])
        p = np.array([1.0, 2.0, -0.5])
        a = cosine_explain(q, p, 1.3, epsilon=0.01)
        b = cosine_explain(q, 10.0 * p, 1.3, epsilon=0.01)
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_both_normalized_variant(self):
        q = np.array([3.0, 4.0])
        p = np.array([0.0, 1.0])
        rel = cosine_explain(q, p, 1.0, epsilon=0.0, variant="both-normalized")
        # Contributions of qhat * phat sum to the cosine itself.
        np.testing.assert_allclose(rel, [0.0, 1.0])

    def test_unknown_variant(self):
        with pytest.raises(ConfigError, match="variant"):
            cosine_explain(np.ones(2), np.ones(2), 1.0, 0.0, variant="raw")

    def test_zero_prototype_rejected(self):
        with pytest.raises(NumericError):
            cosine_explain(np.ones(3), np.zeros(3), 1.0, 0.0)


def _relation_net(rng, in_ch, side, hidden=6, bias=True, relu=True):
    """Small pair-scoring network: optional conv stage, then dense to 1."""
    layers = [Flatten()]
    if relu:
        layers += [Linear.he_init(in_ch * side * side, hidden, rng), ReLU(),
                   Linear.he_init(hidden, 1, rng)]
    else:
        layers += [Linear.he_init(in_ch * side * side, 1, rng)]
    net = Network((in_ch, side, side), layers)
    if not bias:
        for _, layer in net.param_layers():
            layer.bias[:] = 0.0
    return net


class TestRelationHead:
    def test_logits_match_manual_forward(self):
        rng = np.random.default_rng(8)
        net = _relation_net(rng, 4, 3)
        protos = rng.normal(size=(5, 2, 3, 3))
        q = rng.normal(size=(2, 3, 3))
        logits, trace = relation_head(q, protos, net)
        assert logits.shape == (5,)
        for k in range(5):
            pair = np.concatenate([protos[k], q], axis=0)
            np.testing.assert_allclose(logits[k], net.forward(pair)[0], rtol=1e-12)
        assert trace.entries[0].input.shape == (5, 4, 3, 3)

    def test_prototype_permutation_permutes_logits(self):
        rng = np.random.default_rng(9)
        net = _relation_net(rng, 2, 2)
        protos = rng.normal(size=(4, 1, 2, 2))
        q = rng.normal(size=(1, 2, 2))
        logits, _ = relation_head(q, protos, net)
        perm = np.array([2, 0, 3, 1])
        permuted, _ = relation_head(q, protos[perm], net)
        np.testing.assert_allclose(permuted, logits[perm], rtol=1e-12)

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(10)
        net = _relation_net(rng, 2, 2)
        with pytest.raises(ContractError):
            relation_head(np.ones((1, 3, 3)), np.ones((4, 1, 2, 2)), net)


class TestHeadOutputs:
    def test_cosine_head_output(self):
        rng = np.random.default_rng(11)
        head = CosineHead(beta=7.0)
        q = rng.normal(size=12)
        protos = rng.normal(size=(5, 12))
        out = head.output(q, protos)
        np.testing.assert_allclose(out.scores, cosine_scores(q, protos))
        np.testing.assert_allclose(out.probabilities,
                                   scaled_softmax(out.scores, 7.0))
        np.testing.assert_allclose(out.relevance_init,
                                   relevance_init_nonparametric(out.probabilities))

    def test_cosine_head_validation(self):
        with pytest.raises(ConfigError):
            CosineHead(beta=-1.0)
        with pytest.raises(ConfigError):
            CosineHead(explain_variant="bogus")

    def test_relation_head_output(self):
        rng = np.random.default_rng(12)
        net = _relation_net(rng, 6, 2)
        head = RelationHead(net)
        protos = rng.normal(size=(3, 3, 2, 2))
        q = rng.normal(size=(3, 2, 2))
        out, trace = head.output(q, protos)
        logits, _ = relation_head(q, protos, net)
        np.testing.assert_allclose(out.scores, logits)
        np.testing.assert_allclose(out.probabilities, scaled_softmax(logits, 1.0))
        np.testing.assert_allclose(out.relevance_init, logits)
        assert trace.entries[-1].output.shape == (3, 1)


class TestLrpThroughHead:
    def test_cosine_route_matches_direct_call(self):
        rng = np.random.default_rng(13)
        head = CosineHead(beta=7.0)
        q = rng.normal(size=9)
        protos = rng.normal(size=(4, 9))
        out = head.output(q, protos)
        cfg = LrpConfig(epsilon=0.001)
        target = int(np.argmax(out.probabilities))
        rel = lrp_through_head(head, (q, protos), out.relevance_init, target, cfg)
        want = cosine_explain(q, protos[target], out.relevance_init[target], 0.001)
        np.testing.assert_allclose(rel, want, rtol=1e-12)
        assert rel.shape == q.shape

    def test_relation_pair_conservation_linear_net(self):
        # Bias-free affine relation net at epsilon 0: the relevance over
        # the full (prototype, query) pair sums back to the class init.
        rng = np.random.default_rng(14)
        net = _relation_net(rng, 4, 3, bias=False, relu=False)
        head = RelationHead(net)
        protos = rng.normal(size=(5, 2, 3, 3))
        q = rng.normal(size=(2, 3, 3))
        out, trace = head.output(q, protos)
        cfg = LrpConfig(epsilon=0.0, rule_map={"linear": "epsilon"})
        for target in range(5):
            rel = lrp_through_head(head, trace, out.relevance_init, target, cfg)
            assert rel.shape == (4, 3, 3)
            np.testing.assert_allclose(rel.sum(), out.relevance_init[target],
                                       rtol=1e-9, atol=1e-12)

    def test_relation_gradient_times_input(self):
        # Bias-free relu relation net with parametric (logit) init equals
        # pair * d(logit_c)/d(pair), per the gradient-times-input identity.
        rng = np.random.default_rng(15)
        net = _relation_net(rng, 2, 2, bias=False, relu=True)
        head = RelationHead(net)
        protos = rng.normal(size=(3, 1, 2, 2))
        q = rng.normal(size=(1, 2, 2))
        out, trace = head.output(q, protos)
        cfg = LrpConfig(epsilon=0.0)
        for target in range(3):
            rel = lrp_through_head(head, trace, out.relevance_init, target, cfg)
            cot = np.zeros((3, 1))
            cot[target, 0] = 1.0
            grad, _ = net.backward_grad(trace, cot)
            pair = np.concatenate([protos[target], q], axis=0)
            np.testing.assert_allclose(rel, pair * grad[target], rtol=1e-9, atol=1e-12)

    def test_shared_query_half_differs_by_class(self):
        rng = np.random.default_rng(16)
        net = _relation_net(rng, 2, 2)
        head = RelationHead(net)
        protos = rng.normal(size=(4, 1, 2, 2))
        q = rng.normal(size=(1, 2, 2))
        out, trace = head.output(q, protos)
        cfg = LrpConfig(epsilon=0.01)
        rels = [lrp_through_head(head, trace, out.relevance_init, t, cfg)
                for t in range(4)]
        halves = [r[1:] for r in rels]
        assert max_rel_err(halves[0], halves[1]) > 1e-6

    def test_target_out_of_range(self):
        head = CosineHead()
        with pytest.raises(ContractError, match="target class"):
            lrp_through_head(head, (np.ones(3), np.ones((2, 3))),
                             np.zeros(2), 5, LrpConfig())
