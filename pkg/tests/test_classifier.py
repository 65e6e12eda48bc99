import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from copl.classifier import (
    ClassifierConfig, LossFloorWarning, Posterior, PromptLearner, assemble_prompt,
    cross_entropy, cross_entropy_backward, full_backward, predict,
)
from copl.conditioners import Parameters
from copl.encoders import FrozenEncoders
from copl.gradcheck import check_learner, random_learner
from copl.numerics import NumericsError, Rng, grad_check, sample_gaussian


def test_assemble_prompt():
    t = assemble_prompt([[1.0, 2.0]], [3.0, 4.0])
    np.testing.assert_array_equal(t, [[1, 2], [3, 4]])
    cond = sample_gaussian(Rng(0), (4, 3))
    a = assemble_prompt(cond, np.zeros(3))
    b = assemble_prompt(cond, np.ones(3))
    assert a.shape == (5, 3)
    np.testing.assert_array_equal(a[:4], b[:4])
    assert not np.array_equal(a[4], b[4])
    with pytest.raises(NumericsError):
        assemble_prompt(cond, np.ones(2))


class TestPredict:
    def test_identical_text_features(self):
        post = predict([1.0, 2.0], [[0.5, 0.1], [0.5, 0.1]], ClassifierConfig(0.3, (0, 1)))
        np.testing.assert_allclose(post.probs, [0.5, 0.5], atol=1e-15)

    def test_temperature_one(self):
        post = predict([1.0, 0.0], [[2.0, 0.0], [0.0, 3.0]], ClassifierConfig(1.0, (0, 1)))
        np.testing.assert_allclose(post.probs, [0.73105858, 0.26894142], atol=1e-8)
        assert post.probs[0] == pytest.approx(math.e / (math.e + 1), abs=1e-15)

    def test_lower_temperature_sharpens(self):
        post = predict([1.0, 0.0], [[2.0, 0.0], [0.0, 3.0]], ClassifierConfig(0.5, (0, 1)))
        np.testing.assert_allclose(post.probs, [0.88079708, 0.11920292], atol=1e-8)

    def test_degenerate_feature(self):
        with pytest.raises(NumericsError, match="degenerate feature"):
            predict([0.0, 0.0], [[1.0, 0.0]], ClassifierConfig(1.0, (0,)))
        with pytest.raises(NumericsError, match="degenerate feature"):
            predict([1.0, 0.0], [[1.0, 0.0], [0.0, 0.0]], ClassifierConfig(1.0, (0, 1)))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ClassifierConfig(0.0, (0,))
        with pytest.raises(ValueError):
            ClassifierConfig(1.0, (0, 0))
        with pytest.raises(ValueError):
            ClassifierConfig(1.0, ())

    @given(st.integers(0, 10_000), st.floats(1e-3, 10), st.floats(1e-3, 10))
    def test_argmax_and_scale_invariance(self, seed, g1, g2):
        rng = Rng(seed)
        x = sample_gaussian(rng, 5)
        text = sample_gaussian(rng, (4, 5))
        a = predict(x, text, ClassifierConfig(g1, (0, 1, 2, 3)))
        b = predict(x, text, ClassifierConfig(g2, (0, 1, 2, 3)))
        assert a.argmax == b.argmax
        assert abs(a.probs.sum() - 1) <= 1e-12
        np.testing.assert_allclose(predict(2 * x, text, ClassifierConfig(g1, (0, 1, 2, 3))).probs,
                                   a.probs, atol=1e-12)

    def test_ties_break_to_lowest_index(self):
        post = predict([1.0, 0.0], [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
                       ClassifierConfig(1.0, (5, 6, 7)))
        assert post.argmax == 0


class TestCrossEntropy:
    def test_values(self):
        post = Posterior(np.array([0.5, 0.5]), np.zeros(2))
        assert cross_entropy(post, 0) == pytest.approx(0.69314718, abs=1e-8)
        assert cross_entropy(Posterior(np.array([1.0, 0.0]), np.zeros(2)), 0) == 0.0

    def test_backward(self):
        post = Posterior(np.array([0.7311, 0.2689]), np.zeros(2))
        np.testing.assert_allclose(cross_entropy_backward(post, 0), [-0.2689, 0.2689], atol=1e-4)

    def test_backward_against_finite_differences(self):
        logits = np.array([0.3, -1.2, 2.0])

        def f():
            return cross_entropy(predict_from_logits(logits), 1)
        analytic = cross_entropy_backward(predict_from_logits(logits), 1)
        assert grad_check(f, [logits], [analytic]).passed

    def test_floor(self):
        post = Posterior(np.array([1.0, 0.0]), np.zeros(2))
        with pytest.warns(LossFloorWarning):
            loss = cross_entropy(post, 1)
        assert loss == pytest.approx(-math.log(1e-300))

    def test_label_range(self):
        with pytest.raises(IndexError):
            cross_entropy(Posterior(np.array([1.0]), np.zeros(1)), 1)


def predict_from_logits(logits):
    from copl.numerics import softmax
    return Posterior(softmax(logits), logits)


class TestLearner:
    @pytest.mark.parametrize("method", ["coop", "cocoop", "copl", "copl_global"])
    @pytest.mark.parametrize("seed", range(5))
    def test_end_to_end_gradients(self, method, seed):
        rep = check_learner(*random_learner(seed, method))
        assert rep.passed, rep.worst

    def test_prompt_only_two_classes(self):
        learner, patches, label, _ = random_learner(3, "coop", max_k=2, max_m=2, max_p=3, max_d=4)
        rep = check_learner(learner, patches, label, [0, 1])
        assert rep.names == ["V"] and rep.passed

    def test_confident_prediction_has_vanishing_gradient(self):
        learner, patches, _, ids = random_learner(1)
        learner.gamma = 1e-3
        fp = learner.forward(patches, ids)
        y = ids[fp.posterior.argmax]
        assert fp.posterior.probs.max() >= 1 - 1e-12
        grads = full_backward(learner, y)
        assert max(np.abs(g).max() for g in grads.values()) < 1e-10

    def test_backward_needs_forward(self):
        learner, *_ = random_learner(0)
        with pytest.raises(RuntimeError, match="forward not run"):
            learner.backward(0)

    def test_temperature_keeps_argmax(self):
        learner, patches, _, ids = random_learner(4)
        a = learner.forward(patches, ids).posterior.argmax
        learner.gamma *= 2
        assert learner.forward(patches, ids).posterior.argmax == a

    def test_coop_ignores_image(self):
        learner, patches, _, ids = random_learner(2, "coop")
        a = learner.condition(patches).conditioned
        b = learner.condition(patches[::-1] * 3.0).conditioned
        np.testing.assert_array_equal(a, b)

    def test_copl_global_single_patch_matches_copl(self):
        learner, patches, label, ids = random_learner(5)
        one = patches[:1]
        a = learner.forward(one, ids).posterior.probs
        learner.method = "copl_global"
        b = learner.forward(one, ids).posterior.probs
        np.testing.assert_array_equal(a, b)

    def test_predictions_stay_in_label_space(self):
        learner, patches, _, _ = random_learner(6)
        assert learner.predict_label(patches, [1, 0]) in (0, 1)
        assert learner.predict_label(patches, [1]) == 1

    def test_unknown_method(self):
        learner, *_ = random_learner(0)
        with pytest.raises(ValueError):
            PromptLearner("maple", learner.params, learner.encoders)
