import math

import numpy as np
import pytest

from copl import conditioners as cond
from copl.conditioners import AlignmentParams, MetaNet, PromptSet
from copl.gradcheck import check_copl_conditioner, check_meta_transform
from copl.numerics import NumericsError, Rng, grad_check, sample_gaussian


def random_setup(rng, P=4, M=3, d=4, d_img=5, h=4, prompt_std=0.5):
    V = PromptSet(sample_gaussian(rng, (M, d), 0.0, prompt_std))
    net = MetaNet(sample_gaussian(rng, (h, d_img), std=0.5), sample_gaussian(rng, h),
                  sample_gaussian(rng, (d, h), std=0.5), sample_gaussian(rng, d))
    # unit-variance scores keep tanh out of saturation
    al = AlignmentParams(sample_gaussian(rng, 2 * d, std=1.0 / math.sqrt(2 * d)))
    patches = sample_gaussian(rng, (P, d_img))
    return patches, V, net, al


class TestMetaTransform:
    def test_zero_net(self):
        net = MetaNet.zeros(3, 2, 4, c2=[0.5, -1.0])
        out, _ = cond.meta_transform(net, np.ones((5, 3)))
        np.testing.assert_array_equal(out, np.tile([0.5, -1.0], (5, 1)))

    def test_relu_dead_zone(self):
        net = MetaNet(-np.ones((4, 3)), np.zeros(4), np.ones((2, 4)), np.array([0.25, 0.75]))
        out, _ = cond.meta_transform(net, np.abs(sample_gaussian(Rng(0), (5, 3))) + 0.1)
        np.testing.assert_array_equal(out, np.tile([0.25, 0.75], (5, 1)))

    def test_dimension_mismatch(self):
        with pytest.raises(NumericsError):
            cond.meta_transform(MetaNet.zeros(3, 2, 4), np.ones((2, 4)))

    @pytest.mark.parametrize("seed", range(5))
    def test_backward(self, seed):
        assert check_meta_transform(seed, tol=1e-6).passed

    def test_default_hidden_width(self):
        assert cond.default_meta_hidden(16) == 4
        assert cond.default_meta_hidden(512) == 32


class TestScoreAlignContext:
    def test_score_zero_weights(self):
        assert cond.score([1, 2], [3, 4], AlignmentParams(np.zeros(4))) == 0.0

    def test_score_example(self):
        s = cond.score([1, 0], [0, 1], AlignmentParams(np.ones(4)))
        assert s == pytest.approx(0.96402758, abs=1e-8)
        assert s == pytest.approx(math.tanh(2.0), abs=1e-15)

    def test_score_odd_in_weights(self):
        w = sample_gaussian(Rng(0), 6)
        s, v = sample_gaussian(Rng(1), 3), sample_gaussian(Rng(2), 3)
        assert cond.score(s, v, AlignmentParams(-w)) == pytest.approx(
            -cond.score(s, v, AlignmentParams(w)), abs=1e-15)

    def test_score_length_mismatch(self):
        with pytest.raises(NumericsError):
            cond.score([1, 0], [1, 0, 0], AlignmentParams(np.ones(4)))

    def test_align_uniform_and_single(self):
        V = PromptSet(sample_gaussian(Rng(0), (3, 2)))
        np.testing.assert_allclose(cond.align([1, 2], V, AlignmentParams(np.zeros(4))),
                                   [1 / 3] * 3, atol=1e-15)
        np.testing.assert_array_equal(
            cond.align([1, 2], PromptSet([[0.3, 0.1]]), AlignmentParams(np.ones(4))), [1.0])

    def test_align_two_prompts(self):
        # d = 1, W_a = [0, 1] so score(s, v) = tanh(v)
        a = math.atanh(0.5)
        V = PromptSet([[a], [-a]])
        probs = cond.align([7.0], V, AlignmentParams(np.array([0.0, 1.0])))
        np.testing.assert_allclose(probs, [0.73105858, 0.26894142], atol=1e-8)

    def test_context_examples(self):
        V = PromptSet([[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_allclose(cond.context([0.25, 0.75], V), [0.25, 0.75])
        np.testing.assert_array_equal(cond.context([0.0, 1.0], V), [0.0, 1.0])
        np.testing.assert_allclose(cond.context([0.5, 0.5], PromptSet([[2, 0], [0, 4]])), [1, 2])
        with pytest.raises(NumericsError):
            cond.context([1.0], V)


class TestCopl:
    def test_single_prompt(self):
        net = MetaNet.zeros(3, 2, 4)
        out = cond.condition_copl(np.ones((2, 3)), PromptSet([[1.0, 2.0]]), net,
                                  AlignmentParams(np.ones(4)))
        np.testing.assert_allclose(out.conditioned, [[3.0, 6.0]], atol=1e-15)

    def test_uniform_attention_closed_form(self):
        V = PromptSet([[1.0, 0.0], [0.0, 1.0]])
        out = cond.condition_copl(sample_gaussian(Rng(0), (3, 5)), V,
                                  MetaNet.zeros(5, 2, 4), AlignmentParams(np.zeros(4)))
        np.testing.assert_allclose(out.conditioned, [[2.5, 1.5], [1.5, 2.5]], atol=1e-12)

    def test_patch_permutation(self):
        patches, V, net, al = random_setup(Rng(3), P=6)
        a = cond.condition_copl(patches, V, net, al)
        b = cond.condition_copl(patches[[3, 1, 5, 0, 2, 4]], V, net, al)
        np.testing.assert_allclose(b.conditioned, a.conditioned, atol=1e-12)
        np.testing.assert_allclose(b.attention, a.attention[[3, 1, 5, 0, 2, 4]], atol=1e-15)

    def test_convex_hull_and_equal_offset(self):
        rng = Rng(11)
        for _ in range(100):
            patches, V, net, al = random_setup(rng)
            out = cond.condition_copl(patches, V, net, al)
            lo, hi = V.V.min(axis=0), V.V.max(axis=0)
            assert np.all(out.context - lo >= -1e-12)
            assert np.all(hi - out.context >= -1e-12)
            off = out.conditioned - V.V
            np.testing.assert_allclose(off, np.tile(off[0], (V.M, 1)), atol=1e-12)

    def test_mean_aggregation(self):
        patches, V, net, al = random_setup(Rng(5), P=5)
        s = cond.condition_copl(patches, V, net, al, "sum")
        m = cond.condition_copl(patches, V, net, al, "mean")
        np.testing.assert_allclose(m.conditioned - V.V, (s.conditioned - V.V) / 5, atol=1e-14)
        with pytest.raises(NumericsError):
            cond.condition_copl(patches, V, net, al, "max")

    def test_dimension_mismatch(self):
        patches, V, net, al = random_setup(Rng(5))
        with pytest.raises(NumericsError):
            cond.condition_copl(patches[:, :3], V, net, al)
        with pytest.raises(NumericsError):
            cond.condition_copl(patches, V, net, AlignmentParams(np.ones(3)))

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("aggregation", ["sum", "mean"])
    def test_backward(self, seed, aggregation):
        rep = check_copl_conditioner(seed, aggregation)
        assert rep.passed, rep.worst

    def test_backward_random_shapes(self):
        rng = Rng(99)
        for _ in range(20):
            P, M, d = (1 + int(x) for x in rng.integers(6, 3))
            M, d = min(M, 4), min(d + 1, 8)
            patches, V, net, al = random_setup(rng, P=P, M=M, d=d)
            u = sample_gaussian(rng, (M, d))
            g = cond.copl_backward(cond.condition_copl(patches, V, net, al), V, net, al, u)

            def f():
                return float((u * cond.condition_copl(patches, V, net, al).conditioned).sum())
            names = ["V", "W_a", "U1", "c1", "U2", "c2"]
            groups = [V.V, al.W_a, net.U1, net.c1, net.U2, net.c2]
            rep = grad_check(f, groups, [g[n] for n in names], names=names)
            assert rep.passed, rep.worst


class TestCocoopCoop:
    def test_cocoop_offset(self):
        net = MetaNet.zeros(3, 2, 4, c2=[0.5, 0.5])
        out = cond.condition_cocoop(np.ones(3), PromptSet([[1.0, 0.0]]), net)
        np.testing.assert_array_equal(out.conditioned, [[1.5, 0.5]])

    def test_zero_net_reduces_to_coop(self):
        V = PromptSet(sample_gaussian(Rng(0), (4, 3)))
        out = cond.condition_cocoop(np.ones(5), V, MetaNet.zeros(5, 3, 4))
        np.testing.assert_array_equal(out.conditioned, V.V)

    def test_cocoop_backward(self):
        rng = Rng(8)
        _, V, net, _ = random_setup(rng)
        x = sample_gaussian(rng, net.d_in)
        u = sample_gaussian(rng, V.V.shape)
        g = cond.cocoop_backward(cond.condition_cocoop(x, V, net), V, net, u)

        def f():
            return float((u * cond.condition_cocoop(x, V, net).conditioned).sum())
        names = ["V", "U1", "c1", "U2", "c2", "inputs"]
        rep = grad_check(f, [V.V, net.U1, net.c1, net.U2, net.c2, x],
                         [g[n] for n in names], names=names)
        assert rep.passed, rep.worst

    def test_coop_identity(self):
        V = PromptSet(sample_gaussian(Rng(0), (4, 3)))
        np.testing.assert_array_equal(cond.condition_coop(V).conditioned, V.V)
        u = sample_gaussian(Rng(1), (4, 3))
        np.testing.assert_array_equal(cond.coop_backward(u)["V"], u)


def test_attention_simplex_many_draws():
    rng = Rng(2024)
    for _ in range(1000):
        patches, V, net, al = random_setup(rng, P=5, M=4, d=4)
        A = cond.condition_copl(patches, V, net, al).attention
        assert np.all(np.abs(A.sum(axis=1) - 1.0) <= 1e-12)
        assert A.min() >= 0.0


def test_parameters_init_defaults():
    p = cond.Parameters.init(Rng(0))
    assert p.dims() == (4, 16, 16, 4)
    assert abs(p.prompts.V.std() - 0.02) < 0.01
    q = p.copy()
    q.prompts.V[0, 0] += 1.0
    assert p.prompts.V[0, 0] != q.prompts.V[0, 0]
