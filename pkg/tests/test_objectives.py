import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vcground.objectives import (
    DiscreteDistribution,
    kl_divergence,
    loss_value,
    mil_maxpool_objective,
    mil_noisyor_objective,
    supervised_loss,
    unsupervised_loss,
    variational_bound,
)
from vcground.params import ParamSet
from vcground.scene import ValidationError
from vcground.train import gradcheck


def _t(v):
    return torch.tensor(v, dtype=torch.float64)


class TestSupervisedLoss:
    def test_singleton(self):
        assert float(supervised_loss(_t([17.3]), 0)) == 0.0

    def test_two_equal(self):
        assert float(supervised_loss(_t([0.4, 0.4]), 1)) == pytest.approx(math.log(2), abs=1e-15)

    def test_saturation(self):
        assert float(supervised_loss(_t([21.0, 1.0, 0.5, -3.0]), 0)) < 1e-8

    def test_out_of_range(self):
        with pytest.raises(ValidationError):
            supervised_loss(_t([1.0, 2.0]), 2)

    def test_large_scores_stable(self):
        v = float(supervised_loss(_t([1000.0, 999.0]), 1))
        assert v == pytest.approx(math.log1p(math.exp(1.0)), rel=1e-12)


class TestUnsupervisedLoss:
    def test_singleton(self):
        assert float(unsupervised_loss(_t([-4.0]))) == 0.0

    @pytest.mark.parametrize("n", [2, 3, 7])
    def test_equal_scores(self, n):
        assert float(unsupervised_loss(_t([0.3] * n))) == pytest.approx(math.log(n), abs=1e-14)

    def test_equals_supervised_at_argmax(self):
        S = _t([0.1, 2.0, -1.0, 1.5])
        assert float(unsupervised_loss(S)) == float(supervised_loss(S, 1))

    def test_tie_routes_gradient_to_lowest_index(self):
        S = _t([0.0, 2.0, 2.0]).requires_grad_(True)
        unsupervised_loss(S).backward()
        # d(-log softmax_k)/dS_k = p_k - 1 < 0 only at the selected index
        assert S.grad[1] < 0 and S.grad[2] > 0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-20, 20), min_size=1, max_size=12), st.data())
    def test_bounded_by_supervised(self, scores, data):
        gt = data.draw(st.integers(0, len(scores) - 1))
        S = _t(scores)
        assert float(unsupervised_loss(S)) <= float(supervised_loss(S, gt)) + 1e-12


class TestLossGradients:
    def test_supervised_and_unsupervised_fd(self):
        rng = np.random.default_rng(0)
        p = ParamSet({"W": rng.normal(size=(4, 6)), "b": rng.normal(size=6)})
        x = torch.as_tensor(rng.normal(size=4))

        def scores(ps):
            return torch.tanh(x @ ps["W"] + ps["b"]) * 3.0

        for fn in (lambda ps: supervised_loss(scores(ps), 2), lambda ps: unsupervised_loss(scores(ps))):
            rep = gradcheck(p, fn, max_coords=200)
            assert rep.worst < 1e-6

    def test_loss_value_packages_grads(self):
        p = ParamSet({"w": np.array([1.0, 2.0])})
        lv = loss_value(supervised_loss(p["w"] * 1.0, 0), p)
        assert lv.value == pytest.approx(math.log1p(math.exp(1.0)))
        assert set(lv.grads) == {"w"} and lv.grads["w"].shape == (2,)

    def test_linear_model_exact(self):
        # finite differences are exact for a linear function
        rng = np.random.default_rng(1)
        p = ParamSet({"w": rng.normal(size=20)})
        c = torch.as_tensor(rng.normal(size=20))
        rep = gradcheck(p, lambda ps: (ps["w"] * c).sum())
        assert rep.worst < 1e-8


class TestKL:
    def test_identity(self):
        p = DiscreteDistribution(np.array([0.2, 0.3, 0.5]))
        assert kl_divergence(p, p) == 0.0

    def test_closed_form(self):
        assert kl_divergence(
            DiscreteDistribution(np.array([1.0, 0.0])), DiscreteDistribution(np.array([0.5, 0.5]))
        ) == pytest.approx(math.log(2), abs=1e-15)

    def test_infinite_when_unsupported(self):
        q = DiscreteDistribution(np.array([0.5, 0.5]))
        p = DiscreteDistribution(np.array([1.0, 0.0]))
        assert kl_divergence(q, p) == math.inf

    def test_support_mismatch(self):
        with pytest.raises(ValidationError):
            kl_divergence(DiscreteDistribution.uniform(2), DiscreteDistribution.uniform(3))

    def test_unnormalized_rejected(self):
        with pytest.raises(ValidationError):
            DiscreteDistribution(np.array([0.5, 0.6]))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 12), st.integers(0, 2**32 - 1))
    def test_matches_summation_and_nonnegative(self, n, seed):
        rng = np.random.default_rng(seed)
        q = DiscreteDistribution(rng.dirichlet(np.ones(n)))
        p = DiscreteDistribution(rng.dirichlet(np.ones(n)))
        ref = 0.0
        for a, b in zip(q.probs, p.probs):
            if a > 0:
                ref += a * math.log(a / b)
        got = kl_divergence(q, p)
        assert got == pytest.approx(ref, rel=1e-9, abs=1e-12)
        assert got >= -1e-15
        assert abs(kl_divergence(q, q)) < 1e-15


def _brute_marginal(loglik, logprior):
    return math.log(sum(math.exp(a + b) for a, b in zip(loglik, logprior)))


class TestVariationalBound:
    def test_tight_at_posterior(self):
        rng = np.random.default_rng(2)
        logprior = np.log(rng.dirichlet(np.ones(6)))
        loglik = -rng.lognormal(size=6)
        logjoint = loglik + logprior
        post = DiscreteDistribution.from_logits(logjoint)
        q = variational_bound(post, loglik, logprior)
        assert abs(q - _brute_marginal(loglik, logprior)) < 1e-9

    def test_uniform_below_skewed_marginal(self):
        logprior = np.log(np.full(4, 0.25))
        loglik = np.array([-0.01, -5.0, -6.0, -7.0])
        q = variational_bound(DiscreteDistribution.uniform(4), loglik, logprior)
        assert q < _brute_marginal(loglik, logprior)

    def test_single_point(self):
        assert variational_bound(DiscreteDistribution(np.array([1.0])), [-2.5], [0.0]) == -2.5

    def test_support_mismatch(self):
        with pytest.raises(ValidationError):
            variational_bound(DiscreteDistribution.uniform(2), [0.0, 0.0, 0.0], np.log([0.5, 0.5]))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 10), st.integers(0, 2**32 - 1))
    def test_lower_bound_property(self, n, seed):
        rng = np.random.default_rng(seed)
        logprior = np.log(rng.dirichlet(np.ones(n)))
        loglik = -rng.lognormal(size=n) * rng.uniform(0, 5)
        q = DiscreteDistribution(rng.dirichlet(np.ones(n)))
        assert variational_bound(q, loglik, logprior) <= _brute_marginal(loglik, logprior) + 1e-9


class TestMIL:
    def test_maxpool_single(self):
        assert mil_maxpool_objective([-1.25]) == -1.25

    def test_maxpool_log_monotone(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            p = rng.uniform(1e-6, 1, size=rng.integers(1, 20))
            assert mil_maxpool_objective(np.log(p)) == pytest.approx(math.log(p.max()), rel=1e-15)

    def test_maxpool_below_marginal(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            lj = rng.normal(size=rng.integers(1, 30)) * 3
            assert mil_maxpool_objective(lj) <= math.log(sum(math.exp(v) for v in lj)) + 1e-12

    def test_noisyor_single(self):
        assert mil_noisyor_objective([0.3]) == pytest.approx(math.log(0.3), rel=1e-14)

    def test_noisyor_saturation(self):
        assert mil_noisyor_objective([0.2, 1.0, 0.5]) == 0.0

    def test_noisyor_all_zero(self):
        assert mil_noisyor_objective([0.0, 0.0]) == -math.inf

    def test_noisyor_matches_direct_product(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            p = rng.uniform(0, 0.9, size=rng.integers(1, 15))
            prod = 1.0
            for v in p:
                prod *= 1.0 - v
            assert abs(mil_noisyor_objective(p) - math.log(1 - prod)) < 1e-10

    def test_noisyor_tiny_probabilities(self):
        # 1 - prod(1 - p) underflows naively; log-space keeps precision
        p = np.full(3, 1e-18)
        assert mil_noisyor_objective(p) == pytest.approx(math.log(3e-18), rel=1e-12)
