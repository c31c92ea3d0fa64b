import csv
import io
import math

import numpy as np
import pytest

from vcground.objectives import DiscreteDistribution
from vcground.oracle import (
    CSV_HEADER,
    ToyJointModel,
    approximation_comparison,
    bound_gap,
    certify_bound,
    context_space,
    enumerate_marginal,
    exact_posterior,
    random_model,
    rows_to_csv,
)
from vcground.scene import ValidationError


def _single(vals):
    vals = np.asarray(vals, dtype=float)
    logprior = np.log(np.full(len(vals), 1.0 / len(vals)))
    return ToyJointModel(len(vals), "single", [(k,) for k in range(len(vals))], vals, logprior)


class TestContextSpace:
    def test_sizes(self):
        assert len(context_space(5, "single")) == 5
        assert len(context_space(5, "subset")) == 31
        assert len(set(context_space(8, "subset"))) == 255

    def test_cap(self):
        with pytest.raises(ValidationError):
            context_space(11, "subset")


class TestMarginal:
    def test_single_entry(self):
        m = ToyJointModel(1, "single", [(0,)], np.array([-3.2]), np.array([0.0]))
        assert enumerate_marginal(m) == -3.2

    def test_two_equal(self):
        m = _single([-1.5, -1.5])
        assert enumerate_marginal(m) == pytest.approx(-1.5 + math.log(2), abs=1e-15)

    def test_subset_reproducible_and_order_free(self):
        a = random_model(8, "subset", 1.5, np.random.default_rng(42))
        b = random_model(8, "subset", 1.5, np.random.default_rng(42))
        assert np.array_equal(a.logjoint, b.logjoint)
        fwd = enumerate_marginal(a)
        assert math.isfinite(fwd)
        rev = enumerate_marginal(a, order=list(reversed(range(a.size))))
        perm = enumerate_marginal(a, order=list(np.random.default_rng(0).permutation(a.size)))
        assert fwd == pytest.approx(rev, abs=1e-12) and fwd == pytest.approx(perm, abs=1e-12)

    def test_prior_is_normalized(self):
        m = random_model(6, "subset", 1.0, np.random.default_rng(1))
        assert abs(np.exp(m.logprior).sum() - 1) < 1e-12
        assert np.all(m.loglik <= 0)


class TestBoundGap:
    def test_posterior_tight(self):
        m = random_model(6, "single", 3.0, np.random.default_rng(3))
        assert abs(bound_gap(m, exact_posterior(m))) <= 1e-9

    def test_uniform_positive_when_skewed(self):
        m = random_model(6, "single", 4.0, np.random.default_rng(4))
        assert bound_gap(m, DiscreteDistribution.uniform(m.size)) > 0

    def test_posterior_minimizes_gap(self):
        rng = np.random.default_rng(5)
        m = random_model(5, "subset", 2.0, rng)
        best = bound_gap(m, exact_posterior(m))
        for _ in range(100):
            q = DiscreteDistribution(rng.dirichlet(np.ones(m.size)))
            assert bound_gap(m, q) >= best - 1e-12

    @pytest.mark.parametrize("mode", ["single", "subset"])
    def test_nonnegative_randomized(self, mode):
        rng = np.random.default_rng(6)
        for _ in range(1000):
            n = int(rng.integers(1, 7))
            m = random_model(n, mode, float(rng.uniform(0, 6)), rng)
            q = DiscreteDistribution(rng.dirichlet(np.ones(m.size)))
            assert bound_gap(m, q) >= -1e-9


class TestComparison:
    def test_degenerate_space_all_coincide(self):
        rows = approximation_comparison(skews=(0.0, 2.0), sizes=(1,), modes=("single", "subset"))
        for r in rows:
            vals = [r["marginal"], r["bound_posterior"], r["bound_uniform"], r["maxpool"], r["noisyor"]]
            assert max(vals) - min(vals) < 1e-12

    def test_maxpool_below_marginal(self):
        for r in approximation_comparison():
            assert r["maxpool"] <= r["marginal"] + 1e-12

    def test_row_count_and_csv_header(self):
        skews, sizes = (0.0, 1.0, 3.0), (2, 4, 6, 8)
        rows = approximation_comparison(skews=skews, sizes=sizes, modes=("single",))
        assert len(rows) == len(skews) * len(sizes)
        text = rows_to_csv(rows)
        assert text.splitlines()[0] == "mode,N,skew,marginal,bound_posterior,bound_uniform,maxpool,noisyor"
        parsed = list(csv.DictReader(io.StringIO(text)))
        assert len(parsed) == len(rows) and list(parsed[0]) == CSV_HEADER

    def test_certification_summary(self):
        res = certify_bound(n_models=60, seed=1)
        assert res.min_gap >= -1e-9
        assert res.max_posterior_gap <= 1e-9
        assert res.maxpool_le_marginal_rate == 1.0
