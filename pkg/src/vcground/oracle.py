"""Brute-force enumeration over small context spaces.

Toy joint models are built from seeded log-normal scores so that every check
here is independent of the neural model and of training.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .objectives import (
    DiscreteDistribution,
    logsumexp,
    mil_maxpool_objective,
    mil_noisyor_objective,
    variational_bound,
)
from .scene import ValidationError

MAX_SUBSET_N = 10
CSV_HEADER = ["mode", "N", "skew", "marginal", "bound_posterior", "bound_uniform", "maxpool", "noisyor"]


@dataclass
class ToyJointModel:
    """Explicit tables over a context space for one fixed candidate x.

    ``contexts`` lists each context configuration as a tuple of region indices.
    """

    n_regions: int
    mode: str
    contexts: list[tuple[int, ...]]
    logjoint: np.ndarray  # log p(x, z)
    logprior: np.ndarray  # log p(z), normalized

    def __post_init__(self):
        if self.mode not in ("single", "subset"):
            raise ValidationError(f"unknown context mode {self.mode!r}")
        if self.mode == "subset" and self.n_regions > MAX_SUBSET_N:
            raise ValidationError(f"subset mode supports N <= {MAX_SUBSET_N}")
        k = len(self.contexts)
        if self.logjoint.shape != (k,) or self.logprior.shape != (k,):
            raise ValidationError("tables must have one entry per context")
        if not (np.all(np.isfinite(self.logjoint)) and np.all(np.isfinite(self.logprior))):
            raise ValidationError("tables must be finite")

    @property
    def loglik(self) -> np.ndarray:
        return self.logjoint - self.logprior

    @property
    def size(self) -> int:
        return len(self.contexts)


def context_space(n: int, mode: str) -> list[tuple[int, ...]]:
    if mode == "single":
        return [(k,) for k in range(n)]
    if mode == "subset":
        if n > MAX_SUBSET_N:
            raise ValidationError(f"subset mode supports N <= {MAX_SUBSET_N}")
        return [c for r in range(1, n + 1) for c in itertools.combinations(range(n), r)]
    raise ValidationError(f"unknown context mode {mode!r}")


def random_model(n: int, mode: str, skew: float, rng: np.random.Generator) -> ToyJointModel:
    """Seeded toy model; larger ``skew`` spreads the likelihoods and sharpens the posterior.

    Per-region log-normal scores are summed over a context's members, so
    likelihoods p(x|z) = exp(-skew * score) stay in (0, 1].
    """
    contexts = context_space(n, mode)
    region_cost = rng.lognormal(mean=0.0, sigma=1.0, size=n)
    region_prior = rng.normal(size=n)
    cost = np.array([region_cost[list(c)].sum() / len(c) for c in contexts])
    prior_logits = np.array([region_prior[list(c)].sum() for c in contexts])
    logprior = prior_logits - logsumexp(prior_logits)
    loglik = -skew * cost
    return ToyJointModel(n, mode, contexts, logprior + loglik, logprior)


def enumerate_marginal(model: ToyJointModel, order: Optional[Sequence[int]] = None) -> float:
    """log sum_z p(x, z) by visiting every context, optionally in a given order."""
    idx = range(model.size) if order is None else order
    vals = np.array([model.logjoint[k] for k in idx])
    return logsumexp(vals)


def exact_posterior(model: ToyJointModel) -> DiscreteDistribution:
    return DiscreteDistribution.from_logits(model.logjoint)


def bound_at(model: ToyJointModel, q: DiscreteDistribution) -> float:
    return variational_bound(q, model.loglik, model.logprior)


def bound_gap(model: ToyJointModel, q: DiscreteDistribution) -> float:
    return enumerate_marginal(model) - bound_at(model, q)


def comparison_row(model: ToyJointModel, skew: float) -> dict:
    return {
        "mode": model.mode,
        "N": model.n_regions,
        "skew": skew,
        "marginal": enumerate_marginal(model),
        "bound_posterior": bound_at(model, exact_posterior(model)),
        "bound_uniform": bound_at(model, DiscreteDistribution.uniform(model.size)),
        "maxpool": mil_maxpool_objective(model.logjoint),
        "noisyor": mil_noisyor_objective(np.exp(model.logjoint)),
    }


def approximation_comparison(
    skews: Iterable[float] = (0.0, 0.5, 1.0, 2.0, 4.0),
    sizes: Iterable[int] = (1, 2, 4, 6, 8),
    modes: Iterable[str] = ("single", "subset"),
    seed: int = 0,
) -> list[dict]:
    """One row per (mode, size, skew) setting."""
    rows = []
    for mode in modes:
        for n in sizes:
            for skew in skews:
                rng = np.random.default_rng([seed, n, int(round(skew * 1000)), mode == "subset"])
                rows.append(comparison_row(random_model(n, mode, skew, rng), skew))
    return rows


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_HEADER, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


@dataclass
class CertificationResult:
    n_models: int
    min_gap: float
    max_posterior_gap: float
    maxpool_le_marginal_rate: float
    bound_ge_maxpool_rate_skewed: float
    n_skewed: int


def certify_bound(
    n_models: int = 1000,
    max_n: int = 8,
    n_random_q: int = 5,
    seed: int = 0,
    skewed_threshold: float = 0.5,
) -> CertificationResult:
    """Sweep randomized toy models in both modes and collect gap statistics.

    A model counts as skewed when its exact posterior puts more than
    ``skewed_threshold`` mass on a single context.
    """
    rng = np.random.default_rng(seed)
    min_gap = np.inf
    max_post_gap = -np.inf
    maxpool_ok = 0
    skewed = 0
    skewed_ok = 0
    for m in range(n_models):
        mode = "single" if m % 2 == 0 else "subset"
        n = int(rng.integers(1, max_n + 1))
        skew = float(rng.uniform(0.0, 6.0))
        model = random_model(n, mode, skew, rng)
        marginal = enumerate_marginal(model)
        post = exact_posterior(model)
        max_post_gap = max(max_post_gap, bound_gap(model, post))
        qs = [DiscreteDistribution.uniform(model.size)]
        qs += [DiscreteDistribution(rng.dirichlet(np.ones(model.size))) for _ in range(n_random_q)]
        for q in qs:
            min_gap = min(min_gap, bound_gap(model, q))
        maxpool = mil_maxpool_objective(model.logjoint)
        maxpool_ok += maxpool <= marginal
        if post.probs.max() > skewed_threshold:
            skewed += 1
            skewed_ok += bound_at(model, post) >= maxpool - 1e-12
    return CertificationResult(
        n_models=n_models,
        min_gap=float(min_gap),
        max_posterior_gap=float(max_post_gap),
        maxpool_le_marginal_rate=maxpool_ok / n_models,
        bound_ge_maxpool_rate_skewed=(skewed_ok / skewed) if skewed else float("nan"),
        n_skewed=skewed,
    )
