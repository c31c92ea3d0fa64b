"""Grounding losses, the variational bound and the MIL baseline objectives."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .params import ParamSet
from .scene import ValidationError

NORMALIZATION_TOL = 1e-9


# ---------------------------------------------------------------------------
# Training losses over the combined score S (torch, differentiable)
# ---------------------------------------------------------------------------


def supervised_loss(S: torch.Tensor, gt_idx: int) -> torch.Tensor:
    """Negative log softmax of the ground-truth region's score.

    ``S`` is a length-N score vector.
    """
    N = S.shape[-1]
    if not 0 <= gt_idx < N:
        raise ValidationError(f"gt_idx {gt_idx} out of range for {N} regions")
    return -torch.log_softmax(S, dim=-1)[..., gt_idx]


def unsupervised_loss(S: torch.Tensor) -> torch.Tensor:
    """Max-pooled MIL loss: the smallest per-region NLL, routed to the lowest argmax."""
    logp = torch.log_softmax(S, dim=-1)
    vals = logp.detach()
    best = int(torch.nonzero(vals == vals.max())[0, 0])
    return -logp[..., best]


@dataclass
class LossValue:
    value: float
    grads: dict[str, np.ndarray]


def loss_value(loss: torch.Tensor, params: ParamSet) -> LossValue:
    """Backpropagate ``loss`` into fresh accumulators and package value + gradients."""
    params.zero_grad()
    loss.backward()
    value = float(loss.detach())
    if not math.isfinite(value):
        raise FloatingPointError("loss is not finite")
    return LossValue(value, params.grads())


# ---------------------------------------------------------------------------
# Discrete distributions and the bound (numpy, used by the oracle)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiscreteDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValidationError("distribution needs a non-empty 1-d support")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValidationError("distribution weights must be finite and nonnegative")
        if abs(p.sum() - 1.0) > NORMALIZATION_TOL:
            raise ValidationError(f"distribution sums to {p.sum()!r}, not 1")
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_logits(cls, logits) -> "DiscreteDistribution":
        a = np.asarray(logits, dtype=np.float64)
        w = np.exp(a - a.max())
        w /= w.sum()
        return cls(w)

    @classmethod
    def uniform(cls, n: int) -> "DiscreteDistribution":
        return cls(np.full(n, 1.0 / n))

    def __len__(self) -> int:
        return self.probs.size


def logsumexp(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    m = a.max()
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.exp(a - m).sum()))


def kl_divergence(q: DiscreteDistribution, p: DiscreteDistribution) -> float:
    """KL(q || p) with 0 log 0 = 0; ``inf`` when q puts mass where p has none."""
    if len(q) != len(p):
        raise ValidationError(f"support sizes differ: {len(q)} vs {len(p)}")
    qv, pv = q.probs, p.probs
    on = qv > 0
    if np.any(pv[on] == 0):
        return math.inf
    return float(np.sum(qv[on] * (np.log(qv[on]) - np.log(pv[on]))))


def variational_bound(q: DiscreteDistribution, loglik, logprior) -> float:
    """Expected log-likelihood under q minus KL(q || prior).

    ``logprior`` must be a normalized log distribution over the same support.
    """
    loglik = np.asarray(loglik, dtype=np.float64)
    logprior = np.asarray(logprior, dtype=np.float64)
    if not (loglik.shape == logprior.shape == q.probs.shape):
        raise ValidationError("q, loglik and logprior must share one support")
    prior = DiscreteDistribution(np.exp(logprior))
    on = q.probs > 0
    expected = float(np.sum(q.probs[on] * loglik[on]))
    return expected - kl_divergence(q, prior)


def mil_maxpool_objective(logjoint) -> float:
    return float(np.max(np.asarray(logjoint, dtype=np.float64)))


def mil_noisyor_objective(probjoint) -> float:
    """log(1 - prod(1 - p)) evaluated through log1p sums."""
    p = np.asarray(probjoint, dtype=np.float64)
    if np.any(p < 0) or np.any(p > 1):
        raise ValidationError("noisy-or inputs must lie in [0, 1]")
    if np.any(p == 1.0):
        return 0.0
    log_none = float(np.sum(np.log1p(-p)))
    if log_none == 0.0:
        return -math.inf
    # log(1 - exp(a)) for a <= 0
    if log_none > -math.log(2):
        return math.log(-math.expm1(log_none))
    return math.log1p(-math.exp(log_none))
