"""Score functions, deterministic context and the combined grounding score."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import torch

from . import language
from .language import CueFeatures, Expression
from .params import DTYPE, ParamSet
from .scene import ValidationError

NORM_GUARD = 1e-12
VARIANTS = ("vc", "vc-no-reg", "vc-no-alpha", "vc-no-context")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    region_dim: int
    d_w: int = 32
    hidden_size: int = 64
    layers: int = 2
    t_max: int = language.T_MAX_DEFAULT
    include_self_pair: bool = True
    variant: str = "vc"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}")

    @property
    def d_h(self) -> int:
        return self.layers * 2 * self.hidden_size

    @property
    def cue_mode(self) -> str:
        return "average" if self.variant == "vc-no-alpha" else "attention"

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable array of the model with its shape, in canonical order."""
    shapes: dict[str, tuple[int, ...]] = {"embed": (cfg.vocab_size, cfg.d_w)}
    d_in = cfg.d_w
    H = cfg.hidden_size
    for layer in range(cfg.layers):
        for direction in ("fwd", "bwd"):
            shapes[f"lstm{layer}.{direction}.W"] = (d_in + H, 4 * H)
            shapes[f"lstm{layer}.{direction}.b"] = (4 * H,)
        d_in = 2 * H
    for cue in language.CUES:
        shapes[f"attn.{cue}.W"] = (cfg.d_h, 1)
        shapes[f"attn.{cue}.b"] = (1,)
    dx, dw = cfg.region_dim, cfg.d_w
    for head in ("phi", "theta"):
        shapes[f"{head}.fc1.W"] = (dx, dw)
        shapes[f"{head}.fc1.b"] = (dw,)
        shapes[f"{head}.fc2.W"] = (2 * dx, dw)
        shapes[f"{head}.fc2.b"] = (dw,)
        shapes[f"{head}.out1.W"] = (dw, 1)
        shapes[f"{head}.out1.b"] = (1,)
        shapes[f"{head}.out2.W"] = (dw, 1)
        shapes[f"{head}.out2.b"] = (1,)
    shapes["omega.fc.W"] = (dx, dw)
    shapes["omega.fc.b"] = (dw,)
    shapes["omega.out.W"] = (dw, 1)
    shapes["omega.out.b"] = (1,)
    return shapes


def l2norm(m: torch.Tensor) -> torch.Tensor:
    """L2-normalize along the last axis; near-zero vectors pass through unchanged."""
    n = torch.linalg.vector_norm(m, dim=-1, keepdim=True)
    small = n < NORM_GUARD
    safe = torch.where(small, torch.ones_like(n), n)
    return torch.where(small, m, m / safe)


def _affine(x, params: ParamSet, name: str):
    return x @ params[name + ".W"] + params[name + ".b"]


def _check_dim(x: torch.Tensor, params: ParamSet, name: str):
    want = params[name + ".W"].shape[0]
    if x.shape[-1] != want:
        raise ValidationError(f"{name}: input dim {x.shape[-1]} != expected {want}")


def two_branch_score(x_a, x_b, y1, y2, params: ParamSet, head: str) -> torch.Tensor:
    """Single-branch score on ``x_b`` plus pair-branch score on ``[x_a, x_b]``.

    All arguments broadcast over leading axes; returns the broadcast shape
    without the feature axis.
    """
    _check_dim(x_b, params, f"{head}.fc1")
    if x_a.shape[-1] + x_b.shape[-1] != params[f"{head}.fc2.W"].shape[0]:
        raise ValidationError(f"{head}.fc2: pair input dims do not match")
    x_a, x_b = torch.broadcast_tensors(x_a, x_b)
    m1 = y1 * _affine(x_b, params, f"{head}.fc1")
    m2 = y2 * _affine(torch.cat([x_a, x_b], dim=-1), params, f"{head}.fc2")
    s1 = _affine(l2norm(m1), params, f"{head}.out1")
    s2 = _affine(l2norm(m2), params, f"{head}.out2")
    return (s1 + s2).squeeze(-1)


def pair_score_phi(x_i, x_j, y_c1, y_c2, params: ParamSet) -> torch.Tensor:
    return two_branch_score(x_i, x_j, y_c1, y_c2, params, "phi")


def referent_score(x_i, z_i, y_r1, y_r2, params: ParamSet) -> torch.Tensor:
    # the single branch looks at the candidate itself, the pair branch at [x_i, z_i]
    _check_dim(x_i, params, "theta.fc1")
    x_i, z_i = torch.broadcast_tensors(x_i, z_i)
    m1 = y_r1 * _affine(x_i, params, "theta.fc1")
    m2 = y_r2 * _affine(torch.cat([x_i, z_i], dim=-1), params, "theta.fc2")
    s1 = _affine(l2norm(m1), params, "theta.out1")
    s2 = _affine(l2norm(m2), params, "theta.out2")
    return (s1 + s2).squeeze(-1)


def omega_score(z_i, y_g, params: ParamSet) -> torch.Tensor:
    _check_dim(z_i, params, "omega.fc")
    m = y_g * _affine(z_i, params, "omega.fc")
    return _affine(l2norm(m), params, "omega.out").squeeze(-1)


def context_posterior(X, y_c1, y_c2, params: ParamSet, include_self: bool = True):
    """Context weights ``beta`` (E, N, N) and context vectors ``z`` (E, N, D_x).

    X is (N, D_x); y_c1, y_c2 are (E, D_w).  Row i of beta is the softmax over
    j of the pair score of (x_i, x_j).
    """
    N = X.shape[0]
    x_i = X[None, :, None, :]
    x_j = X[None, None, :, :]
    logits = pair_score_phi(x_i, x_j, y_c1[:, None, None, :], y_c2[:, None, None, :], params)
    if not include_self and N > 1:
        eye = torch.eye(N, dtype=torch.bool)
        logits = logits.masked_fill(eye, -torch.inf)
    beta = torch.softmax(logits, dim=-1)
    z = beta @ X
    return beta, z, logits


def context_vector(i: int, X, y_c1, y_c2, params: ParamSet, include_self: bool = True):
    """(z_i, beta_i) for one candidate and a single expression (y vectors of shape (D_w,))."""
    logits = pair_score_phi(X[i][None, :], X, y_c1[None, :], y_c2[None, :], params)
    if not include_self and X.shape[0] > 1:
        logits = logits.clone()
        logits[i] = -torch.inf
    beta = torch.softmax(logits, dim=0)
    return beta @ X, beta


@dataclass
class ScoreBundle:
    """Per-expression, per-region scores. Leading axis E indexes expressions."""

    s_theta: torch.Tensor  # (E, N)
    s_phi: torch.Tensor  # (E, N)
    s_omega: torch.Tensor  # (E, N)
    S: torch.Tensor  # (E, N)
    beta: torch.Tensor  # (E, N, N)
    z: torch.Tensor  # (E, N, D_x)

    def __getitem__(self, e: int) -> "ScoreBundle":
        return ScoreBundle(
            self.s_theta[e : e + 1],
            self.s_phi[e : e + 1],
            self.s_omega[e : e + 1],
            self.S[e : e + 1],
            self.beta[e : e + 1],
            self.z[e : e + 1],
        )


def grounding_scores(
    X: torch.Tensor,
    cue: CueFeatures,
    params: ParamSet,
    variant: str = "vc",
    include_self: bool = True,
) -> ScoreBundle:
    if variant not in VARIANTS:
        raise ValidationError(f"unknown variant {variant!r}")
    y = cue.y
    E = y["c1"].shape[0]
    beta, z, _ = context_posterior(X, y["c1"], y["c2"], params, include_self)
    if variant == "vc-no-context":
        z = torch.zeros_like(z)
    x_b = X[None].expand(E, -1, -1)
    s_theta = referent_score(x_b, z, y["r1"][:, None], y["r2"][:, None], params)
    s_phi = pair_score_phi(x_b, z, y["c1"][:, None], y["c2"][:, None], params)
    s_omega = omega_score(z, y["g"][:, None], params)
    if variant in ("vc-no-reg", "vc-no-context"):
        S = s_theta
    else:
        S = s_theta - s_phi + s_omega
    return ScoreBundle(s_theta, s_phi, s_omega, S, beta, z)


def forward(
    X,
    exprs: Sequence[Expression],
    params: ParamSet,
    cfg: ModelConfig,
) -> tuple[ScoreBundle, CueFeatures]:
    """Language features plus grounding scores for all expressions of one scene."""
    X = torch.as_tensor(X, dtype=DTYPE)
    if X.shape[-1] != cfg.region_dim:
        raise ValidationError(f"region feature dim {X.shape[-1]} != model {cfg.region_dim}")
    ids, mask = language.batch_ids(exprs)
    cue = language.cue_features(ids, mask, params, cfg.layers, cfg.cue_mode)
    return grounding_scores(X, cue, params, cfg.variant, cfg.include_self_pair), cue


def predict_index(S_row: torch.Tensor) -> int:
    """Argmax with ties going to the lowest index (torch.argmax does not promise this)."""
    s = S_row.detach()
    best = s.max()
    return int(torch.nonzero(s == best)[0, 0])
