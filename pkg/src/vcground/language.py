"""Expression tokenization, the bidirectional LSTM encoder and cue attention."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .params import DTYPE, ParamSet
from .scene import ValidationError

PAD = "<pad>"
UNK = "<unk>"
CUES = ("c1", "c2", "r1", "r2", "g")
T_MAX_DEFAULT = 20


@dataclass
class Vocabulary:
    tokens: list[str]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValidationError("vocabulary tokens must be unique")
        for special in (PAD, UNK):
            if special not in self.tokens:
                raise ValidationError(f"vocabulary lacks special token {special}")
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        self.tokens_set = frozenset(self.tokens)

    @classmethod
    def build(cls, words: Sequence[str]) -> "Vocabulary":
        seen = [PAD, UNK]
        for w in words:
            if w not in seen:
                seen.append(w)
        return cls(seen)

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def unk_id(self) -> int:
        return self._ids[UNK]

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._ids.get(token, self.unk_id)


@dataclass
class Expression:
    token_ids: list[int]
    true_length: int
    referent_idx: Optional[int] = None


def tokenize(
    tokens: Sequence[str],
    vocab: Vocabulary,
    t_max: int = T_MAX_DEFAULT,
    referent_idx: Optional[int] = None,
) -> Expression:
    if len(tokens) == 0:
        raise ValidationError("empty token list")
    ids = [vocab.id(t) for t in tokens[:t_max]]
    n = len(ids)
    ids += [vocab.pad_id] * (t_max - n)
    return Expression(ids, n, referent_idx)


def load_embedding_table(path, vocab: Vocabulary, d_w: int, rng: np.random.Generator) -> np.ndarray:
    """Embedding matrix for ``vocab``; rows missing from the file stay random.

    File layout: header ``V D_w`` then ``token v1 ... vD`` per line.
    """
    table = rng.uniform(-0.08, 0.08, size=(len(vocab), d_w))
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValidationError("embedding file header must be 'V D_w'")
        d = int(header[1])
        if d != d_w:
            raise ValidationError(f"embedding dim {d} != configured {d_w}")
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != d + 1:
                raise ValidationError(f"embedding line {lineno}: expected {d + 1} fields")
            tok = parts[0]
            if tok in vocab.tokens_set:
                row = np.asarray([float(x) for x in parts[1:]])
                if not np.all(np.isfinite(row)):
                    raise ValidationError(f"embedding line {lineno}: non-finite value")
                table[vocab.id(tok)] = row
    return table


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------


def batch_ids(exprs: Sequence[Expression]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack expressions into (E, T) id and 0/1 mask tensors."""
    ids = torch.tensor([e.token_ids for e in exprs], dtype=torch.long)
    t = ids.shape[1]
    lengths = torch.tensor([e.true_length for e in exprs])
    mask = (torch.arange(t)[None, :] < lengths[:, None]).to(DTYPE)
    return ids, mask


def _lstm_direction(inputs, mask, params: ParamSet, prefix: str, reverse: bool):
    # inputs (E, T, D_in); mask (E, T).  PAD steps carry the previous state, so
    # the backward pass effectively starts at each expression's last real token
    # and steps past the longest expression never change anything.
    W = params[prefix + ".W"]  # rows: input weights then recurrent weights
    b = params[prefix + ".b"]
    E, T, d_in = inputs.shape
    H = W.shape[1] // 4
    t_eff = int(mask.sum(dim=1).max())
    proj = inputs[:, :t_eff] @ W[:d_in] + b
    W_h = W[d_in:]
    h = inputs.new_zeros(E, H)
    c = inputs.new_zeros(E, H)
    outs = [None] * T
    steps = range(t_eff - 1, -1, -1) if reverse else range(t_eff)
    for t in steps:
        gates = proj[:, t] + h @ W_h
        i, f, g, o = gates.split(H, dim=1)
        c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h_new = torch.sigmoid(o) * torch.tanh(c_new)
        m = mask[:, t : t + 1]
        c = m * c_new + (1 - m) * c
        h = m * h_new + (1 - m) * h
        outs[t] = h
    tail = h if not reverse else inputs.new_zeros(E, H)
    for t in range(t_eff, T):
        outs[t] = tail
    return torch.stack(outs, dim=1)


def encode(ids: torch.Tensor, mask: torch.Tensor, params: ParamSet, layers: int) -> torch.Tensor:
    """Per-token hidden vectors (E, T, layers*2*H): every layer and direction concatenated."""
    x = params["embed"][ids]
    collected = []
    for layer in range(layers):
        fwd = _lstm_direction(x, mask, params, f"lstm{layer}.fwd", reverse=False)
        bwd = _lstm_direction(x, mask, params, f"lstm{layer}.bwd", reverse=True)
        x = torch.cat([fwd, bwd], dim=2)
        collected.append(x)
    return torch.cat(collected, dim=2)


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax along the last axis restricted to ``mask == 1``; masked entries are 0."""
    if (mask.sum(dim=-1) == 0).any():
        raise ValidationError("attention over an all-PAD expression")
    neg = torch.where(mask > 0, logits, torch.full_like(logits, -torch.inf))
    shifted = neg - neg.max(dim=-1, keepdim=True).values
    w = torch.exp(shifted) * mask
    return w / w.sum(dim=-1, keepdim=True)


def cue_attention(states, mask, embeddings, params: ParamSet, cue: str):
    """Attention weights (E, T) and pooled word embedding (E, D_w) for one cue."""
    logits = (states @ params[f"attn.{cue}.W"]).squeeze(-1) + params[f"attn.{cue}.b"]
    alpha = masked_softmax(logits, mask)
    y = torch.einsum("et,etd->ed", alpha, embeddings)
    return alpha, y


@dataclass
class CueFeatures:
    """Pooled language vectors ``y[cue]`` (E, D_w) and attention maps ``alpha[cue]`` (E, T)."""

    y: dict[str, torch.Tensor]
    alpha: dict[str, torch.Tensor]


def cue_features(
    ids: torch.Tensor,
    mask: torch.Tensor,
    params: ParamSet,
    layers: int,
    mode: str = "attention",
) -> CueFeatures:
    if mode not in ("attention", "average"):
        raise ValidationError(f"unknown cue mode {mode!r}")
    if (mask.sum(dim=-1) == 0).any():
        raise ValidationError("attention over an all-PAD expression")
    emb = params["embed"][ids]
    if mode == "average":
        alpha = mask / mask.sum(dim=-1, keepdim=True)
        y = torch.einsum("et,etd->ed", alpha, emb)
        return CueFeatures({c: y for c in CUES}, {c: alpha for c in CUES})
    states = encode(ids, mask, params, layers)
    ys, alphas = {}, {}
    for c in CUES:
        alphas[c], ys[c] = cue_attention(states, mask, emb, params, c)
    return CueFeatures(ys, alphas)


def attention_entropy(alpha: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    a = alpha.detach()
    logs = torch.where(a > 0, torch.log(a), torch.zeros_like(a))
    return -(a * logs * mask).sum(dim=-1)
