"""Turn scenes into model-ready tensors and token ids."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from .language import Expression, Vocabulary, tokenize
from .params import DTYPE
from .scene import FeatureConfig, Scene, build_features


@dataclass
class Example:
    """One scene with its region features and every expression attached to it."""

    scene: Scene
    X: torch.Tensor
    exprs: list[Expression]
    templates: list[Optional[str]]

    @property
    def num_regions(self) -> int:
        return self.X.shape[0]


def prepare(
    scenes: Sequence[Scene],
    vocab: Vocabulary,
    feature_cfg: FeatureConfig = FeatureConfig(),
    t_max: int = 20,
    require_expressions: bool = True,
) -> list[Example]:
    out = []
    for s in scenes:
        if require_expressions and not s.expressions:
            continue
        build_features(s, feature_cfg)
        X = torch.as_tensor(s.feature_matrix(), dtype=DTYPE)
        exprs = [tokenize(e.tokens, vocab, t_max, e.referent_idx) for e in s.expressions]
        out.append(Example(s, X, exprs, [e.template for e in s.expressions]))
    return out
