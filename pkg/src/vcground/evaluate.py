"""Prediction, IoU, P@1 accuracy and report binning."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import torch

from .data import Example
from .params import ParamSet
from .scene import BBox, ValidationError
from .scoring import ModelConfig, forward, predict_index

CONTEXT_THRESHOLD = 0.1
CONTEXT_TOP_K = 3
IOU_THRESHOLD = 0.5


@dataclass
class Prediction:
    image_id: str
    expr_idx: int
    pred_idx: int
    scores: list[float]
    context: list[tuple[int, float]]

    def to_json(self) -> str:
        return json.dumps(
            {
                "image_id": self.image_id,
                "expr_idx": self.expr_idx,
                "pred_idx": self.pred_idx,
                "scores": self.scores,
                "context": [[j, b] for j, b in self.context],
            }
        )


def top_context(beta_row: torch.Tensor) -> list[tuple[int, float]]:
    """Context entries with weight above 0.1, at most three, heaviest first."""
    b = beta_row.detach().tolist()
    keep = [(j, w) for j, w in enumerate(b) if w > CONTEXT_THRESHOLD]
    keep.sort(key=lambda t: (-t[1], t[0]))
    return keep[:CONTEXT_TOP_K]


@torch.no_grad()
def predict_example(ex: Example, params: ParamSet, cfg: ModelConfig) -> list[Prediction]:
    bundle, _ = forward(ex.X, ex.exprs, params, cfg)
    preds = []
    for e in range(len(ex.exprs)):
        S = bundle.S[e]
        k = predict_index(S)
        preds.append(
            Prediction(
                ex.scene.image_id,
                e,
                k,
                [float(v) for v in S.tolist()],
                top_context(bundle.beta[e, k]),
            )
        )
    return preds


def predict(examples: Iterable[Example], params: ParamSet, cfg: ModelConfig) -> list[Prediction]:
    out = []
    for ex in examples:
        out.extend(predict_example(ex, params, cfg))
    return out


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_br, b.x_br) - max(a.x_tl, b.x_tl)
    ih = min(a.y_br, b.y_br) - max(a.y_tl, b.y_tl)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass
class GroundTruthItem:
    image_id: str
    expr_idx: int
    referent_idx: int
    gt_bbox: Optional[BBox] = None
    region_bboxes: Optional[list[BBox]] = None
    n_regions: int = 0
    template: Optional[str] = None


def ground_truth_items(examples: Iterable[Example]) -> list[GroundTruthItem]:
    items = []
    for ex in examples:
        boxes = [r.bbox for r in ex.scene.regions]
        for e, rec in enumerate(ex.scene.expressions):
            if rec.referent_idx is None:
                continue
            items.append(
                GroundTruthItem(
                    ex.scene.image_id,
                    e,
                    rec.referent_idx,
                    boxes[rec.referent_idx],
                    boxes,
                    len(boxes),
                    rec.template,
                )
            )
    return items


@dataclass
class EvalReport:
    accuracy: float
    count: int
    correct: int
    by_box_count: dict[int, dict] = field(default_factory=dict)
    by_template: dict[str, dict] = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["by_box_count"] = {str(k): v for k, v in sorted(self.by_box_count.items())}
        d["by_template"] = dict(sorted(self.by_template.items()))
        return json.dumps(d, sort_keys=True)


def _bucket(correct: int, count: int) -> dict:
    return {"accuracy": correct / count if count else 0.0, "correct": correct, "count": count}


def accuracy(
    predictions: Sequence[Prediction],
    truth: Sequence[GroundTruthItem],
    mode: str = "index",
) -> EvalReport:
    """P@1 over predictions matched to ground truth by (image_id, expr_idx).

    ``mode='iou'`` counts a hit when the predicted box overlaps the ground
    truth box with IoU strictly above 0.5.
    """
    if mode not in ("index", "iou"):
        raise ValidationError(f"unknown accuracy mode {mode!r}")
    if not predictions:
        raise ValidationError("no predictions to evaluate")
    gt = {(t.image_id, t.expr_idx): t for t in truth}
    bins: dict[int, list[int]] = defaultdict(lambda: [0, 0])
    temps: dict[str, list[int]] = defaultdict(lambda: [0, 0])
    correct = 0
    for p in predictions:
        t = gt.get((p.image_id, p.expr_idx))
        if t is None:
            raise ValidationError(f"no ground truth for ({p.image_id}, {p.expr_idx})")
        if mode == "index":
            hit = p.pred_idx == t.referent_idx
        else:
            if t.region_bboxes is None or t.gt_bbox is None:
                raise ValidationError("iou mode needs region boxes")
            hit = iou(t.region_bboxes[p.pred_idx], t.gt_bbox) > IOU_THRESHOLD
        correct += hit
        n = t.n_regions or len(p.scores)
        bins[n][0] += hit
        bins[n][1] += 1
        if t.template is not None:
            temps[t.template][0] += hit
            temps[t.template][1] += 1
    total = len(predictions)
    return EvalReport(
        accuracy=correct / total,
        count=total,
        correct=correct,
        by_box_count={k: _bucket(*v) for k, v in sorted(bins.items())},
        by_template={k: _bucket(*v) for k, v in sorted(temps.items())},
    )


def evaluate(examples: Sequence[Example], params: ParamSet, cfg: ModelConfig, mode: str = "index") -> EvalReport:
    return accuracy(predict(examples, params, cfg), ground_truth_items(examples), mode)


def load_predictions(path) -> list[Prediction]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(
                    Prediction(
                        str(rec["image_id"]),
                        int(rec["expr_idx"]),
                        int(rec["pred_idx"]),
                        [float(v) for v in rec["scores"]],
                        [(int(j), float(b)) for j, b in rec.get("context", [])],
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"prediction line {lineno}: {exc}") from None
    return out
