"""Command-line entry point.

Exit codes: 0 success, 1 bad input (validation), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import oracle
from . import synthworld as sw
from .data import prepare
from .evaluate import accuracy, evaluate, ground_truth_items, load_predictions, predict
from .language import CUES, Vocabulary, batch_ids, cue_features, tokenize
from .objectives import supervised_loss, unsupervised_loss
from .scene import FeatureConfig, ValidationError, load_scenes, save_scenes
from .scoring import VARIANTS, ModelConfig, forward
from .train import Checkpoint, TrainConfig, gradcheck, init_params, train_loop

log = logging.getLogger("vcground")

MODES = {"sup": "supervised", "unsup": "unsupervised"}
ABLATION_VARIANTS = ("vc", "vc-no-reg", "vc-no-alpha")
GRADCHECK_TOLERANCE = 1e-4


class CliError(Exception):
    """Runtime failure that should exit with code 2."""


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def read_config(path) -> dict[str, str]:
    """UTF-8 ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise ValidationError(f"{path}: line {lineno}: expected key=value")
            out[key.strip()] = value.strip()
    return out


def _coerce(raw: str, typ, key: str):
    origin = typing.get_origin(typ)
    if origin is tuple:
        parts = [p for p in raw.split(",") if p.strip()]
        inner = typing.get_args(typ)[0]
        return tuple(_coerce(p.strip(), inner, key) for p in parts)
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ in (int, float, str):
            return typ(raw)
    except ValueError:
        raise ValidationError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}") from None
    raise ValidationError(f"config key {key!r} has unsupported type")


def apply_config(cls, raw: dict[str, str], **overrides):
    """Build dataclass ``cls`` from string settings, then apply typed overrides."""
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValidationError(f"unknown config keys for {cls.__name__}: {unknown}")
    values = {k: _coerce(v, hints[k], k) for k, v in raw.items()}
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**values)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def _train_config(args, **extra) -> TrainConfig:
    raw = read_config(args.config) if args.config else {}
    mode = MODES[args.mode] if getattr(args, "mode", None) else None
    return apply_config(
        TrainConfig, raw, mode=mode, variant=getattr(args, "variant", None), seed=getattr(args, "seed", None), **extra
    )


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _write(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _need(value, flag: str):
    if not value:
        raise ValidationError(f"{flag} is required")
    return value


def _load_vocab(path) -> Vocabulary:
    words = [w.strip() for w in Path(path).read_text(encoding="utf-8").splitlines() if w.strip()]
    return Vocabulary.build(words)


def _examples_for_checkpoint(path: str, ck: Checkpoint, require_expressions=True):
    scenes = load_scenes(path)
    vocab = Vocabulary(ck.vocab)
    return prepare(scenes, vocab, FeatureConfig(use_visdiff=ck.config.use_visdiff), ck.model.t_max, require_expressions)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    raw = read_config(args.config) if args.config else {}
    wc = apply_config(sw.WorldConfig, raw, seed=args.seed)
    scenes = sw.generate_split(wc, args.split, args.pairs)
    save_scenes(scenes, _need(args.out, "--out"))
    if args.vocab:
        Path(args.vocab).write_text("\n".join(sw.vocabulary_words(wc)) + "\n", encoding="utf-8")
    n = sum(len(s.expressions) for s in scenes)
    print(f"wrote {len(scenes)} scenes, {n} expressions to {args.out}", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    scenes = load_scenes(_need(args.data, "--data"))
    if args.vocab:
        vocab = _load_vocab(args.vocab)
    else:
        vocab = Vocabulary.build(t for s in scenes for e in s.expressions for t in e.tokens)
    feats = FeatureConfig(use_visdiff=cfg.use_visdiff)
    examples = prepare(scenes, vocab, feats, cfg.t_max)
    if not examples:
        raise ValidationError(f"{args.data}: no scenes with expressions")
    val = prepare(load_scenes(args.val), vocab, feats, cfg.t_max) if args.val else ()
    res = train_loop(examples, cfg, vocab.tokens, val_examples=val, progress=lambda r: print(json.dumps(r), file=sys.stderr))
    res.checkpoint.save(_need(args.out, "--out"))
    print(f"saved checkpoint to {args.out}", file=sys.stderr)
    return 0


def cmd_predict(args) -> int:
    ck = Checkpoint.load(_need(args.ckpt, "--ckpt"))
    examples = _examples_for_checkpoint(_need(args.data, "--data"), ck)
    preds = predict(examples, ck.params, _model_for(ck, args))
    _write("".join(p.to_json() + "\n" for p in preds), args.out)
    return 0


def _model_for(ck: Checkpoint, args) -> ModelConfig:
    if getattr(args, "variant", None):
        return dataclasses.replace(ck.model, variant=args.variant)
    return ck.model


def cmd_eval(args) -> int:
    mode = "iou" if args.iou else "index"
    scenes_path = _need(args.data, "--data")
    if args.pred:
        preds = load_predictions(args.pred)
        if not preds:
            raise ValidationError(f"{args.pred}: prediction file is empty")
        scenes = load_scenes(scenes_path)
        from .data import Example

        shells = [Example(s, torch.zeros(0), [], [e.template for e in s.expressions]) for s in scenes]
        report = accuracy(preds, ground_truth_items(shells), mode)
    else:
        ck = Checkpoint.load(_need(args.ckpt, "--ckpt"))
        examples = _examples_for_checkpoint(scenes_path, ck)
        if not examples:
            raise ValidationError(f"{scenes_path}: no scenes with expressions")
        report = evaluate(examples, ck.params, _model_for(ck, args), mode)
    _write(report.to_json() + "\n", args.out)
    return 0


def fixture_problem(seed: int = 0):
    """The gradient-fidelity fixture: 5 regions, one 8-token expression, desk dims."""
    from .scene import BBox, Region, Scene, build_features

    wc = sw.WorldConfig()
    vocab = Vocabulary.build(sw.vocabulary_words(wc))
    rng = np.random.default_rng(seed)
    regions = []
    for k in range(5):
        x0, y0 = rng.uniform(0, 60, size=2)
        w, h = rng.uniform(5, 35, size=2)
        regions.append(Region(BBox(x0, y0, x0 + w, y0 + h), rng.normal(size=wc.visual_dim), category_id=k % 2))
    scene = build_features(Scene(f"fixture{seed}", 100.0, 100.0, regions), FeatureConfig())
    X = torch.as_tensor(scene.feature_matrix())
    tokens = ["the", "large", "dark", "circle", "left", "of", "the", "square"]
    expr = tokenize(tokens, vocab, 20, referent_idx=2)
    cfg = TrainConfig(seed=seed)
    mcfg = ModelConfig(vocab_size=len(vocab), region_dim=X.shape[1], d_w=cfg.d_w, hidden_size=cfg.hidden_size, layers=cfg.layers)
    return X, [expr], init_params(mcfg, seed), mcfg


def run_gradcheck(seed: int = 0, max_coords: int = 20) -> dict[str, object]:
    X, exprs, params, mcfg = fixture_problem(seed)

    def sup(p):
        return supervised_loss(forward(X, exprs, p, mcfg)[0].S[0], exprs[0].referent_idx)

    def unsup(p):
        return unsupervised_loss(forward(X, exprs, p, mcfg)[0].S[0])

    reports = {name: gradcheck(params, fn, max_coords=max_coords, seed=seed) for name, fn in (("supervised", sup), ("unsupervised", unsup))}
    return reports


def cmd_gradcheck(args) -> int:
    reports = run_gradcheck(args.seed or 0, args.coords)
    worst = 0.0
    lines = []
    for loss, rep in reports.items():
        for name, err in rep.max_rel_error.items():
            lines.append(f"{loss}\t{name}\t{rep.n_coords[name]}\t{err:.3e}")
        worst = max(worst, rep.worst)
    lines.append(f"max_rel_error\t{worst:.3e}")
    _write("\n".join(lines) + "\n", args.out)
    if worst >= GRADCHECK_TOLERANCE:
        print(f"gradient check failed: {worst:.3e} >= {GRADCHECK_TOLERANCE}", file=sys.stderr)
        return 2
    return 0


def cmd_boundcheck(args) -> int:
    seed = args.seed or 0
    rows = oracle.approximation_comparison(seed=seed)
    _write(oracle.rows_to_csv(rows), args.out)
    cert = oracle.certify_bound(n_models=args.models, seed=seed)
    print(json.dumps(dataclasses.asdict(cert), sort_keys=True), file=sys.stderr)
    return 0


def _synth_splits(seed: int, train_pairs: int, test_pairs: int, raw_world: dict[str, str]):
    wc = apply_config(sw.WorldConfig, raw_world, seed=seed)
    vocab = Vocabulary.build(sw.vocabulary_words(wc))
    return vocab, sw.generate_split(wc, "train", train_pairs), sw.generate_split(wc, "test", test_pairs)


def ablation_table(
    seeds: Sequence[int],
    base: TrainConfig,
    variants: Sequence[str] = ABLATION_VARIANTS,
    train_pairs: int = 5000,
    test_pairs: int = 500,
    world: Optional[dict[str, str]] = None,
    data: Optional[tuple] = None,
) -> list[dict]:
    """One row per (variant, seed): overall and per-template test accuracy."""
    rows = []
    for seed in seeds:
        if data is None:
            vocab, train_scenes, test_scenes = _synth_splits(seed, train_pairs, test_pairs, world or {})
        else:
            vocab, train_scenes, test_scenes = data
        feats = FeatureConfig(use_visdiff=base.use_visdiff)
        tr = prepare(train_scenes, vocab, feats, base.t_max)
        te = prepare(test_scenes, vocab, feats, base.t_max)
        for variant in variants:
            cfg = dataclasses.replace(base, variant=variant, seed=seed)
            ck = train_loop(tr, cfg, vocab.tokens).checkpoint
            rep = evaluate(te, ck.params, ck.model)
            row = {"variant": variant, "seed": seed, "accuracy": rep.accuracy}
            for t in sw.TEMPLATES:
                row[t] = rep.by_template[t]["accuracy"] if t in rep.by_template else float("nan")
            rows.append(row)
            log.info("ablate %s seed %d: %.4f", variant, seed, rep.accuracy)
    return rows


def format_table(rows: Sequence[dict]) -> str:
    cols = ["variant", "seed", "accuracy", *sw.TEMPLATES]
    out = ["\t".join(cols)]
    for r in rows:
        out.append("\t".join(f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols))
    return "\n".join(out) + "\n"


def cmd_ablate(args) -> int:
    base = _train_config(args)
    seeds = list(range(args.seeds))
    data = None
    if args.data:
        if not args.test:
            raise ValidationError("--test is required with --data")
        train_scenes = load_scenes(args.data)
        vocab = Vocabulary.build(t for s in train_scenes for e in s.expressions for t in e.tokens)
        data = (vocab, train_scenes, load_scenes(args.test))
    world = read_config(args.world) if args.world else {}
    rows = ablation_table(seeds, base, train_pairs=args.pairs, test_pairs=args.test_pairs, world=world, data=data)
    _write(format_table(rows), args.out)
    for v in ABLATION_VARIANTS:
        accs = [r["accuracy"] for r in rows if r["variant"] == v]
        print(f"mean {v}\t{np.mean(accs):.4f}", file=sys.stderr)
    return 0


def cmd_attn(args) -> int:
    ck = Checkpoint.load(_need(args.ckpt, "--ckpt"))
    examples = _examples_for_checkpoint(_need(args.data, "--data"), ck)
    mcfg = _model_for(ck, args)
    lines = []
    with torch.no_grad():
        for ex in examples:
            ids, mask = batch_ids(ex.exprs)
            cf = cue_features(ids, mask, ck.params, mcfg.layers, mcfg.cue_mode)
            for e, (expr, rec) in enumerate(zip(ex.exprs, ex.scene.expressions)):
                n = expr.true_length
                rec_out = {
                    "image_id": ex.scene.image_id,
                    "expr_idx": e,
                    "tokens": rec.tokens[:n],
                    "alpha": {c: [round(float(a), 6) for a in cf.alpha[c][e, :n]] for c in CUES},
                }
                lines.append(json.dumps(rec_out))
    _write("".join(line + "\n" for line in lines), args.out)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vcground", description="Context-aware referring expression grounding.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, ckpt=False, train=False):
        if data:
            sp.add_argument("--data", help="scene JSONL file")
        if ckpt:
            sp.add_argument("--ckpt", help="checkpoint file")
        sp.add_argument("--config", help="key=value settings file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output path (default: stdout)")
        if train:
            sp.add_argument("--mode", choices=sorted(MODES))
        sp.add_argument("--variant", choices=VARIANTS)

    sp = sub.add_parser("gen", help="generate a synthetic split as scene JSONL")
    common(sp, data=False)
    sp.add_argument("--split", choices=sorted(sw.SPLITS), default="train")
    sp.add_argument("--pairs", type=int, default=5000)
    sp.add_argument("--vocab", help="also write the closed vocabulary here")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train a model")
    common(sp, train=True)
    sp.add_argument("--val", help="validation scene JSONL")
    sp.add_argument("--vocab", help="vocabulary file, one token per line")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="P@1 of a checkpoint or a prediction file")
    common(sp, ckpt=True)
    sp.add_argument("--pred", help="prediction JSONL to score instead of running a checkpoint")
    sp.add_argument("--iou", action="store_true", help="count hits by IoU > 0.5 instead of index")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", help="emit prediction JSONL")
    common(sp, ckpt=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline")
    common(sp, data=False)
    sp.add_argument("--coords", type=int, default=20, help="sampled coordinates per array (max 200)")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("boundcheck", help="toy-model sweep of bound and MIL objectives as CSV")
    common(sp, data=False)
    sp.add_argument("--models", type=int, default=1000)
    sp.set_defaults(func=cmd_boundcheck)

    sp = sub.add_parser("ablate", help="train VC, VC-no-reg and VC-no-alpha over shared seeds")
    common(sp, train=True)
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--test", help="test scene JSONL (with --data)")
    sp.add_argument("--world", help="key=value synthetic world settings")
    sp.add_argument("--pairs", type=int, default=5000)
    sp.add_argument("--test-pairs", type=int, default=500)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("attn", help="dump per-cue word attention")
    common(sp, ckpt=True)
    sp.set_defaults(func=cmd_attn)
    return p


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CliError, sw.GenerationError, FloatingPointError, RuntimeError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())
