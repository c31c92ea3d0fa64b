"""Initialization, SGD with momentum, the training loop, checkpoints and gradcheck."""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import objectives
from .data import Example
from .evaluate import evaluate
from .params import ParamSet
from .scoring import ModelConfig, forward, param_shapes

log = logging.getLogger(__name__)

MAGIC = b"VCCKPT1\n"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.95
    decay_factor: float = 0.1
    decay_every: int = 2000
    max_iters: int = 3000
    weight_decay: float = 0.0005
    seed: int = 0
    mode: str = "supervised"
    variant: str = "vc"
    aggregate: str = "mean"
    eval_every: int = 0
    log_every: int = 100
    # model sizing
    d_w: int = 32
    hidden_size: int = 64
    layers: int = 2
    t_max: int = 20
    use_visdiff: bool = True
    include_self_pair: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not 0 < self.decay_factor < 1:
            raise ValueError("decay factor must be in (0, 1)")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")
        if self.mode not in ("supervised", "unsupervised"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.aggregate not in ("mean", "sum"):
            raise ValueError(f"unknown aggregate {self.aggregate!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def model_config(cfg: TrainConfig, vocab_size: int, region_dim: int) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        region_dim=region_dim,
        d_w=cfg.d_w,
        hidden_size=cfg.hidden_size,
        layers=cfg.layers,
        t_max=cfg.t_max,
        include_self_pair=cfg.include_self_pair,
        variant=cfg.variant,
    )


# ---------------------------------------------------------------------------
# Initialization and optimizer
# ---------------------------------------------------------------------------


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(mcfg: ModelConfig, seed: int, embedding: Optional[np.ndarray] = None) -> ParamSet:
    """Xavier-uniform weights and word embeddings, zero biases."""
    rng = np.random.default_rng(seed)
    ps = ParamSet()
    for name, shape in param_shapes(mcfg).items():
        if name == "embed":
            if embedding is not None:
                if embedding.shape != shape:
                    raise ValueError(f"embedding table shape {embedding.shape} != {shape}")
                arr = embedding
            else:
                a = xavier_bound(shape[0], shape[1])
                arr = rng.uniform(-a, a, size=shape)
        elif name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            a = xavier_bound(shape[0], shape[1])
            arr = rng.uniform(-a, a, size=shape)
        ps.add(name, arr)
    return ps


def is_decayed(name: str) -> bool:
    """Weight decay covers affine and recurrent weights, not biases or embeddings."""
    return name.endswith(".W")


def learning_rate(cfg: TrainConfig, iteration: int) -> float:
    return cfg.lr * cfg.decay_factor ** (iteration // cfg.decay_every)


@torch.no_grad()
def sgd_step(
    params: ParamSet,
    grads: dict[str, torch.Tensor],
    velocity: dict[str, torch.Tensor],
    cfg: TrainConfig,
    iteration: int,
) -> None:
    """v <- mu v - lr (g + wd w); w <- w + v.  Updates params and velocity in place."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    lr = learning_rate(cfg, iteration)
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(w)
        if is_decayed(name) and cfg.weight_decay:
            g = g + cfg.weight_decay * w
        v = velocity.get(name)
        if v is None:
            v = torch.zeros_like(w)
        v = cfg.momentum * v - lr * g
        velocity[name] = v
        w.add_(v)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def example_loss(ex: Example, params: ParamSet, mcfg: ModelConfig, mode: str, aggregate: str = "mean"):
    bundle, _ = forward(ex.X, ex.exprs, params, mcfg)
    losses = []
    for e, expr in enumerate(ex.exprs):
        if mode == "supervised":
            if expr.referent_idx is None:
                continue
            losses.append(objectives.supervised_loss(bundle.S[e], expr.referent_idx))
        else:
            losses.append(objectives.unsupervised_loss(bundle.S[e]))
    if not losses:
        return None
    total = torch.stack(losses).sum()
    return total / len(losses) if aggregate == "mean" else total


@dataclass
class Checkpoint:
    params: ParamSet
    config: TrainConfig
    model: ModelConfig
    vocab: list[str]
    iteration: int
    rng_state: dict
    velocity: dict[str, np.ndarray]

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def to_bytes(self) -> bytes:
        meta = {
            "config": json.dumps(self.config.to_dict(), sort_keys=True),
            "model": json.dumps(self.model.to_dict(), sort_keys=True),
            "vocab": json.dumps(self.vocab),
            "iteration": str(self.iteration),
            "rng_state": json.dumps(self.rng_state, sort_keys=True),
        }
        arrays = list(self.params.to_numpy().items())
        arrays += [("velocity:" + k, np.asarray(v)) for k, v in self.velocity.items()]
        return encode_checkpoint(meta, arrays)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        meta, arrays = decode_checkpoint(data)
        params = {k: v for k, v in arrays if not k.startswith("velocity:")}
        velocity = {k[len("velocity:") :]: v for k, v in arrays if k.startswith("velocity:")}
        model = json.loads(meta["model"])
        return cls(
            params=ParamSet(params),
            config=TrainConfig.from_dict(json.loads(meta["config"])),
            model=ModelConfig(**model),
            vocab=json.loads(meta["vocab"]),
            iteration=int(meta["iteration"]),
            rng_state=json.loads(meta["rng_state"]),
            velocity=velocity,
        )


def encode_checkpoint(meta: dict[str, str], arrays: Sequence[tuple[str, np.ndarray]]) -> bytes:
    """Magic line, a length-prefixed key=value text block, then named float64 arrays."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    text = "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")
    buf.write(f"meta {len(text)}\n".encode("ascii"))
    buf.write(text)
    buf.write(f"arrays {len(arrays)}\n".encode("ascii"))
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        shape = ",".join(str(d) for d in arr.shape)
        buf.write(f"{name} {shape}\n".encode("utf-8"))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def decode_checkpoint(data: bytes) -> tuple[dict[str, str], list[tuple[str, np.ndarray]]]:
    if not data.startswith(MAGIC):
        raise ValueError("not a VCCKPT1 checkpoint")
    pos = len(MAGIC)

    def line():
        nonlocal pos
        end = data.index(b"\n", pos)
        out = data[pos:end].decode("utf-8")
        pos = end + 1
        return out

    tag, n = line().split(" ")
    if tag != "meta":
        raise ValueError("checkpoint metadata block missing")
    text = data[pos : pos + int(n)].decode("utf-8")
    pos += int(n)
    meta = {}
    for row in text.splitlines():
        k, _, v = row.partition("=")
        meta[k] = v
    tag, count = line().split(" ")
    if tag != "arrays":
        raise ValueError("checkpoint array block missing")
    arrays = []
    for _ in range(int(count)):
        name, shape_s = line().rsplit(" ", 1)
        shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data[pos : pos + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
        pos += nbytes
        arrays.append((name, arr))
    if pos != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return meta, arrays


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]


def train_loop(
    examples: Sequence[Example],
    cfg: TrainConfig,
    vocab: Sequence[str],
    val_examples: Sequence[Example] = (),
    params: Optional[ParamSet] = None,
    progress: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Single-image SGD: each iteration draws one scene and averages its expressions' losses.

    Scenes are visited in a fresh seeded permutation every epoch.
    """
    if not examples:
        raise ValueError("no training examples")
    torch.set_num_threads(1)
    region_dim = examples[0].X.shape[1]
    mcfg = model_config(cfg, len(vocab), region_dim)
    if params is None:
        params = init_params(mcfg, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    velocity: dict[str, torch.Tensor] = {}
    metrics: list[dict] = []
    order: list[int] = []
    running = []
    for it in range(cfg.max_iters):
        if not order:
            order = list(rng.permutation(len(examples)))
        ex = examples[order.pop(0)]
        params.zero_grad()
        loss = example_loss(ex, params, mcfg, cfg.mode, cfg.aggregate)
        if loss is None:
            continue
        loss.backward()
        grads = {k: (t.grad if t.grad is not None else torch.zeros_like(t)) for k, t in params.items()}
        sgd_step(params, grads, velocity, cfg, it)
        running.append(float(loss.detach()))
        if cfg.log_every and (it + 1) % cfg.log_every == 0:
            rec = {"iter": it + 1, "loss": float(np.mean(running)), "lr": learning_rate(cfg, it)}
            running = []
            if cfg.eval_every and val_examples and (it + 1) % cfg.eval_every == 0:
                rec["val_accuracy"] = evaluate(val_examples, params, mcfg).accuracy
            metrics.append(rec)
            log.info("iter %(iter)d loss %(loss).4f", rec)
            if progress:
                progress(rec)
    params.zero_grad()
    ckpt = Checkpoint(
        params=params,
        config=cfg,
        model=mcfg,
        vocab=list(vocab),
        iteration=cfg.max_iters,
        rng_state=rng.bit_generator.state,
        velocity={k: v.detach().numpy().copy() for k, v in velocity.items()},
    )
    return TrainResult(ckpt, metrics)


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------


@dataclass
class GradcheckReport:
    max_rel_error: dict[str, float]
    n_coords: dict[str, int]

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0


def relative_error(a: float, n: float, floor: float = 1e-6) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradcheck(
    params: ParamSet,
    loss_fn: Callable[[ParamSet], torch.Tensor],
    which: Optional[Callable[[str], bool]] = None,
    max_coords: int = 200,
    step: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradcheckReport:
    """Compare autograd gradients with central differences on sampled coordinates.

    Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps exactly
    zero gradients (unused embedding rows, say) from dividing by zero.
    """
    rng = np.random.default_rng(seed)
    params.zero_grad()
    loss_fn(params).backward()
    analytic = params.grads()
    params.zero_grad()
    errs, counts = {}, {}
    for name, t in params.items():
        if which is not None and not which(name):
            continue
        size = t.numel()
        k = min(max_coords, size)
        coords = rng.choice(size, size=k, replace=False)
        flat = t.data.view(-1)
        worst = 0.0
        for c in coords:
            c = int(c)
            orig = float(flat[c])
            with torch.no_grad():
                flat[c] = orig + step
                fp = float(loss_fn(params))
                flat[c] = orig - step
                fm = float(loss_fn(params))
                flat[c] = orig
            num = (fp - fm) / (2 * step)
            worst = max(worst, relative_error(float(analytic[name].reshape(-1)[c]), num, floor))
        errs[name] = worst
        counts[name] = k
    return GradcheckReport(errs, counts)


def with_variant(cfg: TrainConfig, **changes) -> TrainConfig:
    return replace(cfg, **changes)
