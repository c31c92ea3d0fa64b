"""Deterministic synthetic scenes with templated referring expressions.

Relations default to the "cone" rule: "the circle left of the square" names
the one circle whose offset from the square points mostly left (within 45
degrees of the axis).  When several circles are candidates, another one must
reach further left outside that cone, so the referent is never simply the
leftmost circle.  Plain half-plane semantics would always make the unique
match an extreme region, which a scorer could find without the context.

Two alternative rules are kept for experiments: "closest" (the candidate
nearest the context, lying in the stated direction) and "axis" (nearest
along the stated axis among candidates on that side).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .scene import BBox, ExpressionRecord, Region, Scene

CATEGORIES = ("circle", "square", "triangle", "star")
SIZES = ("small", "large")
SHADES = ("light", "dark")
RELATIONS = ("left", "right", "above", "below")
RELATION_TOKENS = {
    "left": ("left", "of"),
    "right": ("right", "of"),
    "above": ("above",),
    "below": ("below",),
}
TEMPLATES = ("attribute", "relational", "same_category")
SPLITS = {"train": 0, "val": 1, "test": 2}
# held-out surface forms; they are deliberately absent from the vocabulary
SYNONYMS = {"the": ("that", "this")}
ENCODING_DIM = len(CATEGORIES) + len(SIZES) + len(SHADES)


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    image_size: float = 100.0
    min_objects: int = 6
    max_objects: int = 10
    focus_count: tuple[int, int] = (3, 4)
    categories: tuple[str, ...] = CATEGORIES
    visual_dim: int = 16
    noise_sigma: float = 0.1
    large_side: tuple[float, float] = (0.13, 0.17)
    small_side: tuple[float, float] = (0.07, 0.10)
    relation_margin: float = 0.03
    nearest_margin: float = 0.06
    relation_rule: str = "cone"
    template_weights: tuple[float, float, float] = (0.25, 0.25, 0.5)
    expressions_per_scene: int = 2
    synonym_prob: float = 0.05
    placement_retries: int = 200
    expression_retries: int = 30
    seed: int = 0

    def __post_init__(self):
        if len(self.categories) < 2:
            raise ValueError("need at least two categories")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("invalid object count range")
        if self.relation_rule not in ("cone", "closest", "axis"):
            raise ValueError(f"unknown relation rule {self.relation_rule!r}")
        if self.visual_dim < len(self.categories) + len(SIZES) + len(SHADES):
            raise ValueError("visual_dim too small for the attribute encoding")


@dataclass
class GroundTruth:
    referent_idx: int
    context_idx: list[int]
    template: str


@dataclass
class _Obj:
    category: int
    size: int
    shade: int
    bbox: BBox


def vocabulary_words(config: WorldConfig = WorldConfig()) -> list[str]:
    words = ["the", "other", "of"]
    words += list(config.categories) + list(SIZES) + list(SHADES)
    for toks in RELATION_TOKENS.values():
        for t in toks:
            if t not in words:
                words.append(t)
    return words


def stream(config: WorldConfig, split: str, index: int) -> np.random.Generator:
    """Independent RNG per (seed, split, index)."""
    return np.random.default_rng([config.seed, SPLITS[split], index])


def encoding(category: int, size: int, shade: int, config: WorldConfig) -> np.ndarray:
    v = np.zeros(config.visual_dim)
    v[category] = 1.0
    v[len(config.categories) + size] = 1.0
    v[len(config.categories) + len(SIZES) + shade] = 1.0
    return v


def _overlaps(a: BBox, b: BBox) -> bool:
    return a.x_tl < b.x_br and b.x_tl < a.x_br and a.y_tl < b.y_br and b.y_tl < a.y_br


def generate_scene(
    config: WorldConfig,
    rng: np.random.Generator,
    image_id: str = "scene",
    n_objects: Optional[int] = None,
) -> Scene:
    """Non-overlapping objects; one focus category gets several instances."""
    W = config.image_size
    n = int(rng.integers(config.min_objects, config.max_objects + 1)) if n_objects is None else n_objects
    n_cat = len(config.categories)
    focus = int(rng.integers(n_cat))
    k_focus = min(n, int(rng.integers(config.focus_count[0], config.focus_count[1] + 1)))
    # focus instances get distinct (size, shade) pairs so each can be named
    combos = [(int(c) // 2, int(c) % 2) for c in rng.permutation(4)]
    looks = [combos[k % 4] for k in range(k_focus)]
    looks += [(int(rng.integers(2)), int(rng.integers(2))) for _ in range(n - k_focus)]
    cats = [focus] * k_focus + [int(c) for c in rng.integers(n_cat, size=n - k_focus)]
    order = rng.permutation(n)
    objs: list[_Obj] = []
    for k in order:
        cat = cats[k]
        size, shade = looks[k]
        lo, hi = config.large_side if size == 1 else config.small_side
        for _ in range(config.placement_retries):
            w = rng.uniform(lo, hi) * W
            h = rng.uniform(lo, hi) * W
            x0 = rng.uniform(0, W - w)
            y0 = rng.uniform(0, W - h)
            box = BBox(float(x0), float(y0), float(x0 + w), float(y0 + h))
            if not any(_overlaps(box, o.bbox) for o in objs):
                break
        else:
            raise GenerationError(f"could not place {n} objects without overlap")
        objs.append(_Obj(cat, size, shade, box))
    regions = []
    for o in objs:
        v = encoding(o.category, o.size, o.shade, config)
        if config.noise_sigma > 0:
            v = v + rng.normal(0.0, config.noise_sigma, size=v.shape)
        # float32-representable so the binary sidecar round-trips exactly
        v = v.astype(np.float32).astype(np.float64)
        regions.append(Region(bbox=o.bbox, visual=v, category_id=o.category))
    scene = Scene(image_id, W, W, regions)
    scene._objs = objs  # generator-side attributes, not serialized
    return scene


def region_attributes(scene: Scene, config: WorldConfig) -> list[tuple[int, int, int]]:
    """(category, size, shade) per region, recovered from the noise-free encoding slots."""
    if hasattr(scene, "_objs"):
        return [(o.category, o.size, o.shade) for o in scene._objs]
    nc = len(config.categories)
    out = []
    for r in scene.regions:
        v = r.visual
        out.append(
            (
                int(r.category_id) if r.category_id is not None else int(np.argmax(v[:nc])),
                int(np.argmax(v[nc : nc + 2])),
                int(np.argmax(v[nc + 2 : nc + 4])),
            )
        )
    return out


def _axis_offset(scene: Scene, a: int, b: int, relation: str) -> float:
    """Signed distance by which region ``a`` lies in ``relation`` of region ``b``."""
    ax, ay = scene.regions[a].bbox.center
    bx, by = scene.regions[b].bbox.center
    return {"left": bx - ax, "right": ax - bx, "above": by - ay, "below": ay - by}[relation]


def _minimal_descriptor(attrs, idx: int, pool: Sequence[int], rng) -> Optional[list[str]]:
    """Fewest attribute words that single out ``idx`` among ``pool`` (same category)."""
    cat, size, shade = attrs[idx]
    options = [[], ["size"], ["shade"], ["size", "shade"]]
    for want in options[:1], options[1:3], options[3:]:
        found = []
        for opt in want:
            def key(k):
                a = attrs[k]
                return tuple(a[1] if o == "size" else a[2] for o in opt)

            if all(key(k) != key(idx) for k in pool if k != idx):
                found.append(opt)
        if found:
            opt = found[int(rng.integers(len(found)))]
            words = []
            if "size" in opt:
                words.append(SIZES[size])
            if "shade" in opt:
                words.append(SHADES[shade])
            return words
    return None


def _nearest_in_direction(scene, candidates, ctx, relation, config) -> Optional[int]:
    W = scene.width
    margin = config.relation_margin * W
    offs = []
    for c in candidates:
        d = _axis_offset(scene, c, ctx, relation)
        if abs(d) < margin:
            return None  # too close to call
        if d > 0:
            offs.append((d, c))
    if not offs:
        return None
    offs.sort()
    if len(offs) > 1 and offs[1][0] - offs[0][0] < config.nearest_margin * W:
        return None
    return offs[0][1]


def _in_cone(scene, candidates, ctx, relation, config) -> Optional[int]:
    margin = config.relation_margin * scene.width
    along = {"left": (-1, 0), "right": (1, 0), "above": (0, -1), "below": (0, 1)}[relation]
    cx, cy = scene.regions[ctx].bbox.center
    inside = []
    reach = {}
    for c in candidates:
        x, y = scene.regions[c].bbox.center
        a = along[0] * (x - cx) + along[1] * (y - cy)
        b = abs(along[1] * (x - cx) - along[0] * (y - cy))
        # distance to the nearer cone edge, signed positive inside
        edge = (a - b) / np.sqrt(2.0)
        if abs(edge) < margin:
            return None
        if edge > 0:
            inside.append(c)
        reach[c] = a
    if len(inside) != 1:
        return None
    ref = inside[0]
    if len(candidates) > 1 and not any(reach[c] > reach[ref] for c in candidates if c != ref):
        return None
    return ref


def _closest_in_direction(scene, candidates, ctx, relation, config) -> Optional[int]:
    W = scene.width
    cx, cy = scene.regions[ctx].bbox.center
    dist = []
    for c in candidates:
        x, y = scene.regions[c].bbox.center
        dist.append((float(np.hypot(x - cx, y - cy)), c))
    if not dist:
        return None
    dist.sort()
    if len(dist) > 1 and dist[1][0] - dist[0][0] < config.nearest_margin * W:
        return None
    ref = dist[0][1]
    d_ref = _axis_offset(scene, ref, ctx, relation)
    if d_ref < config.relation_margin * W:
        return None
    # some other candidate lies further out, so the extreme region is wrong
    if len(candidates) > 1 and not any(_axis_offset(scene, c, ctx, relation) > d_ref for c in candidates if c != ref):
        return None
    return ref


def _attribute_expression(scene, attrs, config, rng):
    cats = config.categories
    ref = int(rng.integers(scene.num_regions))
    pool = [k for k, a in enumerate(attrs) if a[0] == attrs[ref][0]]
    desc = _minimal_descriptor(attrs, ref, pool, rng)
    if desc is None:
        return None
    tokens = ["the", *desc, cats[attrs[ref][0]]]
    return tokens, GroundTruth(ref, [], "attribute")


def _relational_expression(scene, attrs, config, rng, same_category: bool):
    cats = config.categories
    n = scene.num_regions
    counts = np.bincount([a[0] for a in attrs], minlength=len(cats))
    if same_category:
        # with only two instances "left of the other X" picks an extreme region,
        # so prefer categories where the context really disambiguates
        eligible = [c for c in range(len(cats)) if counts[c] >= 3]
        if not eligible:
            eligible = [c for c in range(len(cats)) if counts[c] == 2]
        if not eligible:
            return None
        ref_cat = eligible[int(rng.integers(len(eligible)))]
        ctx_cat = ref_cat
    else:
        ref_cat = attrs[int(rng.integers(n))][0]
        others = [c for c in range(len(cats)) if c != ref_cat and counts[c] >= 1]
        if not others:
            return None
        ctx_cat = others[int(rng.integers(len(others)))]
    ctx_pool = [k for k, a in enumerate(attrs) if a[0] == ctx_cat]
    ctx = ctx_pool[int(rng.integers(len(ctx_pool)))]
    if same_category and len(ctx_pool) == 2:
        ctx_words = ["other"]
    else:
        ctx_words = _minimal_descriptor(attrs, ctx, ctx_pool, rng)
        if ctx_words is None:
            return None
    candidates = [k for k, a in enumerate(attrs) if a[0] == ref_cat and k != ctx]
    pick = {"cone": _in_cone, "closest": _closest_in_direction, "axis": _nearest_in_direction}[
        config.relation_rule
    ]
    for r in rng.permutation(len(RELATIONS)):
        relation = RELATIONS[int(r)]
        ref = pick(scene, candidates, ctx, relation, config)
        if ref is not None:
            break
    else:
        return None
    tokens = ["the", cats[ref_cat], *RELATION_TOKENS[relation], "the", *ctx_words, cats[ctx_cat]]
    template = "same_category" if same_category else "relational"
    return tokens, GroundTruth(ref, [ctx], template)


def _apply_synonyms(tokens, config, rng):
    out = []
    for t in tokens:
        alts = SYNONYMS.get(t)
        if alts and rng.random() < config.synonym_prob:
            out.append(alts[int(rng.integers(len(alts)))])
        else:
            out.append(t)
    return out


def generate_expression(
    scene: Scene,
    config: WorldConfig,
    rng: np.random.Generator,
    template: Optional[str] = None,
) -> tuple[list[str], GroundTruth]:
    """Sample a template and an unambiguous expression for it.

    Raises GenerationError when no unambiguous expression is found within
    ``config.expression_retries`` attempts.
    """
    attrs = region_attributes(scene, config)
    if template is None:
        w = np.asarray(config.template_weights, dtype=np.float64)
        template = TEMPLATES[int(rng.choice(len(TEMPLATES), p=w / w.sum()))]
    for _ in range(config.expression_retries):
        if template == "attribute":
            out = _attribute_expression(scene, attrs, config, rng)
        elif template == "relational":
            out = _relational_expression(scene, attrs, config, rng, same_category=False)
        elif template == "same_category":
            out = _relational_expression(scene, attrs, config, rng, same_category=True)
        else:
            raise ValueError(f"unknown template {template!r}")
        if out is not None:
            tokens, gt = out
            return _apply_synonyms(tokens, config, rng), gt
    raise GenerationError(f"no unambiguous {template} expression for scene {scene.image_id}")


def _canonical(tokens) -> tuple[str, ...]:
    back = {alt: word for word, alts in SYNONYMS.items() for alt in alts}
    return tuple(back.get(t, t) for t in tokens)


def _template_order(counts: dict[str, int], config: WorldConfig) -> list[str]:
    """Templates still under their target share, largest deficit first."""
    w = np.asarray(config.template_weights, dtype=np.float64)
    w = w / w.sum()
    total = sum(counts.values()) + 1
    deficit = {t: w[k] * total - counts[t] for k, t in enumerate(TEMPLATES)}
    lagging = [t for t in TEMPLATES if deficit[t] > 0]
    return sorted(lagging, key=lambda t: (-deficit[t], TEMPLATES.index(t)))


def generate_split(config: WorldConfig, split: str, n_pairs: int, start_index: int = 0) -> list[Scene]:
    """Scenes with attached expressions until ``n_pairs`` expressions exist.

    Scene ``k`` of a split always comes from stream (seed, split, k); scenes
    that admit no expression are skipped.  Templates are assigned to keep the
    realized mix close to ``config.template_weights``.
    """
    scenes: list[Scene] = []
    counts = {t: 0 for t in TEMPLATES}
    total = 0
    index = start_index
    while total < n_pairs:
        rng = stream(config, split, index)
        image_id = f"{split}-{config.seed}-{index:06d}"
        index += 1
        try:
            scene = generate_scene(config, rng, image_id)
        except GenerationError:
            continue
        exprs = []
        seen = set()
        for _ in range(min(config.expressions_per_scene, n_pairs - total - len(exprs))):
            made = None
            for t in _template_order(counts, config):
                if config.template_weights[TEMPLATES.index(t)] <= 0:
                    continue
                try:
                    made = generate_expression(scene, config, rng, template=t)
                except GenerationError:
                    continue
                if (_canonical(made[0]), made[1].referent_idx) in seen:
                    made = None
                    continue
                break
            if made is None:
                break
            tokens, gt = made
            seen.add((_canonical(tokens), gt.referent_idx))
            counts[gt.template] += 1
            exprs.append(
                ExpressionRecord(tokens, gt.referent_idx, gt.template, list(gt.context_idx))
            )
        if not exprs:
            continue
        scene.expressions = exprs
        scenes.append(scene)
        total += len(exprs)
    return scenes


def with_seed(config: WorldConfig, seed: int) -> WorldConfig:
    return replace(config, seed=seed)
