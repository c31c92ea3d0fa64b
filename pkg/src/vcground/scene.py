"""Region data model, RoI feature construction and scene file I/O."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

VISDIFF_EPS = 1e-8


class ValidationError(ValueError):
    """Raised when input data violates a documented invariant."""


@dataclass(frozen=True)
class BBox:
    x_tl: float
    y_tl: float
    x_br: float
    y_br: float

    def __post_init__(self):
        coords = (self.x_tl, self.y_tl, self.x_br, self.y_br)
        if not all(np.isfinite(c) for c in coords):
            raise ValidationError(f"non-finite bbox coordinate in {coords}")
        if min(coords) < 0:
            raise ValidationError(f"negative bbox coordinate in {coords}")
        if not (self.x_tl < self.x_br and self.y_tl < self.y_br):
            raise ValidationError(f"degenerate or inverted bbox {coords}")

    @property
    def width(self) -> float:
        return self.x_br - self.x_tl

    @property
    def height(self) -> float:
        return self.y_br - self.y_tl

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_tl + self.x_br), 0.5 * (self.y_tl + self.y_br))

    def as_list(self) -> list[float]:
        return [self.x_tl, self.y_tl, self.x_br, self.y_br]


@dataclass
class Region:
    bbox: BBox
    visual: np.ndarray
    category_id: Optional[int] = None
    spatial: Optional[np.ndarray] = None
    visdiff: Optional[np.ndarray] = None
    feature: Optional[np.ndarray] = None


@dataclass
class ExpressionRecord:
    """A raw referring expression as stored in a scene file."""

    tokens: list[str]
    referent_idx: Optional[int] = None
    # Synthetic-world annotations; absent for ingested data.
    template: Optional[str] = None
    context_idx: Optional[list[int]] = None


@dataclass
class Scene:
    image_id: str
    width: float
    height: float
    regions: list[Region]
    expressions: list[ExpressionRecord] = field(default_factory=list)

    def __post_init__(self):
        validate_scene(self)

    @property
    def num_regions(self) -> int:
        return len(self.regions)

    def feature_matrix(self) -> np.ndarray:
        if any(r.feature is None for r in self.regions):
            raise ValidationError(f"scene {self.image_id}: features not built")
        return np.stack([r.feature for r in self.regions])


@dataclass(frozen=True)
class FeatureConfig:
    use_visdiff: bool = True
    visdiff_eps: float = VISDIFF_EPS


def validate_scene(scene: Scene) -> None:
    if not (scene.width > 0 and scene.height > 0):
        raise ValidationError(f"scene {scene.image_id}: width/height must be > 0")
    if len(scene.regions) < 1:
        raise ValidationError(f"scene {scene.image_id}: needs at least one region")
    dim = None
    for k, r in enumerate(scene.regions):
        b = r.bbox
        if b.x_br > scene.width or b.y_br > scene.height:
            raise ValidationError(
                f"scene {scene.image_id}: region {k} bbox {b.as_list()} outside "
                f"[0,{scene.width}]x[0,{scene.height}]"
            )
        v = np.asarray(r.visual)
        if v.ndim != 1:
            raise ValidationError(f"scene {scene.image_id}: region {k} visual must be 1-d")
        if dim is None:
            dim = v.shape[0]
        elif v.shape[0] != dim:
            raise ValidationError(
                f"scene {scene.image_id}: region {k} visual dim {v.shape[0]} != {dim}"
            )
    for e, expr in enumerate(scene.expressions):
        if expr.referent_idx is not None and not 0 <= expr.referent_idx < len(scene.regions):
            raise ValidationError(
                f"scene {scene.image_id}: expression {e} referent_idx "
                f"{expr.referent_idx} out of range"
            )


def spatial_feature(bbox: BBox, W: float, H: float) -> np.ndarray:
    """Normalized corners plus relative area of a box."""
    if not (W > 0 and H > 0):
        raise ValidationError("image width and height must be positive")
    if bbox.x_br > W or bbox.y_br > H:
        raise ValidationError(f"bbox {bbox.as_list()} outside image {W}x{H}")
    w = bbox.x_br - bbox.x_tl
    h = bbox.y_br - bbox.y_tl
    return np.array(
        [bbox.x_tl / W, bbox.y_tl / H, bbox.x_br / W, bbox.y_br / H, (w * h) / (W * H)],
        dtype=np.float64,
    )


def visdiff_feature(
    regions: Sequence[Region],
    i: int,
    comparison_set: Iterable[int],
    eps: float = VISDIFF_EPS,
) -> np.ndarray:
    """Mean of unit difference vectors between region ``i`` and its comparison set.

    Pairs closer than ``eps`` contribute zero; an empty set gives the zero vector.
    """
    comparison_set = list(comparison_set)
    vi = np.asarray(regions[i].visual, dtype=np.float64)
    if i in comparison_set:
        raise ValidationError(f"region {i} cannot be compared with itself")
    out = np.zeros_like(vi)
    if not comparison_set:
        return out
    for j in comparison_set:
        vj = np.asarray(regions[j].visual, dtype=np.float64)
        if vj.shape != vi.shape:
            raise ValidationError(f"visual dim mismatch: {vi.shape} vs {vj.shape}")
        d = vi - vj
        n = np.linalg.norm(d)
        if n >= eps:
            out += d / n
    return out / len(comparison_set)


def comparison_set_for(regions: Sequence[Region], i: int) -> list[int]:
    """Same-category regions when categories are known, else every other region."""
    cat = regions[i].category_id
    if cat is not None and all(r.category_id is not None for r in regions):
        return [j for j, r in enumerate(regions) if j != i and r.category_id == cat]
    return [j for j in range(len(regions)) if j != i]


def roi_feature(region: Region, config: FeatureConfig) -> np.ndarray:
    if region.spatial is None:
        raise ValidationError("spatial feature not computed")
    parts = [np.asarray(region.visual, dtype=np.float64)]
    if config.use_visdiff:
        if region.visdiff is None:
            raise ValidationError("visdiff enabled but not computed")
        if region.visdiff.shape != parts[0].shape:
            raise ValidationError("visdiff dim does not match visual dim")
        parts.append(region.visdiff)
    if region.spatial.shape != (5,):
        raise ValidationError("spatial feature must have 5 entries")
    parts.append(region.spatial)
    return np.concatenate(parts)


def feature_dim(visual_dim: int, config: FeatureConfig) -> int:
    return visual_dim * (2 if config.use_visdiff else 1) + 5


def build_features(scene: Scene, config: FeatureConfig = FeatureConfig()) -> Scene:
    """Fill spatial, visdiff and concatenated feature for every region in place."""
    for r in scene.regions:
        r.spatial = spatial_feature(r.bbox, scene.width, scene.height)
    for i, r in enumerate(scene.regions):
        if config.use_visdiff:
            r.visdiff = visdiff_feature(
                scene.regions, i, comparison_set_for(scene.regions, i), config.visdiff_eps
            )
        else:
            r.visdiff = None
    for r in scene.regions:
        r.feature = roi_feature(r, config)
    return scene


# ---------------------------------------------------------------------------
# JSON-lines scene files
# ---------------------------------------------------------------------------


def _scene_to_record(scene: Scene, include_visual: bool = True) -> dict:
    regions = []
    for r in scene.regions:
        rec = {"bbox": r.bbox.as_list(), "category_id": r.category_id}
        if include_visual:
            rec["visual"] = [float(v) for v in r.visual]
        regions.append(rec)
    exprs = []
    for e in scene.expressions:
        rec = {"tokens": list(e.tokens), "referent_idx": e.referent_idx}
        if e.template is not None:
            rec["template"] = e.template
        if e.context_idx is not None:
            rec["context_idx"] = list(e.context_idx)
        exprs.append(rec)
    return {
        "image_id": scene.image_id,
        "width": scene.width,
        "height": scene.height,
        "regions": regions,
        "expressions": exprs,
    }


def _require(rec: dict, key: str, types, lineno: int, where: str = ""):
    if key not in rec:
        raise ValidationError(f"line {lineno}: missing field '{where}{key}'")
    val = rec[key]
    if not isinstance(val, types) or isinstance(val, bool):
        raise ValidationError(f"line {lineno}: field '{where}{key}' has wrong type")
    return val


def _scene_from_record(rec: dict, lineno: int, visual_lookup=None) -> Scene:
    if not isinstance(rec, dict):
        raise ValidationError(f"line {lineno}: record must be a JSON object")
    image_id = _require(rec, "image_id", str, lineno)
    width = _require(rec, "width", (int, float), lineno)
    height = _require(rec, "height", (int, float), lineno)
    raw_regions = _require(rec, "regions", list, lineno)
    regions = []
    for k, rr in enumerate(raw_regions):
        where = f"regions[{k}]."
        if not isinstance(rr, dict):
            raise ValidationError(f"line {lineno}: field 'regions[{k}]' must be an object")
        bb = _require(rr, "bbox", list, lineno, where)
        if len(bb) != 4 or not all(isinstance(c, (int, float)) for c in bb):
            raise ValidationError(f"line {lineno}: field '{where}bbox' must be 4 numbers")
        try:
            bbox = BBox(*(float(c) for c in bb))
        except ValidationError as exc:
            raise ValidationError(f"line {lineno}: field '{where}bbox': {exc}") from None
        cat = rr.get("category_id")
        if cat is not None and (not isinstance(cat, int) or isinstance(cat, bool)):
            raise ValidationError(f"line {lineno}: field '{where}category_id' must be int or null")
        if "visual" in rr:
            vis = rr["visual"]
            if not isinstance(vis, list) or not all(isinstance(v, (int, float)) for v in vis):
                raise ValidationError(f"line {lineno}: field '{where}visual' must be a number list")
            visual = np.asarray(vis, dtype=np.float64)
        elif visual_lookup is not None:
            visual = visual_lookup(image_id, k)
        else:
            raise ValidationError(f"line {lineno}: missing field '{where}visual'")
        regions.append(Region(bbox=bbox, visual=visual, category_id=cat))
    exprs = []
    for k, er in enumerate(rec.get("expressions", [])):
        where = f"expressions[{k}]."
        if not isinstance(er, dict):
            raise ValidationError(f"line {lineno}: field 'expressions[{k}]' must be an object")
        tokens = _require(er, "tokens", list, lineno, where)
        if not all(isinstance(t, str) for t in tokens):
            raise ValidationError(f"line {lineno}: field '{where}tokens' must be strings")
        ref = er.get("referent_idx")
        if ref is not None and (not isinstance(ref, int) or isinstance(ref, bool)):
            raise ValidationError(f"line {lineno}: field '{where}referent_idx' must be int or null")
        exprs.append(
            ExpressionRecord(
                tokens=list(tokens),
                referent_idx=ref,
                template=er.get("template"),
                context_idx=er.get("context_idx"),
            )
        )
    try:
        return Scene(image_id, float(width), float(height), regions, exprs)
    except ValidationError as exc:
        raise ValidationError(f"line {lineno}: {exc}") from None


def save_scenes(scenes: Iterable[Scene], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenes:
            fh.write(json.dumps(_scene_to_record(s)) + "\n")


def load_scenes(path, visual_lookup=None) -> list[Scene]:
    """Read a JSON-lines scene file; blank lines are skipped."""
    scenes = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            scenes.append(_scene_from_record(rec, lineno, visual_lookup))
    return scenes


# ---------------------------------------------------------------------------
# Sidecar binary visual storage
# ---------------------------------------------------------------------------
# The .bin file is a flat run of little-endian float32 values.  The index file
# is tab separated text: image_id, region_index, byte offset, dim.


def save_scenes_sidecar(scenes: Sequence[Scene], jsonl_path, bin_path, index_path) -> None:
    offset = 0
    with open(bin_path, "wb") as fb, open(index_path, "w", encoding="utf-8") as fi, open(
        jsonl_path, "w", encoding="utf-8"
    ) as fj:
        for s in scenes:
            for k, r in enumerate(s.regions):
                data = np.asarray(r.visual, dtype="<f4").tobytes()
                fb.write(data)
                fi.write(f"{s.image_id}\t{k}\t{offset}\t{len(r.visual)}\n")
                offset += len(data)
            fj.write(json.dumps(_scene_to_record(s, include_visual=False)) + "\n")


class SidecarVisuals:
    """Lookup of region visual vectors from a float32 sidecar file."""

    def __init__(self, bin_path, index_path):
        self._data = Path(bin_path).read_bytes()
        self._index: dict[tuple[str, int], tuple[int, int]] = {}
        with open(index_path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 4:
                    raise ValidationError(f"index line {lineno}: expected 4 fields")
                image_id, k, off, dim = parts
                self._index[(image_id, int(k))] = (int(off), int(dim))

    def __call__(self, image_id: str, region_index: int) -> np.ndarray:
        try:
            off, dim = self._index[(image_id, region_index)]
        except KeyError:
            raise ValidationError(
                f"no sidecar entry for ({image_id}, {region_index})"
            ) from None
        end = off + 4 * dim
        if end > len(self._data):
            raise ValidationError(f"sidecar entry for ({image_id}, {region_index}) truncated")
        vals = struct.unpack(f"<{dim}f", self._data[off:end])
        return np.asarray(vals, dtype=np.float64)


def load_scenes_sidecar(jsonl_path, bin_path, index_path) -> list[Scene]:
    return load_scenes(jsonl_path, visual_lookup=SidecarVisuals(bin_path, index_path))
