"""Procedural curved-text scenes with exact polygon/Bezier/character truth.

Each instance is a band between two cubic Bezier curves: the top curve
is drawn directly and the bottom curve is the top translated by a
constant vector, so both sides are exact cubics. Glyphs from a 10-symbol
parametric alphabet are rasterized along the midline with supersampled
coverage; all randomness derives from a single integer seed and the
rasterization uses only polynomial predicates, so regeneration is
byte-identical.

On disk a scene is ``{id}.png`` plus ``{id}.json`` with keys
``{image, width, height, instances:[{polygon, bezier, text}]}`` in
absolute pixel coordinates.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import geometry as geo
from .config import DEFAULT_ALPHABET, _strict_kwargs

GLYPH_SYMBOLS = DEFAULT_ALPHABET


def _glyph_mask(index, x, y):
    """Boolean support of glyph ``index`` on local coords in [0,1]^2 (y down)."""
    cx, cy = x - 0.5, y - 0.5
    r2 = cx * cx + cy * cy
    box = np.maximum(np.abs(cx), np.abs(cy))
    if index == 0:    # vertical bar
        return np.abs(cx) < 0.16
    if index == 1:    # horizontal bar
        return np.abs(cy) < 0.16
    if index == 2:    # ring
        return (r2 > 0.25 ** 2) & (r2 < 0.46 ** 2)
    if index == 3:    # disk
        return r2 < 0.36 ** 2
    if index == 4:    # diagonal cross
        return (np.abs(x - y) < 0.13) | (np.abs(x + y - 1.0) < 0.13)
    if index == 5:    # chevron (V)
        return np.abs(y - 0.28 - np.abs(cx)) < 0.14
    if index == 6:    # double vertical bar
        return (np.abs(x - 0.28) < 0.11) | (np.abs(x - 0.72) < 0.11)
    if index == 7:    # square frame
        return (box > 0.26) & (box < 0.44)
    if index == 8:    # solid square
        return box < 0.32
    if index == 9:    # upward wedge
        return (y > 0.15) & (y < 0.88) & (np.abs(cx) < (y - 0.15) * 0.5)
    raise ValueError(f"no glyph with index {index}")


def render_glyph(index, resolution=16):
    """Glyph coverage mask at the given square resolution (for inspection)."""
    centers = (np.arange(resolution) + 0.5) / resolution
    gx, gy = np.meshgrid(centers, centers, indexing="xy")
    return _glyph_mask(index, gx, gy)


@dataclass(frozen=True)
class TextInstance:
    """One text instance: control points in absolute pixels plus its string."""

    polygon: np.ndarray          # [16, 2] canonical clockwise
    bezier: np.ndarray | None    # [8, 2] top l->r then bottom r->l
    text: str

    def __post_init__(self):
        object.__setattr__(self, "polygon", np.asarray(self.polygon, dtype=np.float64))
        if self.bezier is not None:
            object.__setattr__(self, "bezier", np.asarray(self.bezier, dtype=np.float64))


@dataclass(frozen=True)
class Scene:
    image: np.ndarray            # [H, W, 3] uint8
    instances: tuple
    seed: int

    @property
    def height(self):
        return self.image.shape[0]

    @property
    def width(self):
        return self.image.shape[1]


@dataclass
class GenConfig:
    image_size: int = 256
    min_instances: int = 1
    max_instances: int = 3
    min_text_len: int = 2
    max_text_len: int = 8
    glyph_height_frac: tuple = (0.09, 0.17)   # relative to image size
    max_curvature: float = 0.18               # control point offset / chord length
    max_angle_deg: float = 30.0
    background_range: tuple = (150, 230)
    ink_range: tuple = (20, 80)
    noise_amp: float = 12.0
    margin_frac: float = 0.04
    max_overlap_iou: float = 0.05
    placement_retries: int = 40

    def to_dict(self):
        d = dataclasses.asdict(self)
        for key in ("glyph_height_frac", "background_range", "ink_range"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, data):
        data = _strict_kwargs(cls, dict(data), "generator config")
        for key in ("glyph_height_frac", "background_range", "ink_range"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


class PlacementError(RuntimeError):
    """No valid instance layout found within the retry budget."""


def _quantize(v, steps=4096.0):
    return np.round(v * steps) / steps


def _make_band(rng, cfg: GenConfig):
    """Top cubic + offset vector for one instance; returns (top[4,2], v[2], length)."""
    size = cfg.image_size
    height = rng.uniform(*cfg.glyph_height_frac) * size
    n_chars_cap = cfg.max_text_len
    length = rng.uniform(2.2, min(7.0, n_chars_cap)) * height
    length = min(length, 0.88 * size)
    angle = np.deg2rad(rng.uniform(-cfg.max_angle_deg, cfg.max_angle_deg))
    direction = np.array([np.cos(angle), np.sin(angle)])
    normal = np.array([-direction[1], direction[0]])  # y-down: rotate +90deg
    lo = cfg.margin_frac * size + height
    p0 = rng.uniform(lo, size - lo, size=2) - direction * length / 2
    p3 = p0 + direction * length
    c1, c2 = rng.uniform(-cfg.max_curvature, cfg.max_curvature, size=2)
    top = np.stack([
        p0,
        p0 + direction * length / 3 + normal * c1 * length,
        p0 + direction * 2 * length / 3 + normal * c2 * length,
        p3,
    ])
    band_height = height * 1.25
    v = normal * band_height
    top = top - v / 2
    return _quantize(top), _quantize(v), length, height


def _band_annotation(top, v):
    """Bezier control points (top l->r, bottom r->l) and canonical 16-gon."""
    bottom = (top + v)[::-1]
    cps = geo.ControlPointSet(np.concatenate([top, bottom]), "bezier")
    polygon = geo.canonicalize_order(geo.bezier_to_polygon(cps, 8))
    return cps.points, polygon


def _arc_length_params(top, v, n):
    """Midline parameters whose arc positions are centered per character."""
    mid = top + v / 2
    dense_t = np.linspace(0.0, 1.0, 257)
    pts = geo.bezier_eval(mid, dense_t)
    seglen = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    targets = (np.arange(n) + 0.5) / n * cum[-1]
    return np.interp(targets, cum, dense_t), mid


def _rasterize_glyphs(image, top, v, text, ink, rng, cfg):
    """Composite the glyph shapes of ``text`` along the band's midline."""
    h_img, w_img = image.shape[:2]
    n = len(text)
    ts, mid = _arc_length_params(top, v, n)
    glyph_h = np.linalg.norm(v) / 1.25
    for i, ch in enumerate(text):
        idx = GLYPH_SYMBOLS.index(ch)
        center = geo.bezier_eval(mid, ts[i])
        tangent = geo.bezier_eval(mid, min(ts[i] + 1e-4, 1.0)) - \
            geo.bezier_eval(mid, max(ts[i] - 1e-4, 0.0))
        tangent = _quantize(tangent / np.linalg.norm(tangent))
        normal = np.array([-tangent[1], tangent[0]])
        g_h = glyph_h * rng.uniform(0.88, 1.0)
        g_w = g_h * rng.uniform(0.72, 0.9)
        half_diag = 0.5 * np.hypot(g_w, g_h)
        x0 = max(int(np.floor(center[0] - half_diag)), 0)
        x1 = min(int(np.ceil(center[0] + half_diag)) + 1, w_img)
        y0 = max(int(np.floor(center[1] - half_diag)), 0)
        y1 = min(int(np.ceil(center[1] + half_diag)) + 1, h_img)
        if x1 <= x0 or y1 <= y0:
            continue
        # 2x2 supersampled coverage over the glyph's bounding box
        sub = (np.arange(2) + 0.5) / 2.0 - 0.5
        px = np.arange(x0, x1)[None, :, None, None] + sub[None, None, :, None]
        py = np.arange(y0, y1)[:, None, None, None] + sub[None, None, None, :]
        rel_x = px - center[0]
        rel_y = py - center[1]
        local_x = (rel_x * tangent[0] + rel_y * tangent[1]) / g_w + 0.5
        local_y = (rel_x * normal[0] + rel_y * normal[1]) / g_h + 0.5
        inside = (_glyph_mask(idx, local_x, local_y)
                  & (local_x >= 0) & (local_x < 1)
                  & (local_y >= 0) & (local_y < 1))
        coverage = inside.sum(axis=(2, 3)).astype(np.float64) / 4.0
        patch = image[y0:y1, x0:x1].astype(np.float64)
        image[y0:y1, x0:x1] = np.round(
            patch * (1.0 - coverage[..., None]) + ink * coverage[..., None]
        ).astype(np.uint8)


def _background(rng, cfg: GenConfig):
    size = cfg.image_size
    lo, hi = cfg.background_range
    coarse = rng.uniform(lo, hi, size=(9, 9))
    xs = np.linspace(0, 8, size)
    i0 = np.clip(xs.astype(np.int64), 0, 7)
    frac = xs - i0
    rows = coarse[i0] * (1 - frac[:, None]) + coarse[i0 + 1] * frac[:, None]
    cols = rows[:, i0] * (1 - frac[None, :]) + rows[:, i0 + 1] * frac[None, :]
    noise = rng.uniform(-cfg.noise_amp, cfg.noise_amp, size=(size, size))
    base = np.clip(cols + noise, 0, 255)
    tint = rng.uniform(-6, 6, size=3)
    return np.clip(base[..., None] + tint[None, None, :], 0, 255).astype(np.uint8)


def generate_scene(seed: int, cfg: GenConfig | None = None) -> Scene:
    """Fully seeded scene; identical seed and config give identical bytes."""
    cfg = cfg or GenConfig()
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    image = _background(rng, cfg)
    margin = cfg.margin_frac * size
    n_wanted = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))

    placed = []
    attempts = 0
    while len(placed) < n_wanted and attempts < cfg.placement_retries:
        attempts += 1
        top, v, length, height = _make_band(rng, cfg)
        try:
            bezier, polygon = _band_annotation(top, v)
        except ValueError:
            continue
        if polygon.min() < margin or polygon.max() > size - margin:
            continue
        if any(geo.polygon_iou(polygon, p.polygon) >= cfg.max_overlap_iou
               for p in placed):
            continue
        n_chars = int(rng.integers(cfg.min_text_len, cfg.max_text_len + 1))
        n_chars = min(n_chars, max(2, int(length / (height * 0.85))))
        text = "".join(GLYPH_SYMBOLS[i] for i in
                       rng.integers(0, len(GLYPH_SYMBOLS), size=n_chars))
        ink = rng.uniform(*cfg.ink_range) + rng.uniform(-4, 4, size=3)
        _rasterize_glyphs(image, top, v, text, np.clip(ink, 0, 255), rng, cfg)
        placed.append(TextInstance(polygon, bezier, text))
    if not placed:
        raise PlacementError(f"seed {seed}: no instance placed "
                             f"after {cfg.placement_retries} attempts")
    return Scene(image, tuple(placed), seed)


def generate_dataset(base_seed: int, count: int, cfg: GenConfig | None = None):
    """``count`` scenes; placement failures fall through to follow-up seeds."""
    cfg = cfg or GenConfig()
    scenes = []
    seed = int(base_seed)
    while len(scenes) < count:
        try:
            scenes.append(generate_scene(seed, cfg))
        except PlacementError:
            pass
        seed += 1
    return scenes


# -- augmentation ------------------------------------------------------

def _resize(scene: Scene, scale: float) -> Scene:
    new_w = max(32, int(round(scene.width * scale)))
    new_h = max(32, int(round(scene.height * scale)))
    sx, sy = new_w / scene.width, new_h / scene.height
    img = np.asarray(Image.fromarray(scene.image).resize((new_w, new_h),
                                                         Image.BILINEAR))
    factor = np.array([sx, sy])
    instances = tuple(
        TextInstance(inst.polygon * factor,
                     None if inst.bezier is None else inst.bezier * factor,
                     inst.text)
        for inst in scene.instances)
    return Scene(img, instances, scene.seed)


def _try_crop(scene: Scene, rng) -> Scene | None:
    h, w = scene.image.shape[:2]
    fw = rng.uniform(0.75, 1.0)
    fh = rng.uniform(max(0.5 / fw, 0.72), 1.0)
    cw, ch = int(round(w * fw)), int(round(h * fh))
    x0 = int(rng.integers(0, w - cw + 1))
    y0 = int(rng.integers(0, h - ch + 1))
    kept = []
    for inst in scene.instances:
        pts = inst.polygon
        inside = ((pts[:, 0] >= x0) & (pts[:, 0] <= x0 + cw)
                  & (pts[:, 1] >= y0) & (pts[:, 1] <= y0 + ch))
        if inside.all():
            kept.append(inst)
        elif inside.any():
            return None  # the crop boundary would cut this instance
        else:
            bx0, by0 = pts.min(axis=0)
            bx1, by1 = pts.max(axis=0)
            if bx1 > x0 and bx0 < x0 + cw and by1 > y0 and by0 < y0 + ch:
                return None
    if not kept:
        return None
    shift = np.array([x0, y0], dtype=np.float64)
    instances = tuple(
        TextInstance(inst.polygon - shift,
                     None if inst.bezier is None else inst.bezier - shift,
                     inst.text)
        for inst in kept)
    return Scene(scene.image[y0:y0 + ch, x0:x0 + cw].copy(), instances,
                 scene.seed)


def _pad_to_multiple(scene: Scene, multiple: int = 32) -> Scene:
    h, w = scene.image.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if not ph and not pw:
        return scene
    img = np.pad(scene.image, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return Scene(img, scene.instances, scene.seed)


def augment(scene: Scene, rng, resize_range=(0.75, 1.25), crop=True,
            max_attempts: int = 10) -> Scene:
    """Random isotropic resize plus an instance-aware crop.

    The crop keeps at least half the area and never cuts an instance
    boundary (instances fully outside are dropped); if no valid crop is
    found the resize-only scene is returned. The result is padded back
    to the network's 32-pixel divisibility.
    """
    scale = rng.uniform(*resize_range)
    out = _resize(scene, scale) if scale != 1.0 else scene
    if crop:
        for _ in range(max_attempts):
            cropped = _try_crop(out, rng)
            if cropped is not None:
                out = cropped
                break
    return _pad_to_multiple(out)


# -- dataset I/O -------------------------------------------------------

_INSTANCE_KEYS = {"polygon", "bezier", "text"}
_SCENE_KEYS = {"image", "width", "height", "instances"}


def write_scene(directory, scene_id: str, scene: Scene):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    Image.fromarray(scene.image).save(directory / f"{scene_id}.png")
    doc = {
        "image": f"{scene_id}.png",
        "width": scene.width,
        "height": scene.height,
        "instances": [
            {
                "polygon": [[float(x), float(y)] for x, y in inst.polygon],
                "bezier": None if inst.bezier is None else
                          [[float(x), float(y)] for x, y in inst.bezier],
                "text": inst.text,
            }
            for inst in scene.instances
        ],
    }
    with open(directory / f"{scene_id}.json", "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True)
        f.write("\n")


class DatasetFormatError(ValueError):
    """Scene JSON violates the sidecar schema."""


def read_scene(directory, scene_id: str, n_polygon_points: int = 16) -> Scene:
    directory = Path(directory)
    with open(directory / f"{scene_id}.json", "r", encoding="utf-8") as f:
        doc = json.load(f)
    if set(doc) != _SCENE_KEYS:
        raise DatasetFormatError(
            f"{scene_id}: scene keys {sorted(doc)} != {sorted(_SCENE_KEYS)}")
    image = np.asarray(Image.open(directory / doc["image"]).convert("RGB"))
    if image.shape[:2] != (doc["height"], doc["width"]):
        raise DatasetFormatError(f"{scene_id}: image size does not match metadata")
    instances = []
    for k, rec in enumerate(doc["instances"]):
        if set(rec) != _INSTANCE_KEYS:
            raise DatasetFormatError(
                f"{scene_id}[{k}]: instance keys {sorted(rec)} != "
                f"{sorted(_INSTANCE_KEYS)}")
        poly = np.asarray(rec["polygon"], dtype=np.float64)
        if poly.shape != (n_polygon_points, 2):
            raise DatasetFormatError(
                f"{scene_id}[{k}]: polygon must have {n_polygon_points} points, "
                f"got {poly.shape[0]}")
        bez = rec["bezier"]
        if bez is not None:
            bez = np.asarray(bez, dtype=np.float64)
            if bez.shape != (8, 2):
                raise DatasetFormatError(
                    f"{scene_id}[{k}]: bezier needs 8 points, got {bez.shape}")
        for pts in (poly,) if bez is None else (poly, bez):
            if (pts[:, 0].min() < 0 or pts[:, 0].max() > doc["width"]
                    or pts[:, 1].min() < 0 or pts[:, 1].max() > doc["height"]):
                raise DatasetFormatError(
                    f"{scene_id}[{k}]: coordinate out of image bounds")
        instances.append(TextInstance(poly, bez, rec["text"]))
    return Scene(image, tuple(instances), seed=-1)


def write_dataset(directory, scenes, split_meta=None):
    directory = Path(directory)
    ids = []
    for scene in scenes:
        scene_id = f"scene_{scene.seed:08d}"
        write_scene(directory, scene_id, scene)
        ids.append(scene_id)
    manifest = {"scenes": ids, "seeds": [s.seed for s in scenes]}
    if split_meta:
        manifest.update(split_meta)
    with open(directory / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return ids


def read_dataset(directory):
    directory = Path(directory)
    with open(directory / "manifest.json", "r", encoding="utf-8") as f:
        manifest = json.load(f)
    scenes = [read_scene(directory, sid) for sid in manifest["scenes"]]
    return scenes, manifest
