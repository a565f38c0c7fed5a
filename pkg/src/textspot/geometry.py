"""Control-point geometry: Bezier curves, polygons, boxes, IoU.

Text instances carry N control points in normalized [0,1] image
coordinates (y down). Polygon mode stores 16 vertices clockwise from
the top-left; Bezier mode stores 8 points read as two cubics, points
1-4 the top side left to right and points 5-8 the bottom side right to
left, so sampling both sides in order traces the clockwise contour.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from shapely.geometry import Polygon as _ShapelyPolygon

POLYGON_POINTS = 16
BEZIER_POINTS = 8


@dataclass(frozen=True)
class ControlPointSet:
    """N control points plus their interpretation mode."""

    points: np.ndarray
    mode: str  # "polygon" | "bezier"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"control points must be [N,2], got {pts.shape}")
        if self.mode not in ("polygon", "bezier"):
            raise ValueError(f"unknown control point mode '{self.mode}'")
        if self.mode == "bezier" and pts.shape[0] != BEZIER_POINTS:
            raise ValueError(f"bezier mode requires {BEZIER_POINTS} points, got {pts.shape[0]}")
        object.__setattr__(self, "points", pts)

    @property
    def n_points(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in center/size form, normalized coordinates."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")

    def corners(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    def as_array(self):
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


def bernstein(i: int, n: int, t: float) -> float:
    """Bernstein basis value C(n,i) * t^i * (1-t)^(n-i)."""
    if not 0 <= i <= n:
        raise ValueError(f"bernstein index i={i} outside 0..{n}")
    return math.comb(n, i) * t ** i * (1.0 - t) ** (n - i)


def bezier_eval(control_points, t):
    """Point on the cubic through 4 control points at parameter t.

    Also accepts a vector of t values, returning [len(t), 2].
    """
    cp = np.asarray(control_points, dtype=np.float64)
    if cp.shape != (4, 2):
        raise ValueError(f"expected 4 control points, got shape {cp.shape}")
    t = np.asarray(t, dtype=np.float64)
    basis = np.stack([
        (1 - t) ** 3,
        3 * t * (1 - t) ** 2,
        3 * t ** 2 * (1 - t),
        t ** 3,
    ], axis=-1)
    return basis @ cp


def bezier_to_polygon(cps: ControlPointSet, samples_per_side: int = 8) -> np.ndarray:
    """Sample both cubics at uniform t, preserving the clockwise contour."""
    if cps.mode != "bezier":
        raise ValueError(f"bezier_to_polygon requires bezier mode, got '{cps.mode}'")
    if samples_per_side < 2:
        raise ValueError("need at least 2 samples per side")
    ts = np.linspace(0.0, 1.0, samples_per_side)
    top = bezier_eval(cps.points[:4], ts)
    bottom = bezier_eval(cps.points[4:], ts)
    return np.concatenate([top, bottom], axis=0)


def polygon_area(vertices) -> float:
    """Absolute shoelace area of a simple polygon."""
    v = np.asarray(vertices, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 3:
        raise ValueError(f"polygon needs >= 3 vertices, got shape {v.shape}")
    x, y = v[:, 0], v[:, 1]
    return abs(float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))) / 2.0


def _signed_area2(vertices: np.ndarray) -> float:
    x, y = vertices[:, 0], vertices[:, 1]
    return float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _shapely(vertices):
    poly = _ShapelyPolygon(np.asarray(vertices, dtype=np.float64))
    if not poly.is_valid:
        # predicted contours may self-touch early in training; normalize
        poly = poly.buffer(0)
    return poly


def polygon_iou(a, b) -> float:
    """Intersection over union of two polygons via exact clipping.

    A degenerate (zero-area) union is defined as IoU 0.
    """
    pa, pb = _shapely(a), _shapely(b)
    inter = pa.intersection(pb).area
    union = pa.area + pb.area - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def bbox_iou_giou(a: BBox, b: BBox):
    """(IoU, generalized IoU) for two boxes; gIoU in (-1, 1], gIoU <= IoU."""
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    iou = inter / union
    cw = max(ax1, bx1) - min(ax0, bx0)
    ch = max(ay1, by1) - min(ay0, by0)
    enclosing = cw * ch
    giou = iou - (enclosing - union) / enclosing
    return iou, giou


MIN_BOX_SIDE = 1e-4


def control_points_to_bbox(points) -> BBox:
    """Axis-aligned min/max box of the points in center/size form.

    Degenerate (zero-extent) sides are inflated to MIN_BOX_SIDE.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        raise ValueError("no control points")
    pts = pts.reshape(-1, 2)
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    w = max(x1 - x0, MIN_BOX_SIDE)
    h = max(y1 - y0, MIN_BOX_SIDE)
    return BBox((x0 + x1) / 2, (y0 + y1) / 2, w, h)


def _proper_intersect(p1, p2, p3, p4):
    """True if segments p1p2 and p3p4 cross at an interior point."""
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if v == 0 else (1 if v > 0 else -1)

    o1, o2 = orient(p1, p2, p3), orient(p1, p2, p4)
    o3, o4 = orient(p3, p4, p1), orient(p3, p4, p2)
    return o1 != o2 and o3 != o4 and 0 not in (o1, o2, o3, o4)


def is_simple(vertices) -> bool:
    """True if no two non-adjacent edges properly intersect."""
    v = np.asarray(vertices, dtype=np.float64)
    n = v.shape[0]
    for i in range(n):
        a1, a2 = v[i], v[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            if _proper_intersect(a1, a2, v[j], v[(j + 1) % n]):
                return False
    return True


def canonicalize_order(vertices) -> np.ndarray:
    """Clockwise vertex cycle (image coords, y down) from the top-left.

    The start vertex minimizes x + y, ties broken by smaller y then
    smaller x. Idempotent, and invariant to rotations of the cycle.
    """
    v = np.asarray(vertices, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 3:
        raise ValueError(f"polygon needs >= 3 vertices, got shape {v.shape}")
    if not is_simple(v):
        raise ValueError("cannot canonicalize a self-intersecting polygon")
    # y-down clockwise <=> positive signed shoelace sum
    if _signed_area2(v) < 0:
        v = v[::-1]
    start = min(range(v.shape[0]),
                key=lambda i: (v[i, 0] + v[i, 1], v[i, 1], v[i, 0]))
    return np.roll(v, -start, axis=0)
