"""Geometry oracle tests: Bernstein/Bezier, areas, IoU, canonical order."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import de_casteljau, monte_carlo_area, random_star_polygon, raster_iou
from textspot import geometry as geo


class TestBernstein:
    def test_endpoints(self):
        assert geo.bernstein(0, 3, 0.0) == 1.0
        for i in (1, 2, 3):
            assert geo.bernstein(i, 3, 0.0) == 0.0

    def test_direct_value(self):
        # C(3,1) * 0.5 * 0.25
        assert geo.bernstein(1, 3, 0.5) == pytest.approx(0.375, abs=1e-15)

    def test_index_out_of_range(self):
        with pytest.raises(ValueError):
            geo.bernstein(4, 3, 0.5)

    @given(st.integers(min_value=1, max_value=8),
           st.floats(min_value=0.0, max_value=1.0, allow_nan=False))
    @settings(max_examples=200, deadline=None)
    def test_partition_of_unity(self, n, t):
        total = sum(geo.bernstein(i, n, t) for i in range(n + 1))
        assert abs(total - 1.0) <= 1e-12


class TestBezierEval:
    def test_endpoint_interpolation(self):
        rng = np.random.default_rng(0)
        cp = rng.uniform(0, 1, size=(4, 2))
        np.testing.assert_allclose(geo.bezier_eval(cp, 0.0), cp[0], atol=1e-15)
        np.testing.assert_allclose(geo.bezier_eval(cp, 1.0), cp[3], atol=1e-15)

    def test_collinear_midpoint(self):
        cp = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
        np.testing.assert_allclose(geo.bezier_eval(cp, 0.5), [1.5, 0.0], atol=1e-15)

    def test_matches_de_casteljau(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            cp = rng.uniform(-2, 2, size=(4, 2))
            t = rng.uniform(0, 1)
            np.testing.assert_allclose(geo.bezier_eval(cp, t),
                                       de_casteljau(cp, t), atol=1e-12)


def straight_sided_bezier(quad):
    """Bezier control points whose two cubics are the quad's top/bottom edges."""
    tl, tr, br, bl = [np.asarray(p, dtype=np.float64) for p in quad]
    def cubic(a, b):
        return np.stack([a, a + (b - a) / 3, a + 2 * (b - a) / 3, b])
    pts = np.concatenate([cubic(tl, tr), cubic(br, bl)])
    return geo.ControlPointSet(pts, "bezier")


class TestBezierToPolygon:
    def test_straight_sides_give_rectangle(self):
        quad = [(0.1, 0.2), (0.9, 0.2), (0.9, 0.5), (0.1, 0.5)]
        poly = geo.bezier_to_polygon(straight_sided_bezier(quad))
        assert poly.shape == (16, 2)
        assert poly[:, 0].min() == pytest.approx(0.1)
        assert poly[:, 0].max() == pytest.approx(0.9)
        assert poly[:, 1].min() == pytest.approx(0.2)
        assert poly[:, 1].max() == pytest.approx(0.5)
        # every vertex sits on the rectangle boundary
        on_h = np.isclose(poly[:, 1], 0.2) | np.isclose(poly[:, 1], 0.5)
        assert on_h.all()

    def test_samples_inside_side_convex_hull(self):
        from scipy.spatial import Delaunay
        rng = np.random.default_rng(3)
        for _ in range(20):
            pts = rng.uniform(0, 1, size=(8, 2))
            poly = geo.bezier_to_polygon(geo.ControlPointSet(pts, "bezier"))
            for side, samples in ((pts[:4], poly[:8]), (pts[4:], poly[8:])):
                tri = Delaunay(side + rng.normal(scale=1e-12, size=side.shape))
                pad = 1e-9 * (samples - side.mean(axis=0))
                assert (tri.find_simplex(samples - pad) >= 0).all()

    def test_round_trip_area_matches_quad_shoelace(self):
        quad = np.array([(0.1, 0.1), (0.8, 0.25), (0.75, 0.6), (0.15, 0.5)])
        poly = geo.bezier_to_polygon(straight_sided_bezier(quad))
        assert geo.polygon_area(poly) == pytest.approx(geo.polygon_area(quad), abs=1e-9)

    def test_mode_mismatch(self):
        cps = geo.ControlPointSet(np.zeros((16, 2)) + np.arange(16)[:, None] * 0.01,
                                  "polygon")
        with pytest.raises(ValueError, match="bezier"):
            geo.bezier_to_polygon(cps)


class TestPolygonArea:
    def test_unit_square(self):
        assert geo.polygon_area([(0, 0), (1, 0), (1, 1), (0, 1)]) == 1.0

    def test_degenerate_collinear(self):
        assert geo.polygon_area([(0, 0), (1, 1), (2, 2)]) == 0.0

    def test_too_few_vertices(self):
        with pytest.raises(ValueError):
            geo.polygon_area([(0, 0), (1, 1)])

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(5)
        for trial in range(3):
            poly = random_star_polygon(rng, 8)
            area = geo.polygon_area(poly)
            mc, box_area = monte_carlo_area(poly, n_samples=1_000_000, seed=trial)
            assert abs(area - mc) <= 2e-3 * box_area


class TestPolygonIoU:
    def test_self_iou_is_one(self):
        poly = random_star_polygon(np.random.default_rng(7), 10)
        assert geo.polygon_iou(poly, poly) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint_is_zero(self):
        a = [(0, 0), (1, 0), (1, 1), (0, 1)]
        b = [(2, 0), (3, 0), (3, 1), (2, 1)]
        assert geo.polygon_iou(a, b) == 0.0

    def test_half_shifted_square(self):
        a = [(0, 0), (1, 0), (1, 1), (0, 1)]
        b = [(0.5, 0), (1.5, 0), (1.5, 1), (0.5, 1)]
        assert geo.polygon_iou(a, b) == pytest.approx(1 / 3, abs=1e-12)

    def test_against_raster_oracle(self):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(100):
            a = random_star_polygon(rng, int(rng.integers(3, 12)))
            shift = rng.uniform(-0.3, 0.3, size=2)
            b = random_star_polygon(rng, int(rng.integers(3, 12))) + shift
            exact = geo.polygon_iou(a, b)
            approx = raster_iou(a, b, resolution=512)
            worst = max(worst, abs(exact - approx))
            assert abs(exact - approx) <= 2e-3
            assert 0.0 <= exact <= 1.0
            assert geo.polygon_iou(b, a) == pytest.approx(exact, abs=1e-12)


class TestBoxIoUGIoU:
    def test_identical(self):
        b = geo.BBox(0.5, 0.5, 0.2, 0.4)
        iou, giou = geo.bbox_iou_giou(b, b)
        assert iou == pytest.approx(1.0, abs=1e-12)
        assert giou == pytest.approx(1.0, abs=1e-12)

    def test_corner_boxes(self):
        # corner-format [0,0,1,1] vs [2,0,3,1]: enclosing 3, union 2
        a = geo.BBox(0.5, 0.5, 1.0, 1.0)
        b = geo.BBox(2.5, 0.5, 1.0, 1.0)
        iou, giou = geo.bbox_iou_giou(a, b)
        assert iou == 0.0
        assert giou == pytest.approx(-1 / 3, abs=1e-12)

    def test_nested_box_giou_equals_iou(self):
        outer = geo.BBox(0.5, 0.5, 0.8, 0.8)
        inner = geo.BBox(0.5, 0.5, 0.4, 0.4)
        iou, giou = geo.bbox_iou_giou(outer, inner)
        assert giou == pytest.approx(iou, abs=1e-12)

    @given(st.lists(st.floats(min_value=0.05, max_value=0.95), min_size=8, max_size=8))
    @settings(max_examples=200, deadline=None)
    def test_giou_never_exceeds_iou(self, vals):
        a = geo.BBox(vals[0], vals[1], max(vals[2], 0.05), max(vals[3], 0.05))
        b = geo.BBox(vals[4], vals[5], max(vals[6], 0.05), max(vals[7], 0.05))
        iou, giou = geo.bbox_iou_giou(a, b)
        assert giou <= iou + 1e-12
        assert -1.0 < giou <= 1.0


class TestControlPointsToBBox:
    def test_two_points(self):
        box = geo.control_points_to_bbox([(0.2, 0.2), (0.8, 0.4)])
        assert (box.cx, box.cy, box.w, box.h) == pytest.approx((0.5, 0.3, 0.6, 0.2))

    def test_degenerate_inflated(self):
        box = geo.control_points_to_bbox([(0.5, 0.5), (0.5, 0.5)])
        assert box.w == geo.MIN_BOX_SIDE and box.h == geo.MIN_BOX_SIDE

    def test_contains_all_points(self):
        rng = np.random.default_rng(13)
        pts = rng.uniform(0, 1, size=(16, 2))
        x0, y0, x1, y1 = geo.control_points_to_bbox(pts).corners()
        assert (pts[:, 0] >= x0 - 1e-12).all() and (pts[:, 0] <= x1 + 1e-12).all()
        assert (pts[:, 1] >= y0 - 1e-12).all() and (pts[:, 1] <= y1 + 1e-12).all()


class TestCanonicalizeOrder:
    def test_ccw_square_flipped(self):
        ccw = [(0, 0), (0, 1), (1, 1), (1, 0)]  # counter-clockwise on screen
        out = geo.canonicalize_order(ccw)
        np.testing.assert_array_equal(out, [(0, 0), (1, 0), (1, 1), (0, 1)])

    def test_idempotent(self):
        poly = random_star_polygon(np.random.default_rng(17), 9)
        once = geo.canonicalize_order(poly)
        np.testing.assert_array_equal(geo.canonicalize_order(once), once)

    def test_rotation_invariant(self):
        poly = geo.canonicalize_order(random_star_polygon(np.random.default_rng(19), 8))
        for k in range(1, 8):
            rolled = np.roll(poly, k, axis=0)
            np.testing.assert_allclose(geo.canonicalize_order(rolled), poly)

    def test_self_intersecting_rejected(self):
        bowtie = [(0, 0), (1, 1), (1, 0), (0, 1)]
        with pytest.raises(ValueError, match="self-intersecting"):
            geo.canonicalize_order(bowtie)

    @given(st.integers(min_value=0, max_value=11), st.booleans(),
           st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=100, deadline=None)
    def test_rotation_and_reversal_invariant_property(self, roll, flip, seed):
        poly = random_star_polygon(np.random.default_rng(seed), 7)
        base = geo.canonicalize_order(poly)
        variant = np.roll(poly[::-1] if flip else poly, roll % 7, axis=0)
        np.testing.assert_allclose(geo.canonicalize_order(variant), base)
