import numpy as np
import pytest

import tape
from geometry import (Box, MomentMultipliers, PointSet, clamp_box, clamp_box_value, center_distance,
                      convert_minmax, convert_minmax_value, convert_moment, convert_moment_value,
                      giou, giou_value, iou, iou_value)


def random_boxes(rng, n, scale=20.0):
    corners = rng.uniform(0.0, scale, size=(n, 2, 2))
    lo = corners.min(axis=1)
    hi = corners.max(axis=1)
    return np.concatenate([lo, hi], axis=-1)


class TestBox:

    def test_rejects_swapped_corners(self):
        with pytest.raises(ValueError, match="order"):
            Box(2.0, 0.0, 1.0, 1.0)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="finite"):
            Box(0.0, 0.0, float("nan"), 1.0)

    def test_properties(self):
        b = Box.from_xywh(1.0, 2.0, 4.0, 6.0)
        assert b.to_list() == [1.0, 2.0, 5.0, 8.0]
        assert b.area == 24.0
        assert b.center == (3.0, 5.0)
        assert b.to_xywh() == [1.0, 2.0, 4.0, 6.0]

    def test_point_set_needs_two_points(self):
        with pytest.raises(ValueError):
            PointSet(np.zeros((1, 2)))


class TestOverlap:

    def test_iou_hand_case(self):
        assert abs(iou(Box(0, 0, 2, 2), Box(1, 1, 3, 3)) - 1.0 / 7.0) < 1e-12

    def test_giou_hand_case(self):
        assert abs(giou(Box(0, 0, 1, 1), Box(2, 2, 3, 3)) + 7.0 / 9.0) < 1e-12

    def test_identity_and_disjoint(self):
        b = Box(1.0, 2.0, 4.0, 7.0)
        assert iou(b, b) == 1.0
        assert giou(b, b) == 1.0
        assert iou(Box(0, 0, 1, 1), Box(5, 5, 6, 6)) == 0.0

    def test_zero_union_gives_zero(self):
        point = Box(1.0, 1.0, 1.0, 1.0)
        assert iou(point, point) == 0.0

    def test_giou_equals_iou_when_hull_is_union(self):
        outer = Box(0, 0, 4, 4)
        inner = Box(1, 1, 2, 2)
        assert giou(outer, inner) == pytest.approx(iou(outer, inner))

    def test_random_pairs_respect_bounds(self):
        rng = np.random.default_rng(5)
        a = random_boxes(rng, 10_000)
        b = random_boxes(rng, 10_000)
        ious = iou(a, b)
        gious = giou(a, b)
        assert np.all((ious >= 0.0) & (ious <= 1.0))
        assert np.all(gious <= ious + 1e-12)
        assert np.all((gious > -1.0) & (gious <= 1.0))
        np.testing.assert_allclose(ious, iou(b, a), atol=1e-15)

    def test_tape_versions_agree(self):
        rng = np.random.default_rng(6)
        a = random_boxes(rng, 50) + np.array([0, 0, 0.5, 0.5])
        gt = Box(3.0, 4.0, 15.0, 12.0)
        np.testing.assert_allclose(iou_value(tape.constant(a), gt).data, iou(a, gt), atol=1e-12)
        np.testing.assert_allclose(giou_value(tape.constant(a), gt).data, giou(a, gt), atol=1e-12)

    def test_center_distance(self):
        assert center_distance((0.0, 0.0), Box(2, 3, 4, 5)) == pytest.approx(5.0)
        assert center_distance((3.0, 4.0), Box(2, 3, 4, 5)) == 0.0


class TestConverters:

    def test_minmax_hand_case(self):
        pts = PointSet(np.array([[1.0, 2.0], [3.0, 0.0], [2.0, 5.0]]))
        np.testing.assert_array_equal(convert_minmax(pts), [1.0, 0.0, 3.0, 5.0])

    def test_minmax_identical_points(self):
        np.testing.assert_array_equal(convert_minmax(np.full((4, 2), 2.5)), [2.5, 2.5, 2.5, 2.5])

    def test_moment_unit_square(self):
        pts = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
        np.testing.assert_allclose(convert_moment(pts), [0.0, 0.0, 1.0, 1.0], atol=1e-15)

    def test_moment_floor_on_coincident_points(self):
        box = convert_moment(np.full((3, 2), 4.0))
        assert box[2] - box[0] == pytest.approx(2e-6)

    def test_moment_multiplier_scales_width_only(self):
        pts = np.array([[0.0, 0.0], [2.0, 1.0], [1.0, 3.0]])
        base = convert_moment(pts)
        doubled = convert_moment(pts, MomentMultipliers(log_lambda_x=np.log(2.0)))
        assert doubled[2] - doubled[0] == pytest.approx(2.0 * (base[2] - base[0]))
        assert doubled[3] - doubled[1] == pytest.approx(base[3] - base[1])

    def test_minmax_is_tight_and_equivariant(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            pts = rng.normal(scale=5.0, size=(9, 2))
            shift = rng.normal(scale=10.0, size=2)
            box = convert_minmax(pts)
            assert np.all(pts[:, 0] >= box[0]) and np.all(pts[:, 0] <= box[2])
            assert np.any(pts[:, 0] == box[0]) and np.any(pts[:, 1] == box[3])
            np.testing.assert_allclose(convert_minmax(pts + shift), box + np.tile(shift, 2), atol=1e-9)
            np.testing.assert_allclose(convert_moment(pts + shift), convert_moment(pts) + np.tile(shift, 2),
                                       atol=1e-9)

    def test_tape_converters_match(self):
        rng = np.random.default_rng(8)
        pts = rng.normal(size=(5, 9, 2))
        np.testing.assert_array_equal(convert_minmax_value(tape.constant(pts)).data, convert_minmax(pts))
        log_lambda = np.array([0.3, -0.2])
        expected = convert_moment(pts, MomentMultipliers(*log_lambda))
        np.testing.assert_allclose(convert_moment_value(tape.constant(pts), tape.constant(log_lambda)).data,
                                   expected, atol=1e-12)

    def test_minmax_gradient_hits_first_extreme(self):
        pts = tape.parameter(np.array([[0.0, 0.0], [0.0, 1.0], [2.0, 1.0]]))
        store = tape.backward(convert_minmax_value(pts)[0])
        np.testing.assert_array_equal(store.of(pts), [[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]])


class TestClamp:

    def test_clamp_partially_outside(self):
        assert clamp_box(Box(-5, -5, 3, 3), Box(0, 0, 10, 10)) == Box(0, 0, 3, 3)

    def test_clamp_inside_unchanged(self):
        b = Box(1, 2, 3, 4)
        assert clamp_box(b, Box(0, 0, 10, 10)) == b

    def test_clamp_outside_collapses_to_edge(self):
        assert clamp_box(Box(12, 1, 15, 4), Box(0, 0, 10, 10)) == Box(10, 1, 10, 4)

    def test_clamp_value_matches(self):
        boxes = np.array([[-5.0, -5.0, 3.0, 3.0], [12.0, 1.0, 15.0, 4.0]])
        bounds = Box(0, 0, 10, 10)
        np.testing.assert_array_equal(clamp_box_value(tape.constant(boxes), bounds).data,
                                      clamp_box(boxes, bounds))
