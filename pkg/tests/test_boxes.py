import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from stereoguide.boxes import (Box3D, bev_corners, decode_boxes, decode_residual, direction_bit, encode_boxes,
                               encode_folded, encode_residual, iou_3d, iou_3d_matrix, iou_bev, iou_bev_matrix,
                               nms_bev, normalize_angle)
from stereoguide.errors import LengthMismatch


def random_boxes(rng, n, yaw=True):
    return np.column_stack([
        rng.uniform(-3, 3, (n, 2)), rng.uniform(-0.5, 0.5, n), rng.uniform(0.5, 5, (n, 3)),
        rng.uniform(-math.pi, math.pi, n) if yaw else np.zeros(n),
    ])


def test_axis_aligned_iou_matches_closed_form():
    rng = np.random.default_rng(1)
    a, b = random_boxes(rng, 1000, yaw=False), random_boxes(rng, 1000, yaw=False)
    got = np.array([iou_bev(x, y) for x, y in zip(a, b)])
    expected = np.array([oracles.axis_aligned_iou(x, y) for x, y in zip(a, b)])
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)
    assert np.count_nonzero(expected) > 300


def test_rotated_iou_matches_monte_carlo():
    rng = np.random.default_rng(2)
    a, b = random_boxes(rng, 200), random_boxes(rng, 200)
    b[:, :2] = a[:, :2] + rng.normal(0, 1.0, (200, 2))
    for x, y in zip(a, b):
        assert abs(iou_bev(x, y) - oracles.monte_carlo_iou(x, y, 10**6, rng)) < 5e-3


def test_rotated_square_case():
    square = Box3D(0, 0, 0, 1, 1, 1, 0.0)
    turned = Box3D(0, 0, 0, 1, 1, 1, math.pi / 4)
    assert iou_bev(square, turned) == pytest.approx(0.7071, abs=5e-3)
    assert iou_bev(square, turned) == pytest.approx(math.sqrt(2) / 2, abs=1e-12)


def test_matrix_path_agrees_with_scalar_path():
    rng = np.random.default_rng(3)
    a, b = random_boxes(rng, 12), random_boxes(rng, 9)
    np.testing.assert_allclose(iou_bev_matrix(a, b), [[iou_bev(x, y) for y in b] for x in a], atol=1e-12)
    np.testing.assert_allclose(iou_3d_matrix(a, b), [[iou_3d(x, y) for y in b] for x in a], atol=1e-12)


def test_group_labels_block_cross_frame_pairs():
    box = np.array([[0, 0, 0, 4, 2, 1.5, 0.0]])
    both = np.repeat(box, 2, axis=0)
    out = iou_bev_matrix(both, both, groups=(np.array([0, 1]), np.array([0, 1])))
    np.testing.assert_allclose(out, np.eye(2))


def test_iou_3d_uses_height_overlap():
    a = Box3D(0, 0, 0, 2, 2, 2)
    b = Box3D(0, 0, 1, 2, 2, 2)  # half the height overlaps
    assert iou_3d(a, b) == pytest.approx(1 / 3)
    assert iou_bev(a, b) == pytest.approx(1.0)
    assert iou_3d(a, Box3D(0, 0, 5, 2, 2, 2)) == 0.0


def test_touching_and_disjoint_boxes():
    a = Box3D(0, 0, 0, 2, 2, 1)
    assert iou_bev(a, Box3D(2, 0, 0, 2, 2, 1)) == 0.0
    assert iou_bev(a, Box3D(10, 10, 0, 2, 2, 1)) == 0.0


box_st = st.tuples(
    st.floats(-5, 5), st.floats(-5, 5), st.floats(-1, 1),
    st.floats(0.2, 6), st.floats(0.2, 6), st.floats(0.2, 3), st.floats(-math.pi, math.pi),
).map(lambda t: np.array(t))


@settings(max_examples=200, deadline=None)
@given(box_st, box_st)
def test_iou_symmetric_and_bounded(a, b):
    ab, ba = iou_bev(a, b), iou_bev(b, a)
    assert 0.0 <= ab <= 1.0
    assert ab == pytest.approx(ba, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(box_st, st.floats(-20, 20), st.floats(-20, 20))
def test_self_iou_and_translation_invariance(a, dx, dy):
    assert iou_bev(a, a) == pytest.approx(1.0, abs=1e-9)
    b = a.copy()
    b[3] *= 0.7
    moved_a, moved_b = a.copy(), b.copy()
    for box in (moved_a, moved_b):
        box[0] += dx
        box[1] += dy
    assert iou_bev(moved_a, moved_b) == pytest.approx(iou_bev(a, b), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(box_st)
def test_half_turn_keeps_footprint(a):
    b = a.copy()
    b[6] += math.pi
    assert iou_bev(a, b) == pytest.approx(1.0, abs=1e-9)


# residual coding --------------------------------------------------------------

def test_residual_round_trip():
    rng = np.random.default_rng(4)
    gt, anchors = random_boxes(rng, 50), random_boxes(rng, 50)
    np.testing.assert_allclose(decode_boxes(encode_boxes(gt, anchors), anchors), gt, atol=1e-12)
    box = decode_residual(encode_residual(gt[0], anchors[0]), anchors[0])
    np.testing.assert_allclose(box.as_array(), gt[0], atol=1e-12)


def test_residual_of_anchor_itself_is_zero():
    a = np.array([1.0, 2.0, -1.0, 3.9, 1.6, 1.56, 0.3])
    np.testing.assert_allclose(encode_boxes(a, a), np.zeros(7), atol=1e-15)


def test_folded_yaw_stays_in_half_period():
    rng = np.random.default_rng(5)
    gt, anchors = random_boxes(rng, 200), random_boxes(rng, 200)
    res = encode_folded(gt, anchors)
    assert np.all((res[:, 6] >= -math.pi / 2) & (res[:, 6] < math.pi / 2))
    np.testing.assert_allclose(res[:, :6], encode_boxes(gt, anchors)[:, :6])
    flipped = decode_boxes(res, anchors)
    np.testing.assert_allclose([iou_bev(x, y) for x, y in zip(flipped, gt)], 1.0, atol=1e-9)


def test_direction_bit():
    np.testing.assert_array_equal(direction_bit([-3.0, -0.1, 0.0, 0.1, math.pi]), [0, 0, 0, 1, 1])


def test_box_validation_and_angles():
    with pytest.raises(ValueError):
        Box3D(0, 0, 0, 0, 1, 1)
    assert Box3D(0, 0, 0, 1, 1, 1, 3 * math.pi / 2).yaw == pytest.approx(-math.pi / 2)
    assert normalize_angle(1.0) == 1.0
    corners = bev_corners(np.array([0, 0, 0, 4, 2, 1, 0.0]))
    np.testing.assert_allclose(corners, [[2, 1], [-2, 1], [-2, -1], [2, -1]])


# NMS ----------------------------------------------------------------------------

def test_nms_keeps_best_of_overlapping_boxes():
    boxes = np.array([[0, 0, 0, 4, 2, 1.5, 0], [0.2, 0, 0, 4, 2, 1.5, 0], [10, 0, 0, 4, 2, 1.5, 0]])
    assert nms_bev(boxes, [0.5, 0.9, 0.3], 0.5) == [1, 2]
    assert nms_bev(boxes, [0.5, 0.5, 0.5], 0.5) == [0, 2]
    assert nms_bev(boxes, [0.5, 0.9, 0.3], 0.99) == [1, 0, 2]


def test_nms_length_check():
    with pytest.raises(LengthMismatch):
        nms_bev(np.zeros((2, 7)) + [0, 0, 0, 1, 1, 1, 0], [1.0], 0.5)
