import math

import numpy as np
import pytest

from stereoguide.anchors import assign_targets, generate_anchors
from stereoguide.boxes import iou_bev
from stereoguide.geometry import BevGridSpec

SPEC = BevGridSpec((0.0, 8.0), (-4.0, 4.0), (-3.0, 1.0), 1.0)


def test_anchor_counts_and_indexing():
    one = generate_anchors(BevGridSpec((0, 1), (0, 1), (-3, 1), 1.0))
    assert len(one) == 2
    np.testing.assert_array_equal(one.anchors[0, :3], one.anchors[1, :3])
    grid = generate_anchors(BevGridSpec((0, 2), (0, 3), (-3, 1), 1.0))
    assert len(grid) == 12
    np.testing.assert_allclose(grid.anchors[0, :3], [0.5, 0.5, -1.0])
    for n in range(len(grid)):
        i, j, k = grid.unravel(n)
        assert grid.index(i, j, k) == n
        np.testing.assert_allclose(grid.anchors[n, :2], [i + 0.5, j + 0.5])
        assert grid.anchors[n, 6] == [0.0, math.pi / 2][k]
    with pytest.raises(ValueError):
        generate_anchors(SPEC, rotations=())


def test_no_ground_truth_makes_everything_background():
    a = assign_targets(generate_anchors(SPEC), [])
    assert len(a.fg) == 0 and len(a.bg) == len(a.labels)


def test_ground_truth_equal_to_an_anchor():
    grid = generate_anchors(SPEC)
    n = grid.index(3, 4, 1)
    a = assign_targets(grid, [grid.anchors[n]])
    assert n in a.fg
    np.testing.assert_allclose(a.target_res[n], 0, atol=1e-12)
    assert a.target_dir[n] == 1
    res, bit, cls = a.targets[n]
    assert cls == 0 and bit == 1


def test_forcing_rule_at_half_iou():
    grid = generate_anchors(BevGridSpec((0, 1), (0, 1), (-3, 1), 1.0), rotations=(0.0,))
    anchor = grid.anchors[0]
    # a box with identical footprint width and doubled length overlaps at exactly 0.5
    gt = anchor.copy()
    gt[3] *= 2
    gt[0] += anchor[3] / 2
    assert iou_bev(anchor, gt) == pytest.approx(0.5)
    a = assign_targets(grid, [gt])
    assert list(a.fg) == [0]  # argmax anchor forced to foreground
    two = generate_anchors(BevGridSpec((0, 1), (0, 2), (-3, 1), 1.0), rotations=(0.0,))
    gt2 = gt.copy()
    gt2[1] = 1.5
    # anchor 1 is the best match for gt2; anchor 0 sits at 0.5 to gt alone
    labels = assign_targets(two, [gt, gt2], thresholds={"Car": (0.9, 0.45)}).labels
    assert list(labels) == [1, 1]
    labels = assign_targets(two, [gt2], thresholds={"Car": (0.9, 0.2)}).labels
    assert labels[1] == 1 and labels[0] == 0


def test_partition_and_determinism():
    rng = np.random.default_rng(0)
    grid = generate_anchors(SPEC)
    for _ in range(20):
        gts = [np.array([rng.uniform(0, 8), rng.uniform(-4, 4), -1, 3.9, 1.6, 1.56, rng.uniform(-3, 3)])
               for _ in range(rng.integers(1, 4))]
        a = assign_targets(grid, gts)
        parts = np.concatenate([a.fg, a.bg, a.ignored])
        assert len(parts) == len(grid) and len(np.unique(parts)) == len(grid)
        for g in range(len(gts)):
            if max(iou_bev(gts[g], anc) for anc in grid.anchors) > 0:
                assert np.any(a.matched_gt[a.fg] == g) or len(gts) > 1
        b = assign_targets(grid, gts)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.target_res, b.target_res)


def test_direction_bit_target():
    grid = generate_anchors(SPEC)
    n = grid.index(4, 4, 0)
    box = grid.anchors[n].copy()
    box[6] = -0.2
    a = assign_targets(grid, [box])
    assert a.labels[n] == 1 and a.target_dir[n] == 0
    box[6] = math.pi
    assert assign_targets(grid, [box]).target_dir[n] == 1
