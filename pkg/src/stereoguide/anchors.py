"""Dense anchor grid and foreground/background target assignment."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import as_box_array, direction_bit, encode_folded, iou_bev_matrix
from .geometry import BevGridSpec

CAR_SIZE = (3.9, 1.6, 1.56)
DEFAULT_ROTATIONS = (0.0, np.pi / 2)
DEFAULT_THRESHOLDS = {"Car": (0.6, 0.45), "Pedestrian": (0.5, 0.35), "Cyclist": (0.5, 0.35)}


@dataclass
class AnchorGrid:
    """Anchors tiled over every BEV cell.

    Flat index ``n = (i * W + j) * K + k`` with ``k = size * n_rot + rotation``.
    """

    spec: BevGridSpec
    sizes: list
    rotations: list
    classes: list
    anchors: np.ndarray = field(repr=False)

    @property
    def K(self) -> int:
        return len(self.sizes) * len(self.rotations)

    def __len__(self) -> int:
        return len(self.anchors)

    def index(self, i: int, j: int, k: int) -> int:
        return (i * self.spec.W + j) * self.K + k

    def unravel(self, n: int):
        cell, k = divmod(int(n), self.K)
        i, j = divmod(cell, self.spec.W)
        return i, j, k

    @property
    def class_index(self) -> np.ndarray:
        """Class id of every anchor (the size index)."""
        per_cell = np.repeat(np.arange(len(self.sizes)), len(self.rotations))
        return np.tile(per_cell, self.spec.H * self.spec.W)


def generate_anchors(spec: BevGridSpec, sizes=(CAR_SIZE,), rotations=DEFAULT_ROTATIONS,
                     classes=None) -> AnchorGrid:
    sizes = [tuple(float(v) for v in s) for s in sizes]
    rotations = [float(r) for r in rotations]
    if not sizes or not rotations:
        raise ValueError("need at least one anchor size and one rotation")
    classes = list(classes) if classes is not None else ["Car", "Pedestrian", "Cyclist"][:len(sizes)]
    if len(classes) != len(sizes):
        raise ValueError("one class name per anchor size")
    centers = spec.cell_centers().reshape(-1, 2)
    z = (spec.z_range[0] + spec.z_range[1]) / 2
    per_cell = np.array([[0.0, 0.0, z, l, w, h, r] for (l, w, h) in sizes for r in rotations])
    anchors = np.repeat(per_cell[None], len(centers), axis=0)
    anchors[:, :, 0] = centers[:, None, 0]
    anchors[:, :, 1] = centers[:, None, 1]
    return AnchorGrid(spec, sizes, rotations, classes, anchors.reshape(-1, 7))


@dataclass
class Assignment:
    """Per-anchor labels: -1 ignored, 0 background, ``1 + class id`` foreground.

    Target arrays are dense over all anchors; rows of non-foreground anchors
    are zero.
    """

    labels: np.ndarray
    target_res: np.ndarray
    target_dir: np.ndarray
    matched_gt: np.ndarray
    max_iou: np.ndarray = field(repr=False, default=None)

    @property
    def fg(self) -> np.ndarray:
        return np.flatnonzero(self.labels > 0)

    @property
    def bg(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 0)

    @property
    def ignored(self) -> np.ndarray:
        return np.flatnonzero(self.labels < 0)

    @property
    def num_pos(self) -> int:
        return int((self.labels > 0).sum())

    @property
    def targets(self) -> dict:
        return {int(n): (self.target_res[n], int(self.target_dir[n]), int(self.labels[n] - 1))
                for n in self.fg}


def _gt_boxes_and_classes(gts, grid: AnchorGrid, gt_classes=None):
    boxes, classes = [], []
    for n, g in enumerate(gts):
        name = getattr(getattr(g, "category", None), "value", None)
        if gt_classes is not None:
            name = gt_classes[n]
        elif name is None:
            name = grid.classes[0]
        if name not in grid.classes:
            continue  # DontCare and classes without anchors never become targets
        boxes.append(as_box_array([g])[0])
        classes.append(grid.classes.index(name))
    return as_box_array(boxes), np.array(classes, dtype=np.int64)


def assign_targets(grid: AnchorGrid, gts, gt_classes=None, thresholds=None) -> Assignment:
    """Label anchors by their best BEV IoU with same-class ground truth.

    ``thresholds`` maps class name to ``(pos, neg)``. Each ground truth
    additionally forces its highest-IoU anchor (lowest index on ties) to
    foreground when that IoU is positive.
    """
    thresholds = {**DEFAULT_THRESHOLDS, **(thresholds or {})}
    n = len(grid)
    boxes, gcls = _gt_boxes_and_classes(gts, grid, gt_classes)
    acls = grid.class_index
    iou = np.zeros((n, len(boxes)))
    for c in np.unique(gcls):
        a_idx = np.flatnonzero(acls == c)
        g_idx = np.flatnonzero(gcls == c)
        iou[np.ix_(a_idx, g_idx)] = iou_bev_matrix(grid.anchors[a_idx], boxes[g_idx])

    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    max_iou = np.zeros(n)
    if len(boxes):
        matched = iou.argmax(axis=1)
        max_iou = iou[np.arange(n), matched]
        pos = np.array([thresholds.get(grid.classes[c], (0.6, 0.45))[0] for c in acls])
        neg = np.array([thresholds.get(grid.classes[c], (0.6, 0.45))[1] for c in acls])
        labels[:] = -1
        labels[max_iou <= neg] = 0
        fg = max_iou >= pos
        labels[fg] = 1 + acls[fg]
        for g in range(len(boxes)):
            best = int(np.argmax(iou[:, g]))
            if iou[best, g] > 0:
                labels[best] = 1 + acls[best]
                matched[best] = g
        matched[labels <= 0] = -1

    target_res = np.zeros((n, 7))
    target_dir = np.zeros(n, dtype=np.int64)
    fg_idx = np.flatnonzero(labels > 0)
    if len(fg_idx):
        gt = boxes[matched[fg_idx]]
        target_res[fg_idx] = encode_folded(gt, grid.anchors[fg_idx])
        target_dir[fg_idx] = direction_bit(gt[:, 6])
    return Assignment(labels, target_res, target_dir, matched, max_iou)
