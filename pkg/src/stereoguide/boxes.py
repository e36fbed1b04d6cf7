"""Oriented 3D boxes: residual coding, rotated IoU and NMS.

Boxes live in the BEV frame: x forward, y left, z up. ``(x, y, z)`` is the
geometric center, ``(l, w, h)`` the extents along the heading, across it and
vertically, and ``yaw`` the heading angle measured from +x towards +y.

Array form is ``(..., 7)`` ordered ``x, y, z, l, w, h, yaw``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import LengthMismatch


def normalize_angle(a: float) -> float:
    """Wrap an angle into [-pi, pi]; values already inside are untouched."""
    if -math.pi <= a <= math.pi:
        return a
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a < 0:
        a += 2.0 * math.pi
    return a - math.pi


def wrap_half_period(a):
    """Wrap angles into [-pi/2, pi/2) (boxes are symmetric under yaw + pi)."""
    return np.mod(np.asarray(a, dtype=np.float64) + np.pi / 2, np.pi) - np.pi / 2


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    yaw: float = 0.0

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box dimensions must be positive, got {self.dims}")
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))

    @property
    def center(self):
        return (self.x, self.y, self.z)

    @property
    def dims(self):
        return (self.l, self.w, self.h)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.l, self.w, self.h, self.yaw])

    @classmethod
    def from_array(cls, arr) -> "Box3D":
        return cls(*(float(v) for v in arr[:7]))

    def corners_bev(self) -> np.ndarray:
        return bev_corners(self.as_array())

    def volume(self) -> float:
        return self.l * self.w * self.h


def as_box_array(boxes) -> np.ndarray:
    """Coerce a Box3D, a sequence of Box3D or an array-like into ``(N, 7)``."""
    if isinstance(boxes, Box3D):
        return boxes.as_array()[None]
    if isinstance(boxes, np.ndarray):
        return np.atleast_2d(boxes.astype(np.float64, copy=False))
    boxes = list(boxes)
    if not boxes:
        return np.zeros((0, 7))
    return np.stack([_arr(b) for b in boxes])


def _arr(box) -> np.ndarray:
    if isinstance(box, Box3D):
        return box.as_array()
    if hasattr(box, "to_box3d"):
        return box.to_box3d().as_array()
    return np.asarray(box, dtype=np.float64)


def bev_corners(boxes) -> np.ndarray:
    """Footprint corners, counter-clockwise, shape ``(..., 4, 2)``."""
    b = np.asarray(boxes, dtype=np.float64)
    c, s = np.cos(b[..., 6]), np.sin(b[..., 6])
    hl, hw = b[..., 3] / 2, b[..., 4] / 2
    local = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])
    lx = local[:, 0] * hl[..., None]
    ly = local[:, 1] * hw[..., None]
    x = b[..., 0, None] + lx * c[..., None] - ly * s[..., None]
    y = b[..., 1, None] + lx * s[..., None] + ly * c[..., None]
    return np.stack([x, y], axis=-1)


# ---------------------------------------------------------------------------
# residual coding

def encode_residual(gt, anchor) -> np.ndarray:
    """Normalized offsets of ``gt`` relative to ``anchor`` (7-vector)."""
    g, a = _arr(gt), _arr(anchor)
    return encode_boxes(g, a)


def decode_residual(res, anchor) -> Box3D:
    """Exact inverse of :func:`encode_residual`."""
    return Box3D.from_array(decode_boxes(np.asarray(res, dtype=np.float64), _arr(anchor)))


def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Batched :func:`encode_residual` over broadcastable ``(..., 7)`` arrays."""
    g = np.asarray(gt, dtype=np.float64)
    a = np.asarray(anchors, dtype=np.float64)
    diag = np.sqrt(a[..., 3] ** 2 + a[..., 4] ** 2)
    return np.stack([
        (g[..., 0] - a[..., 0]) / diag,
        (g[..., 1] - a[..., 1]) / diag,
        (g[..., 2] - a[..., 2]) / a[..., 5],
        np.log(g[..., 3] / a[..., 3]),
        np.log(g[..., 4] / a[..., 4]),
        np.log(g[..., 5] / a[..., 5]),
        g[..., 6] - a[..., 6],
    ], axis=-1)


def decode_boxes(res: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    r = np.asarray(res, dtype=np.float64)
    a = np.asarray(anchors, dtype=np.float64)
    diag = np.sqrt(a[..., 3] ** 2 + a[..., 4] ** 2)
    return np.stack([
        r[..., 0] * diag + a[..., 0],
        r[..., 1] * diag + a[..., 1],
        r[..., 2] * a[..., 5] + a[..., 2],
        np.exp(r[..., 3]) * a[..., 3],
        np.exp(r[..., 4]) * a[..., 4],
        np.exp(r[..., 5]) * a[..., 5],
        r[..., 6] + a[..., 6],
    ], axis=-1)


def encode_folded(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Encode with the yaw offset folded into [-pi/2, pi/2).

    The footprint is unchanged by a half turn, so regression only has to
    resolve the heading modulo pi; the direction classifier restores the rest.
    """
    res = encode_boxes(gt, anchors)
    res[..., 6] = wrap_half_period(res[..., 6])
    return res


def direction_bit(yaw) -> np.ndarray:
    """1 where the heading lies in (0, pi], else 0."""
    y = np.asarray(yaw, dtype=np.float64)
    return ((y > 0) & (y <= np.pi)).astype(np.int64)


# ---------------------------------------------------------------------------
# rotated IoU, scalar reference path

def _clip(subject, edge_a, edge_b):
    ex, ey = edge_b[0] - edge_a[0], edge_b[1] - edge_a[1]

    def side(p):
        return ex * (p[1] - edge_a[1]) - ey * (p[0] - edge_a[0])

    out = []
    n = len(subject)
    for i in range(n):
        p, q = subject[i], subject[(i + 1) % n]
        sp, sq = side(p), side(q)
        if sq >= 0:
            if sp < 0:
                t = sp / (sp - sq)
                out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
            out.append(q)
        elif sp >= 0:
            t = sp / (sp - sq)
            out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out


def _shoelace(poly) -> float:
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return abs(acc) / 2.0


def bev_intersection_area(a, b) -> float:
    """Area of the intersection of two box footprints (Sutherland-Hodgman)."""
    pa = [tuple(p) for p in bev_corners(_arr(a)).tolist()]
    pb = [tuple(p) for p in bev_corners(_arr(b)).tolist()]
    poly = pa
    for i in range(4):
        poly = _clip(poly, pb[i], pb[(i + 1) % 4])
        if not poly:
            return 0.0
    return _shoelace(poly)


def iou_bev(a, b) -> float:
    a, b = _arr(a), _arr(b)
    inter = bev_intersection_area(a, b)
    union = a[3] * a[4] + b[3] * b[4] - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def _vertical_overlap(a, b):
    lo = np.maximum(a[..., 2] - a[..., 5] / 2, b[..., 2] - b[..., 5] / 2)
    hi = np.minimum(a[..., 2] + a[..., 5] / 2, b[..., 2] + b[..., 5] / 2)
    return np.maximum(hi - lo, 0.0)


def iou_3d(a, b) -> float:
    a, b = _arr(a), _arr(b)
    dz = float(_vertical_overlap(a, b))
    if dz <= 0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    union = a[3] * a[4] * a[5] + b[3] * b[4] * b[5] - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


# ---------------------------------------------------------------------------
# rotated IoU, vectorized path

def _next_vertex(poly, count):
    """Each polygon's vertices shifted by one, wrapping at ``count``."""
    k, v, _ = poly.shape
    idx = np.arange(v)
    nxt = np.where(idx[None, :] + 1 < count[:, None], idx[None, :] + 1, 0)
    return poly[np.arange(k)[:, None], nxt], idx[None, :] < count[:, None]


def _clip_batch(poly, count, e0, e1):
    """One Sutherland-Hodgman pass for K polygons against K half-planes."""
    k, v, _ = poly.shape
    q, valid = _next_vertex(poly, count)
    ex = (e1 - e0)[:, None, :]
    sp = ex[..., 0] * (poly[..., 1] - e0[:, None, 1]) - ex[..., 1] * (poly[..., 0] - e0[:, None, 0])
    sq = ex[..., 0] * (q[..., 1] - e0[:, None, 1]) - ex[..., 1] * (q[..., 0] - e0[:, None, 0])
    p_in, q_in = sp >= 0, sq >= 0
    cross = valid & (p_in != q_in)
    denom = np.where(cross, sp - sq, 1.0)
    t = np.where(cross, sp / denom, 0.0)
    inter = poly + t[..., None] * (q - poly)
    cand = np.stack([inter, q], axis=2).reshape(k, 2 * v, 2)
    keep = np.stack([cross, valid & q_in], axis=2).reshape(k, 2 * v)
    # compact the kept candidates to the front of each row, in order
    width = min(2 * v, 8)
    slot = np.cumsum(keep, axis=1) - 1
    rows, cols = np.nonzero(keep & (slot < width))
    out = np.zeros((k, width, 2))
    out[rows, slot[rows, cols]] = cand[rows, cols]
    return out, np.minimum(slot[:, -1] + 1, width)


def _area_batch(poly, count):
    q, valid = _next_vertex(poly, count)
    cr = poly[..., 0] * q[..., 1] - q[..., 0] * poly[..., 1]
    area = np.abs(np.where(valid, cr, 0.0).sum(axis=1)) / 2
    return np.where(count >= 3, area, 0.0)


def bev_intersection_areas(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise-aligned intersection areas for ``(K, 7)`` box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 7)
    if len(a) == 0:
        return np.zeros(0)
    poly = bev_corners(a)
    count = np.full(len(a), 4)
    clip = bev_corners(b)
    for i in range(4):
        poly, count = _clip_batch(poly, count, clip[:, i], clip[:, (i + 1) % 4])
    return _area_batch(poly, count)


def _half_extents(boxes):
    """Half sizes of each box's axis-aligned BEV bounding rectangle."""
    c, s = np.abs(np.cos(boxes[:, 6])), np.abs(np.sin(boxes[:, 6]))
    l, w = boxes[:, 3] / 2, boxes[:, 4] / 2
    return l * c + w * s, l * s + w * c


def _candidate_pairs(a, b, groups=None):
    """Pairs whose bounding rectangles overlap (slightly padded)."""
    ax, ay = _half_extents(a)
    bx, by = _half_extents(b)
    pad = 1e-9 * (1.0 + np.abs(a[:, None, :2]).max(axis=2))
    near = ((np.abs(a[:, None, 0] - b[None, :, 0]) <= ax[:, None] + bx[None, :] + pad)
            & (np.abs(a[:, None, 1] - b[None, :, 1]) <= ay[:, None] + by[None, :] + pad))
    if groups is not None:
        ga, gb = (np.asarray(g) for g in groups)
        near &= ga[:, None] == gb[None, :]
    return np.nonzero(near)


def iou_bev_matrix(a, b, groups=None) -> np.ndarray:
    """``(N, M)`` BEV IoU between two box sets.

    ``groups=(ga, gb)`` labels each box (e.g. with its frame); boxes with
    different labels get IoU 0 without being intersected.
    """
    a, b = as_box_array(a), as_box_array(b)
    out = np.zeros((len(a), len(b)))
    if len(a) == 0 or len(b) == 0:
        return out
    ia, ib = _candidate_pairs(a, b, groups)
    if len(ia) == 0:
        return out
    inter = bev_intersection_areas(a[ia], b[ib])
    union = a[ia, 3] * a[ia, 4] + b[ib, 3] * b[ib, 4] - inter
    out[ia, ib] = np.clip(inter / union, 0.0, 1.0)
    return out


def _self_iou_bev(boxes) -> np.ndarray:
    """Symmetric BEV IoU matrix of one box set, intersecting each pair once."""
    out = np.zeros((len(boxes), len(boxes)))
    ia, ib = _candidate_pairs(boxes, boxes)
    upper = ia < ib
    ia, ib = ia[upper], ib[upper]
    if len(ia):
        inter = bev_intersection_areas(boxes[ia], boxes[ib])
        union = boxes[ia, 3] * boxes[ia, 4] + boxes[ib, 3] * boxes[ib, 4] - inter
        out[ia, ib] = out[ib, ia] = np.clip(inter / union, 0.0, 1.0)
    np.fill_diagonal(out, 1.0)
    return out


def iou_3d_matrix(a, b) -> np.ndarray:
    a, b = as_box_array(a), as_box_array(b)
    out = np.zeros((len(a), len(b)))
    if len(a) == 0 or len(b) == 0:
        return out
    ia, ib = _candidate_pairs(a, b)
    if len(ia) == 0:
        return out
    dz = _vertical_overlap(a[ia], b[ib])
    inter = bev_intersection_areas(a[ia], b[ib]) * dz
    union = np.prod(a[ia, 3:6], axis=1) + np.prod(b[ib, 3:6], axis=1) - inter
    out[ia, ib] = np.clip(inter / union, 0.0, 1.0)
    return out


def nms_bev(boxes, scores: Sequence[float], iou_thresh: float) -> list[int]:
    """Greedy NMS; equal scores are resolved by the lower original index."""
    boxes = as_box_array(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    if len(boxes) != len(scores):
        raise LengthMismatch(f"{len(boxes)} boxes vs {len(scores)} scores")
    order = np.argsort(-scores, kind="stable")
    ious = _self_iou_bev(boxes)
    keep: list[int] = []
    for i in order:
        if all(ious[i, j] <= iou_thresh for j in keep):
            keep.append(int(i))
    return keep
