"""Cross-branch pairing of confident predictions by best BEV IoU.

Pairs built here feed the object-level alignment losses. A monocular box and
the stereo box it should be aligned with often come from different anchors,
so pairing by anchor identity loses them; pairing by overlap does not.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import as_box_array, iou_bev_matrix

DEFAULT_SCORE_THRESH = 0.1
DEFAULT_MIN_IOU = 0.25


@dataclass
class MatchedPairSet:
    """Mono/stereo prediction index pairs with their BEV IoU.

    Each mono index occurs at most once. A stereo index may occur several
    times because every mono box independently picks its best partner.
    """

    mono_idx: np.ndarray
    stereo_idx: np.ndarray
    ious: np.ndarray
    min_iou: float = DEFAULT_MIN_IOU

    def __len__(self) -> int:
        return len(self.mono_idx)

    @property
    def pairs(self) -> list[tuple[int, int, float]]:
        return [(int(m), int(s), float(v)) for m, s, v in zip(self.mono_idx, self.stereo_idx, self.ious)]

    def as_array(self) -> np.ndarray:
        return np.stack([self.mono_idx, self.stereo_idx], axis=1) if len(self) else np.zeros((0, 2), np.int64)

    @classmethod
    def empty(cls, min_iou: float = DEFAULT_MIN_IOU) -> "MatchedPairSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), np.zeros(0), min_iou)


def filter_predictions(preds, score_thresh: float = DEFAULT_SCORE_THRESH) -> list[int]:
    """Indices of predictions scoring at least ``score_thresh``, in input order.

    ``preds`` may be PredictionRecords or bare scores.
    """
    if not 0.0 <= score_thresh <= 1.0:
        raise ValueError("score_thresh must lie in [0, 1]")
    scores = [getattr(p, "score", p) for p in preds]
    return [i for i, s in enumerate(scores) if s >= score_thresh]


def match_by_iou(mono, stereo, min_iou: float = DEFAULT_MIN_IOU, groups=None) -> MatchedPairSet:
    """Pair each mono box with the stereo box of highest BEV IoU.

    A pair is kept when that IoU reaches ``min_iou``. Equal IoUs go to the
    lower stereo index (``argmax`` returns the first maximum). Passing
    ``groups=(mono_frame, stereo_frame)`` matches several frames in one call
    without pairing boxes across frames.
    """
    if not 0.0 <= min_iou <= 1.0:
        raise ValueError("min_iou must lie in [0, 1]")
    mono, stereo = as_box_array(mono), as_box_array(stereo)
    if len(mono) == 0 or len(stereo) == 0:
        return MatchedPairSet.empty(min_iou)
    iou = iou_bev_matrix(mono, stereo, groups)
    best = iou.argmax(axis=1)
    best_iou = iou[np.arange(len(mono)), best]
    keep = np.flatnonzero((best_iou >= min_iou) & (best_iou > 0))
    return MatchedPairSet(keep.astype(np.int64), best[keep].astype(np.int64), best_iou[keep], min_iou)


def match_same_anchor(mono_anchor_ids, stereo_anchor_ids) -> MatchedPairSet:
    """Pair predictions only when both came from the same anchor.

    This is the naive alternative to :func:`match_by_iou`, kept for
    comparison. IoU values are not computed and are reported as NaN.
    """
    mono_anchor_ids = np.asarray(mono_anchor_ids, dtype=np.int64)
    first = {}
    for s, a in enumerate(np.asarray(stereo_anchor_ids, dtype=np.int64)):
        first.setdefault(int(a), s)
    pairs = [(m, first[int(a)]) for m, a in enumerate(mono_anchor_ids) if int(a) in first]
    if not pairs:
        return MatchedPairSet.empty(0.0)
    arr = np.array(pairs, dtype=np.int64)
    return MatchedPairSet(arr[:, 0], arr[:, 1], np.full(len(arr), np.nan), 0.0)


def neighbor_anchor_scenario():
    """Two branches detecting one car from adjacent anchors.

    The stereo branch decodes its box from the anchor whose centre sits on
    the car; the monocular branch decodes a slightly shifted box from the
    next anchor along x. Both anchors are foreground. Returns a dict with
    the grid, the ground truth, both predictions (as box arrays) and the
    anchor each came from.
    """
    from .anchors import generate_anchors
    from .boxes import decode_boxes, encode_boxes
    from .geometry import BevGridSpec

    spec = BevGridSpec(x_range=(0.0, 8.0), y_range=(-4.0, 4.0), z_range=(-3.0, 1.0), cell=0.8)
    grid = generate_anchors(spec, rotations=(0.0,))
    centre = grid.anchors[grid.index(5, 4, 0)]
    gt = centre.copy()
    gt[[3, 4, 5]] = (4.0, 1.7, 1.5)
    stereo_anchor = grid.index(5, 4, 0)
    mono_anchor = grid.index(6, 4, 0)
    stereo_box = gt.copy()
    stereo_box[0] += 0.1
    mono_box = gt.copy()
    mono_box[0] += 0.5
    mono_box[6] = 0.05
    # residuals against the source anchors: what each head would output
    res_S = encode_boxes(stereo_box[None], grid.anchors[[stereo_anchor]])
    res_M = encode_boxes(mono_box[None], grid.anchors[[mono_anchor]])
    return {
        "grid": grid,
        "gt": gt,
        "stereo_boxes": decode_boxes(res_S, grid.anchors[[stereo_anchor]]),
        "mono_boxes": decode_boxes(res_M, grid.anchors[[mono_anchor]]),
        "stereo_anchor_ids": np.array([stereo_anchor]),
        "mono_anchor_ids": np.array([mono_anchor]),
        "res_S": res_S,
        "res_M": res_M,
    }
