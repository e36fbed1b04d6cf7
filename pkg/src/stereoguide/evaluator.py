"""KITTI-style average precision for 3D and BEV box criteria.

Ground truth is grouped by frame id, predictions carry their frame id.
Difficulty buckets are nested the way the KITTI devkit nests them: an
object that qualifies as Easy also counts towards Moderate and Hard.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from pathlib import Path

import numpy as np

from .boxes import as_box_array, iou_3d_matrix, iou_bev_matrix
from .data_io import Category, parse_kitti_label, parse_kitti_predictions


class Criterion(str, Enum):
    AP_3D = "AP_3D"
    AP_BEV = "AP_BEV"


class Difficulty(str, Enum):
    EASY = "Easy"
    MODERATE = "Moderate"
    HARD = "Hard"


# (min 2D box height in px, max occlusion level, max truncation)
DIFFICULTY_LIMITS = {
    Difficulty.EASY: (40.0, 0, 0.15),
    Difficulty.MODERATE: (25.0, 1, 0.30),
    Difficulty.HARD: (25.0, 2, 0.50),
}
DEFAULT_IOU = {Category.CAR: 0.7, Category.PEDESTRIAN: 0.5, Category.CYCLIST: 0.5}


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.7
    criterion: Criterion = Criterion.AP_3D
    recall_points: int = 40
    category: Category = Category.CAR

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must lie in (0, 1]")
        if self.recall_points < 1:
            raise ValueError("need at least one recall point")

    @classmethod
    def for_category(cls, category: Category, criterion: Criterion = Criterion.AP_3D) -> "EvalConfig":
        return cls(DEFAULT_IOU.get(category, 0.5), criterion, 40, category)


def qualifies(gt, bucket: Difficulty) -> bool:
    min_h, max_occ, max_trunc = DIFFICULTY_LIMITS[Difficulty(bucket)]
    return gt.height_px >= min_h and gt.occlusion <= max_occ and gt.truncation <= max_trunc


def difficulty_bucket(gt) -> Difficulty | None:
    """Easiest bucket the object qualifies for, or None."""
    for b in (Difficulty.EASY, Difficulty.MODERATE, Difficulty.HARD):
        if qualifies(gt, b):
            return b
    return None


def _iou(cfg: EvalConfig, a, b) -> np.ndarray:
    fn = iou_3d_matrix if cfg.criterion == Criterion.AP_3D else iou_bev_matrix
    return fn(as_box_array(a), as_box_array(b))


def _overlaps_dontcare(pred, dontcare, cfg: EvalConfig) -> bool:
    """Whether an unmatched prediction falls in a DontCare region.

    With 2D boxes on both sides this follows the devkit: more than half of
    the prediction's image box lies inside the DontCare box. Otherwise any
    positive overlap under the evaluation criterion counts.
    """
    for dc in dontcare:
        pl, pt, pr, pb = pred.bbox2d
        dl, dt, dr, db = dc.bbox2d
        area = (pr - pl) * (pb - pt)
        if area > 0 and dr > dl and db > dt:
            inter = max(0.0, min(pr, dr) - max(pl, dl)) * max(0.0, min(pb, db) - max(pt, dt))
            if inter / area > 0.5:
                return True
        elif min(dc.dims) > 0 and _iou(cfg, [pred.box], [dc.to_box3d()])[0, 0] > 0:
            return True
    return False


def match_frame(preds, gts, cfg: EvalConfig, bucket=None):
    """Label one frame's predictions as TP (1), FP (0) or discarded (-1).

    Returns ``(flags, n_gt)`` where ``flags`` follows the order of
    ``preds`` and ``n_gt`` counts the ground truth that must be found.
    """
    cat = Category(cfg.category)
    preds = [p for p in preds if Category(p.category) == cat]
    cared = [g for g in gts if g.category == cat and (bucket is None or qualifies(g, bucket))]
    # same-class objects outside the bucket may be found without penalty
    skipped = [g for g in gts if g.category == cat and bucket is not None and not qualifies(g, bucket)]
    dontcare = [g for g in gts if g.is_dontcare]
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    flags = np.full(len(preds), -1, dtype=np.int64)
    if not preds:
        return flags, len(cared)
    boxes = [p.box for p in preds]
    iou_c = _iou(cfg, boxes, [g.to_box3d() for g in cared]) if cared else np.zeros((len(preds), 0))
    iou_s = _iou(cfg, boxes, [g.to_box3d() for g in skipped]) if skipped else np.zeros((len(preds), 0))
    taken = np.zeros(len(cared), dtype=bool)
    taken_s = np.zeros(len(skipped), dtype=bool)
    for i in order:
        row = np.where(taken, -1.0, iou_c[i])
        if len(row) and row.max() >= cfg.iou_threshold:
            taken[int(np.argmax(row))] = True
            flags[i] = 1
            continue
        row_s = np.where(taken_s, -1.0, iou_s[i])
        if len(row_s) and row_s.max() >= cfg.iou_threshold:
            taken_s[int(np.argmax(row_s))] = True
        elif not _overlaps_dontcare(preds[i], dontcare, cfg):
            flags[i] = 0
    return flags, len(cared)


def average_precision(scores, tp, n_gt: int, recall_points: int = 40) -> float:
    """Interpolated AP over recall points ``1/R, 2/R, ..., 1``.

    Precision at recall ``r`` is the best precision at any recall ``>= r``;
    recall points beyond the reached recall contribute 0. The curve is
    evaluated in exact rationals, so hand-computed staircases match exactly.
    """
    if n_gt == 0:
        return 0.0
    scores = np.asarray(scores, dtype=np.float64)
    tp = np.asarray(tp, dtype=bool)[np.argsort(-scores, kind="stable")]
    ranks = np.flatnonzero(tp) + 1  # rank of the m-th true positive
    # best precision reachable with at least m true positives
    best = [Fraction(0)] * (len(ranks) + 2)
    for m in range(len(ranks), 0, -1):
        best[m] = max(best[m + 1], Fraction(m, int(ranks[m - 1])))
    total = Fraction(0)
    for k in range(1, recall_points + 1):
        m = -(-k * n_gt // recall_points)  # fewest true positives with recall >= k/R
        if m <= len(ranks):
            total += best[m]
    return float(total / recall_points)


def compute_ap(preds, gts, cfg: EvalConfig = EvalConfig(), bucket=None) -> float:
    """AP of ``preds`` against ``gts`` (a mapping frame id -> objects).

    ``bucket=None`` applies no difficulty filter, which suits synthetic data
    without image-plane annotations.
    """
    by_frame: dict = {}
    for p in preds:
        by_frame.setdefault(p.frame_id, []).append(p)
    scores, tps, n_gt = [], [], 0
    for frame in sorted(set(gts) | set(by_frame)):
        frame_preds = [p for p in by_frame.get(frame, []) if Category(p.category) == Category(cfg.category)]
        flags, n = match_frame(frame_preds, gts.get(frame, []), cfg, bucket)
        n_gt += n
        keep = flags >= 0
        scores.extend(p.score for p, k in zip(frame_preds, keep) if k)
        tps.extend(flags[keep].tolist())
    return average_precision(scores, tps, n_gt, cfg.recall_points)


def evaluate(preds, gts, category: Category = Category.CAR) -> dict:
    """AP_3D and AP_BEV for each difficulty, keyed ``(criterion, bucket)``."""
    out = {}
    for crit in Criterion:
        cfg = EvalConfig.for_category(Category(category), crit)
        for b in Difficulty:
            out[(crit.value, b.value)] = compute_ap(preds, gts, cfg, b)
    return out


def load_folders(pred_dir, label_dir):
    """Read ``<frame>.txt`` label and result files from two folders."""
    gts = {p.stem: parse_kitti_label(p.read_text()) for p in sorted(Path(label_dir).glob("*.txt"))}
    preds = []
    for p in sorted(Path(pred_dir).glob("*.txt")):
        preds.extend(parse_kitti_predictions(p.read_text(), frame_id=p.stem))
    return preds, gts
