"""Direct-formula reference implementations used by the tests.

Everything here works element by element with the ``math`` module so that
it shares no code path with the vectorized package implementation. The
Monte-Carlo IoU uses numpy only to draw and test sample points.
"""
from __future__ import annotations

import math

import numpy as np


def softmax_row(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def kl_row(teacher, student):
    p = softmax_row(teacher)
    q = softmax_row(student)
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


def feature_distance(F_M, F_S, mask):
    c = len(F_M)
    total, cells = 0.0, 0
    for i, row in enumerate(mask):
        for j, m in enumerate(row):
            if m:
                cells += 1
                for k in range(c):
                    total += (F_M[k][i][j] - F_S[k][i][j]) ** 2
    return total / max(1, c * cells)


def anchor_alignment(logits_M, logits_S, fg, bg, lam_fg=1.0, lam_bg=0.05):
    n = len(fg)
    if n == 0:
        return 0.0
    fg_sum = sum(kl_row(logits_S[i], logits_M[i]) for i in fg)
    bg_sum = sum(kl_row(logits_S[i], logits_M[i]) for i in bg)
    return lam_fg * fg_sum / n + lam_bg * bg_sum / n


def sig(x):
    return 1 / (1 + math.exp(-x))


def smooth_l1(d):
    a = abs(d)
    return 0.5 * a * a if a < 1 else a - 0.5


def clipped(p, eps=1e-4):
    return min(max(p, eps), 1 - eps)


def object_scores(pairs, scores_M, scores_S):
    if not pairs:
        return 0.0
    return sum(smooth_l1(clipped(sig(scores_M[m])) - clipped(sig(scores_S[s])))
               for m, s in pairs) / len(pairs)


def object_boxes(pairs, res_M, res_S):
    if not pairs:
        return 0.0
    return sum(sum((a - b) ** 2 for a, b in zip(res_M[m], res_S[s])) for m, s in pairs) / len(pairs)


def focal(p_t, alpha_t, gamma=2.0):
    return -alpha_t * (1 - p_t) ** gamma * math.log(p_t)


def depth_focal(logits, targets, alpha=0.25, gamma=2.0):
    """``logits`` is a flat list of pixel rows, ``targets`` their bins."""
    total = sum(focal(softmax_row(row)[t], alpha, gamma) for row, t in zip(logits, targets))
    return total / len(logits)


def bce(z, t):
    p = sig(z)
    return -(t * math.log(p) + (1 - t) * math.log(1 - p))


def detection(cls, labels, res, target_res, dirs, target_dir, alpha=0.25, gamma=2.0,
              lam_cls=1.0, lam_box=2.0, lam_dir=0.2):
    n_pos = max(1, sum(1 for v in labels if v > 0))
    l_cls = l_box = l_dir = 0.0
    for i, lab in enumerate(labels):
        if lab < 0:
            continue
        a = alpha if lab > 0 else 1 - alpha
        l_cls += focal(softmax_row(cls[i])[lab], a, gamma)
        if lab > 0:
            l_box += sum(smooth_l1(p - t) for p, t in zip(res[i], target_res[i]))
            l_dir += bce(dirs[i], target_dir[i])
    return (lam_cls * l_cls + lam_box * l_box + lam_dir * l_dir) / n_pos


def axis_aligned_iou(a, b):
    """Closed-form BEV IoU of two boxes with yaw 0 (``x, y, z, l, w, h, yaw``)."""
    ox = max(0.0, min(a[0] + a[3] / 2, b[0] + b[3] / 2) - max(a[0] - a[3] / 2, b[0] - b[3] / 2))
    oy = max(0.0, min(a[1] + a[4] / 2, b[1] + b[4] / 2) - max(a[1] - a[4] / 2, b[1] - b[4] / 2))
    inter = ox * oy
    return inter / (a[3] * a[4] + b[3] * b[4] - inter)


def _inside(points, box):
    dx, dy = points[:, 0] - box[0], points[:, 1] - box[1]
    c, s = math.cos(box[6]), math.sin(box[6])
    return (np.abs(dx * c + dy * s) <= box[3] / 2) & (np.abs(-dx * s + dy * c) <= box[4] / 2)


def monte_carlo_iou(a, b, samples, rng):
    """BEV IoU estimated from uniform samples over a square covering both boxes."""
    r = max(math.hypot(a[3], a[4]), math.hypot(b[3], b[4])) / 2
    lo = np.minimum(a[:2], b[:2]) - r
    hi = np.maximum(a[:2], b[:2]) + r
    pts = lo + (hi - lo) * rng.random((samples, 2))
    ia, ib = _inside(pts, a), _inside(pts, b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def ap40_staircase(ranked_tp, n_gt, points=40):
    """AP from a ranked TP/FP list, tabulated the way one would in a spreadsheet.

    One row per rank with cumulative TP, precision and recall; then for each
    recall point the best precision among rows reaching that recall.
    """
    rows, tp = [], 0
    for rank, hit in enumerate(ranked_tp, start=1):
        tp += int(hit)
        rows.append((tp / rank, tp / n_gt))
    total = 0.0
    for k in range(1, points + 1):
        reach = [p for p, r in rows if r >= k / points - 1e-12]
        total += max(reach) if reach else 0.0
    return total / points
