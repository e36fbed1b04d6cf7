"""Central-difference gradient checking and the random-instance suite.

The suite draws inputs away from two kinds of points where a relative
error says nothing about gradient correctness: kinks of piecewise losses
(smooth-L1 at ``|d| = 1``, score clipping) and near-zero gradient
components, whose finite-difference estimate is dominated by the rounding
of the loss value itself (about ``ulp(f) / h``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .anchors import Assignment
from .errors import NonFiniteValue
from .losses import (LossValueGrad, LossWeights, anchor_da_loss, chain_scores, compose_total,
                     depth_focal_loss, detection_task_loss, feature_da_loss, object_box_loss,
                     object_cls_loss, score_logits)


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_input: dict = field(default_factory=dict)
    worst: tuple = ()
    evaluations: int = 0

    def ok(self, tol: float = 1e-6) -> bool:
        return self.max_rel_err < tol


def check_gradient(fn: Callable[..., LossValueGrad], inputs: dict, h: float = 1e-6,
                   wrt=None) -> GradCheckReport:
    """Compare ``fn``'s analytic gradients with central differences.

    ``fn(**inputs)`` must return a LossValueGrad. Inputs named in ``wrt``
    (default: every input the loss reports a gradient for) are perturbed one
    coordinate at a time. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    inputs = {k: (np.array(v, dtype=np.float64) if isinstance(v, np.ndarray) else v)
              for k, v in inputs.items()}
    base = fn(**inputs)
    if not np.isfinite(base.value):
        raise NonFiniteValue("loss value at the base point is not finite")
    names = list(wrt) if wrt is not None else [k for k in inputs if k in base.grads]
    report = GradCheckReport(0.0)
    for name in names:
        x = inputs[name]
        analytic = base.grads.get(name, np.zeros_like(x))
        worst = 0.0
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + h
            hi = x[idx]
            f_plus = fn(**inputs).value
            x[idx] = orig - h
            lo = x[idx]
            f_minus = fn(**inputs).value
            x[idx] = orig
            report.evaluations += 2
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteValue(f"non-finite loss perturbing {name}{list(idx)}")
            numeric = (f_plus - f_minus) / (hi - lo)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if err > worst:
                worst = err
            if err > report.max_rel_err:
                report.max_rel_err = err
                report.worst = (name, idx, a, numeric)
        report.per_input[name] = worst
    return report


# ---------------------------------------------------------------------------
# random instances

def _away(rng, size, lo, hi):
    """Magnitudes in [lo, hi] with random sign."""
    return rng.choice([-1.0, 1.0], size=size) * rng.uniform(lo, hi, size=size)


def _separated_logits(rng, rows, classes, gap=0.05):
    """Two logit sets whose softmaxes differ by at least ``gap`` everywhere."""
    a = rng.normal(0, 1.2, (rows, classes))
    b = rng.normal(0, 1.2, (rows, classes))
    for r in range(rows):
        while np.min(np.abs(np.exp(a[r]) / np.exp(a[r]).sum()
                            - np.exp(b[r]) / np.exp(b[r]).sum())) < gap:
            b[r] = rng.normal(0, 1.2, classes)
    return a, b


def instance_feature(rng):
    c, hh, ww = 2, 4, 4
    F_M = rng.normal(0, 1, (c, hh, ww))
    F_S = F_M - _away(rng, F_M.shape, 0.1, 1.0)
    mask = (rng.random((hh, ww)) < 0.5).astype(np.uint8)
    mask[0, 0] = 1
    return (lambda F_M: feature_da_loss(F_M, F_S, mask)), {"F_M": F_M}


def instance_anchor(rng, w=LossWeights()):
    n = 10
    logits_M, logits_S = _separated_logits(rng, n, 3)
    perm = rng.permutation(n)
    fg, bg = perm[:3], perm[3:8]
    return (lambda cls_logits_M: anchor_da_loss(cls_logits_M, logits_S, fg, bg, w)), \
        {"cls_logits_M": logits_M}


def _matched_scores(rng, n_pred=6, n_pairs=4):
    scores_M = rng.uniform(-3, 3, n_pred)
    scores_S = rng.uniform(-3, 3, n_pred)
    mono = rng.choice(n_pred, n_pairs, replace=False)
    stereo = rng.integers(0, n_pred, n_pairs)
    cm = 1 / (1 + np.exp(-scores_M[mono]))
    cs = 1 / (1 + np.exp(-scores_S[stereo]))
    close = np.abs(cm - cs) < 0.05
    scores_S[stereo[close]] = -scores_M[mono[close]] - np.sign(scores_M[mono[close]] + 1e-9)
    return scores_M, scores_S, np.stack([mono, stereo], axis=1)


def instance_object_cls(rng):
    scores_M, scores_S, pairs = _matched_scores(rng)
    return (lambda scores_M: object_cls_loss(pairs, scores_M, scores_S)), {"scores_M": scores_M}


def instance_object_box(rng):
    n = 6
    mono = rng.choice(n, 4, replace=False)
    stereo = rng.integers(0, n, 4)
    res_S = rng.normal(0, 1, (n, 7))
    res_M = rng.normal(0, 1, (n, 7))
    res_M[mono] = res_S[stereo] + _away(rng, (4, 7), 0.05, 1.0)
    pairs = np.stack([mono, stereo], axis=1)
    return (lambda res_M: object_box_loss(pairs, res_M, res_S)), {"res_M": res_M}


def instance_depth(rng, w=LossWeights()):
    logits = rng.normal(0, 0.4, (2, 3, 4))
    target = rng.integers(0, 4, (2, 3))
    return (lambda depth_logits: depth_focal_loss(depth_logits, target, w)), {"depth_logits": logits}


_LABELS = np.array([1, 0, 1, 1, 0, -1])
_PAIRS = np.array([[0, 1], [2, 2], [3, 5]])


def _detection_inputs(rng):
    """Six anchors (three fg, two bg, one ignored) with moderate predictions."""
    n = len(_LABELS)
    fg = _LABELS > 0
    target_res = np.where(fg[:, None], rng.normal(0, 0.5, (n, 7)), 0.0)
    target_dir = np.where(fg, rng.integers(0, 2, n), 0)
    assign = Assignment(_LABELS.copy(), target_res, target_dir, np.where(fg, 0, -1))
    u = rng.uniform(-1, 1, n)
    cls = np.stack([np.zeros(n), u], axis=1) + rng.normal(0, 0.3, (n, 1))
    res = target_res + _away(rng, (n, 7), 0.05, 0.3)
    dirs = rng.uniform(-1.5, 1.5, n)
    depth = rng.normal(0, 0.4, (2, 2, 4))
    depth_t = rng.integers(0, 4, (2, 2))
    return assign, cls, res, dirs, depth, depth_t


def instance_detection(rng, w=LossWeights()):
    assign, cls, res, dirs, depth, depth_t = _detection_inputs(rng)

    def fn(cls_logits_M, res_M, dir_logits_M, depth_logits):
        d = depth_focal_loss(depth_logits, depth_t, w)
        return detection_task_loss(cls_logits_M, assign, res_M, dir_logits_M, d, w)

    return fn, {"cls_logits_M": cls, "res_M": res, "dir_logits_M": dirs, "depth_logits": depth}


def _teacher(rng, assign, cls, res):
    """Stereo outputs that sit closer to the labels than the student does.

    Every loss then pulls each monocular coordinate the same way, so summed
    gradient components cannot cancel towards zero.
    """
    labels = assign.labels
    u = score_logits(cls)
    push = np.where(labels > 0, 1.0, -1.0) * rng.uniform(0.3, 1.5, len(labels))
    cls_S = np.stack([np.zeros(len(labels)), u + push], axis=1)
    mono, stereo = _PAIRS[:, 0], _PAIRS[:, 1]
    sc_S = rng.uniform(-3, 3, len(labels))
    sc_S[stereo] = u[mono] + rng.uniform(0.3, 1.5, len(mono))
    res_S = rng.normal(0, 1, res.shape)
    toward = np.sign(res[mono] - assign.target_res[mono])
    res_S[stereo] = res[mono] - toward * rng.uniform(0.05, 0.3, (len(mono), 7))
    return cls_S, sc_S, res_S


def _composite(rng, which, w=LossWeights()):
    """Random inputs for one of the composed losses (mg_da/iou_ma/sgm/total)."""
    assign, cls, res, dirs, depth, depth_t = _detection_inputs(rng)
    cls_S, sc_S, res_S = _teacher(rng, assign, cls, res)
    F_M = rng.normal(0, 1, (1, 2, 3))
    F_S = F_M - _away(rng, F_M.shape, 0.2, 1.0)
    mask = np.array([[1, 0, 1], [0, 1, 0]], dtype=np.uint8)

    def fn(cls_logits_M, res_M, dir_logits_M=None, depth_logits=None, F_M=None):
        parts = {}
        if which in ("mg_da", "sgm", "total"):
            parts["feature"] = feature_da_loss(F_M, F_S, mask)
            parts["anchor"] = anchor_da_loss(cls_logits_M, cls_S, assign.fg, assign.bg, w)
        if which in ("iou_ma", "sgm", "total"):
            oc = object_cls_loss(_PAIRS, score_logits(cls_logits_M), sc_S)
            parts["object_cls"] = chain_scores(oc, cls_logits_M.shape[1])
            parts["object_box"] = object_box_loss(_PAIRS, res_M, res_S)
        if which == "total":
            d = depth_focal_loss(depth_logits, depth_t, w)
            parts["detection"] = detection_task_loss(cls_logits_M, assign, res_M, dir_logits_M, d, w)
        return compose_total(parts, w)[which]

    inputs = {"cls_logits_M": cls, "res_M": res}
    if which in ("mg_da", "sgm", "total"):
        inputs["F_M"] = F_M
    if which == "total":
        inputs.update(dir_logits_M=dirs, depth_logits=depth)
    return fn, inputs


SUITE = {
    "feature": instance_feature,
    "anchor": instance_anchor,
    "object_cls": instance_object_cls,
    "object_box": instance_object_box,
    "depth": instance_depth,
    "detection": instance_detection,
    "mg_da": lambda rng: _composite(rng, "mg_da"),
    "iou_ma": lambda rng: _composite(rng, "iou_ma"),
    "sgm": lambda rng: _composite(rng, "sgm"),
    "total": lambda rng: _composite(rng, "total"),
}


def run_suite(instances: int = 100, seed: int = 0, h: float = 1e-6, names=None) -> dict:
    """Worst relative error per loss over ``instances`` random draws."""
    out = {}
    for k, name in enumerate(names or SUITE):
        rng = np.random.default_rng([seed, k])
        worst = 0.0
        for _ in range(instances):
            fn, inputs = SUITE[name](rng)
            worst = max(worst, check_gradient(fn, inputs, h).max_rel_err)
        out[name] = worst
    return out
