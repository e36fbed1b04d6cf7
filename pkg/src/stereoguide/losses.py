"""Domain-adaptation and detection losses with analytic gradients.

Every loss returns a :class:`LossValueGrad`. Gradients are reported only for
monocular-branch inputs; stereo inputs act as a detached teacher and never
appear in ``grads``.

Gradient namespaces shared across losses so that compositions accumulate:

``F_M``            monocular BEV features ``(C, H, W)``
``cls_logits_M``   per-anchor class logits ``(N, K+1)``, column 0 = background
``scores_M``       per-prediction raw score logits ``(N,)``
``res_M``          per-anchor residuals ``(N, 7)``
``dir_logits_M``   per-anchor direction logits ``(N,)``
``depth_logits``   per-pixel depth-bin logits ``(..., D)``
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import InvalidTargetBin, ShapeMismatch

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
LOG_FLOOR = np.log(PROB_FLOOR)
SCORE_CLIP = 1e-4


@dataclass(frozen=True)
class LossWeights:
    lambda_feature: float = 0.1
    lambda_anchor: float = 1.0
    lambda_fg: float = 1.0
    lambda_bg: float = 0.05
    lambda_object: float = 0.01
    lambda_cls: float = 1.0
    lambda_box: float = 2.0
    lambda_dir: float = 0.2
    lambda_depth: float = 3.0
    alpha: float = 0.25
    gamma: float = 2.0
    bg_normalizer: str = "fg"
    feature_normalize: bool = True

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and v < 0:
                raise ValueError(f"{f.name} must be nonnegative")
        if self.bg_normalizer not in ("fg", "bg"):
            raise ValueError("bg_normalizer must be 'fg' or 'bg'")

    def replace(self, **changes) -> "LossWeights":
        return replace(self, **changes)


@dataclass
class LossValueGrad:
    value: float
    grads: dict = field(default_factory=dict)

    def scaled(self, k: float) -> "LossValueGrad":
        return LossValueGrad(k * self.value, {n: k * g for n, g in self.grads.items()})


def combine(*terms) -> LossValueGrad:
    """Weighted sum of ``(weight, LossValueGrad)`` terms; gradients add by name."""
    value = 0.0
    grads: dict = {}
    for k, lvg in terms:
        value += k * lvg.value
        for name, g in lvg.grads.items():
            kg = g if k == 1.0 else k * g
            grads[name] = grads[name] + kg if name in grads else kg
    return LossValueGrad(value, grads)


# ---------------------------------------------------------------------------
# elementwise helpers

def _reduce_last(op, x: np.ndarray) -> np.ndarray:
    # numpy reduces a short trailing axis slowly; fold a few columns by hand
    if x.shape[-1] <= 8:
        r = x[..., 0]
        for j in range(1, x.shape[-1]):
            r = op(r, x[..., j])
        return r[..., None]
    return op.reduce(x, axis=-1, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, -1)
    m = _reduce_last(np.maximum, x)
    out = x - m - np.log(_reduce_last(np.add, np.exp(x - m)))
    return np.moveaxis(out, -1, axis)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e))


def smooth_l1(d, beta: float = 1.0):
    a = np.abs(d)
    return np.where(a < beta, 0.5 * a * a / beta, a - 0.5 * beta)


def smooth_l1_grad(d, beta: float = 1.0):
    return np.where(np.abs(d) < beta, d / beta, np.sign(d))


def truncate_scores(raw):
    """Raw score logits -> probabilities clipped away from 0 and 1."""
    return np.clip(sigmoid(raw), SCORE_CLIP, 1 - SCORE_CLIP)


def _pairs(pairs):
    if hasattr(pairs, "mono_idx"):
        return np.asarray(pairs.mono_idx, dtype=np.int64), np.asarray(pairs.stereo_idx, dtype=np.int64)
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]


# ---------------------------------------------------------------------------
# feature level

def feature_da_loss(F_M, F_S, mask, normalize: bool = True) -> LossValueGrad:
    """Masked squared BEV feature distance, normalized by channels x fg cells."""
    F_M = np.asarray(F_M, dtype=np.float64)
    F_S = np.asarray(F_S, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if F_M.shape != F_S.shape or F_M.shape[1:] != m.shape:
        raise ShapeMismatch(f"F_M {F_M.shape}, F_S {F_S.shape}, mask {m.shape}")
    norm = max(1.0, F_M.shape[0] * float(m.sum())) if normalize else 1.0
    d = (F_M - F_S) * m
    return LossValueGrad(float((d * d).sum() / norm), {"F_M": 2 * d / norm})


# ---------------------------------------------------------------------------
# anchor level

def _kl_rows(logits_S, logits_M):
    """KL(softmax(S) || softmax(M)) per row and its gradient w.r.t. M."""
    lp_s = log_softmax(logits_S)
    lp_m = log_softmax(logits_M)
    p_s, p_m = np.exp(lp_s), np.exp(lp_m)
    lp_s_c = np.maximum(lp_s, LOG_FLOOR)
    live = lp_m > LOG_FLOOR
    lp_m_c = np.where(live, lp_m, LOG_FLOOR)
    kl = (p_s * (lp_s_c - lp_m_c)).sum(axis=-1)
    w = p_s * live
    grad = p_m * w.sum(axis=-1, keepdims=True) - w
    return kl, grad


def anchor_da_loss(logits_M, logits_S, fg, bg, w: LossWeights = LossWeights()) -> LossValueGrad:
    """Anchor-wise KL between teacher and student class distributions.

    Both sums are divided by the foreground count by default; with
    ``w.bg_normalizer == "bg"`` the background sum uses the background count.
    """
    logits_M = np.asarray(logits_M, dtype=np.float64)
    logits_S = np.asarray(logits_S, dtype=np.float64)
    if logits_M.shape != logits_S.shape:
        raise ShapeMismatch(f"{logits_M.shape} vs {logits_S.shape}")
    fg = np.asarray(fg, dtype=np.int64).ravel()
    bg = np.asarray(bg, dtype=np.int64).ravel()
    n_fg, n_bg = len(fg), len(bg)
    bg_norm = n_fg if w.bg_normalizer == "fg" else n_bg
    if n_fg == 0 and w.bg_normalizer == "fg":
        if n_bg:
            log.info("anchor loss: empty foreground, background term set to 0")
        return LossValueGrad(0.0, {"cls_logits_M": np.zeros_like(logits_M)})
    # one weight per anchor row; an index listed twice counts twice
    row_w = np.zeros(len(logits_M))
    if n_fg:
        np.add.at(row_w, fg, w.lambda_fg / n_fg)
    if n_bg and bg_norm:
        np.add.at(row_w, bg, w.lambda_bg / bg_norm)
    rows = np.flatnonzero(row_w)
    grad = np.zeros_like(logits_M)
    if len(rows) == 0:
        return LossValueGrad(0.0, {"cls_logits_M": grad})
    kl, g = _kl_rows(logits_S[rows], logits_M[rows])
    grad[rows] = row_w[rows, None] * g
    return LossValueGrad(float(kl @ row_w[rows]), {"cls_logits_M": grad})


# ---------------------------------------------------------------------------
# object level

def object_cls_loss(pairs, scores_M, scores_S) -> LossValueGrad:
    """Smooth-L1 between truncated matched scores of the two branches."""
    scores_M = np.asarray(scores_M, dtype=np.float64)
    scores_S = np.asarray(scores_S, dtype=np.float64)
    mi, si = _pairs(pairs)
    grad = np.zeros_like(scores_M)
    if len(mi) == 0:
        return LossValueGrad(0.0, {"scores_M": grad})
    c_m = truncate_scores(scores_M[mi])
    c_s = truncate_scores(scores_S[si])
    d = c_m - c_s
    n = len(mi)
    raw = sigmoid(scores_M[mi])
    inside = (raw > SCORE_CLIP) & (raw < 1 - SCORE_CLIP)
    np.add.at(grad, mi, smooth_l1_grad(d) * np.where(inside, c_m * (1 - c_m), 0.0) / n)
    return LossValueGrad(float(smooth_l1(d).sum() / n), {"scores_M": grad})


def object_box_loss(pairs, res_M, res_S) -> LossValueGrad:
    """Mean squared residual distance over matched pairs."""
    res_M = np.asarray(res_M, dtype=np.float64)
    res_S = np.asarray(res_S, dtype=np.float64)
    mi, si = _pairs(pairs)
    grad = np.zeros_like(res_M)
    if len(mi) == 0:
        return LossValueGrad(0.0, {"res_M": grad})
    d = res_M[mi] - res_S[si]
    n = len(mi)
    np.add.at(grad, mi, 2 * d / n)
    return LossValueGrad(float((d * d).sum() / n), {"res_M": grad})


def score_logits(cls_logits: np.ndarray) -> np.ndarray:
    """Raw foreground score logit of each anchor (foreground minus background)."""
    z = np.asarray(cls_logits, dtype=np.float64)
    return z[:, 1] - z[:, 0]


def chain_scores(lvg: LossValueGrad, n_classes: int) -> LossValueGrad:
    """Re-express a ``scores_M`` gradient in terms of ``cls_logits_M``."""
    grads = dict(lvg.grads)
    g = grads.pop("scores_M", None)
    if g is not None:
        gz = np.zeros((len(g), n_classes))
        gz[:, 1] = g
        gz[:, 0] = -g
        grads["cls_logits_M"] = grads.get("cls_logits_M", 0) + gz
    return LossValueGrad(lvg.value, grads)


# ---------------------------------------------------------------------------
# detection task

def _focal_terms(logits, target, alpha_t, gamma):
    """Focal loss per row and gradient w.r.t. the logits of that row."""
    lp = log_softmax(logits)
    lp_t = np.take_along_axis(lp, target[:, None], axis=1)[:, 0]
    live = lp_t > LOG_FLOOR
    lp_tc = np.where(live, lp_t, LOG_FLOOR)
    p_t = np.exp(lp_tc)
    q = 1 - p_t
    if gamma == 2:
        qg, qg1 = q * q, q
    else:
        qg = q ** gamma
    loss = -alpha_t * qg * lp_tc
    if gamma == 0:
        qg1 = np.zeros_like(q)
    elif gamma != 2:
        with np.errstate(divide="ignore"):
            qg1 = np.where(q > 0, np.power(np.maximum(q, 0.0), gamma - 1), 0.0)
    dl_dlpt = -alpha_t * (qg - gamma * qg1 * p_t * lp_tc)
    dl_dlpt = np.where(live, dl_dlpt, 0.0)
    probs = np.exp(lp)
    onehot = np.zeros_like(lp)
    np.put_along_axis(onehot, target[:, None], 1.0, axis=1)
    return loss, dl_dlpt[:, None] * (onehot - probs)


def depth_focal_loss(depth_logits, target_bins, w: LossWeights = LossWeights(),
                     valid=None) -> LossValueGrad:
    """Focal classification of every pixel into its true depth bin.

    ``depth_logits`` is ``(..., D)``; ``valid`` optionally excludes pixels
    (for instance those without a depth label) from both sum and count.
    """
    logits = np.asarray(depth_logits, dtype=np.float64)
    shape = logits.shape
    d = shape[-1]
    t = np.asarray(target_bins).reshape(-1)
    if t.size != int(np.prod(shape[:-1])):
        raise ShapeMismatch(f"{t.size} targets for {shape[:-1]} pixels")
    if t.size and (np.any(t < 0) or np.any(t >= d)):
        raise InvalidTargetBin(f"targets must lie in [0, {d})")
    t = t.astype(np.int64)
    flat = logits.reshape(-1, d)
    keep = np.ones(len(flat), bool) if valid is None else np.asarray(valid, bool).reshape(-1)
    grad = np.zeros_like(flat)
    n = int(keep.sum())
    if n == 0:
        return LossValueGrad(0.0, {"depth_logits": grad.reshape(shape)})
    loss, g = _focal_terms(flat[keep], t[keep], w.alpha, w.gamma)
    grad[keep] = g / n
    return LossValueGrad(float(loss.sum() / n), {"depth_logits": grad.reshape(shape)})


def _bce_with_logits(z, t):
    z = np.asarray(z, dtype=np.float64)
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return loss, sigmoid(z) - t


def detection_task_loss(cls_logits, assignment, res_pred, dir_logits,
                        depth_loss: LossValueGrad | None = None,
                        w: LossWeights = LossWeights()) -> LossValueGrad:
    """Focal classification + smooth-L1 boxes + direction BCE, plus depth.

    The first three terms are summed over anchors and divided by
    ``max(1, N_pos)``; the depth term enters with its own weight.
    """
    z = np.asarray(cls_logits, dtype=np.float64)
    res = np.asarray(res_pred, dtype=np.float64)
    dz = np.asarray(dir_logits, dtype=np.float64).reshape(-1)
    labels = np.asarray(assignment.labels)
    n = len(labels)
    if z.shape[0] != n or res.shape != (n, 7) or dz.shape != (n,):
        raise ShapeMismatch(f"cls {z.shape}, res {res.shape}, dir {dz.shape} for {n} anchors")
    norm = max(1, int((labels > 0).sum()))
    g_cls = np.zeros_like(z)
    g_res = np.zeros_like(res)
    g_dir = np.zeros_like(dz)

    care = np.flatnonzero(labels >= 0)
    l_cls = 0.0
    if len(care):
        target = labels[care]
        alpha_t = np.where(target > 0, w.alpha, 1 - w.alpha)
        loss, g = _focal_terms(z[care], target, alpha_t, w.gamma)
        l_cls = loss.sum()
        g_cls[care] = w.lambda_cls * g / norm

    fg = np.flatnonzero(labels > 0)
    l_box = l_dir = 0.0
    if len(fg):
        diff = res[fg] - assignment.target_res[fg]
        l_box = smooth_l1(diff).sum()
        g_res[fg] = w.lambda_box * smooth_l1_grad(diff) / norm
        bce, gb = _bce_with_logits(dz[fg], assignment.target_dir[fg])
        l_dir = bce.sum()
        g_dir[fg] = w.lambda_dir * gb / norm

    value = (w.lambda_cls * l_cls + w.lambda_box * l_box + w.lambda_dir * l_dir) / norm
    out = LossValueGrad(float(value), {"cls_logits_M": g_cls, "res_M": g_res, "dir_logits_M": g_dir})
    if depth_loss is not None:
        out = combine((1.0, out), (w.lambda_depth, depth_loss))
    return out


# ---------------------------------------------------------------------------
# compositions

def compose_total(parts: dict, w: LossWeights = LossWeights()) -> dict:
    """Combine component losses into the MG-DA, IoU-MA, SGM and total losses.

    ``parts`` may hold ``feature``, ``anchor``, ``object_cls``, ``object_box``
    and ``detection``; missing parts count as zero. Any ``scores_M``
    gradient should be chained onto ``cls_logits_M`` beforehand.
    """
    zero = LossValueGrad(0.0, {})
    get = lambda k: parts.get(k) or zero  # noqa: E731
    mg_da = combine((w.lambda_feature, get("feature")), (w.lambda_anchor, get("anchor")))
    iou_ma = combine((w.lambda_object, get("object_cls")), (w.lambda_object, get("object_box")))
    sgm = combine((1.0, mg_da), (1.0, iou_ma))
    total = combine((1.0, sgm), (1.0, get("detection")))
    return {"mg_da": mg_da, "iou_ma": iou_ma, "sgm": sgm, "total": total}
