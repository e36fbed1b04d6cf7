"""Synthetic scenes and a small two-branch trainer.

Each scene holds a few cars on a flat ground plane seen by one camera. The
stereo branch sees a low-noise depth map, turned into a pseudo point cloud
and pillar statistics. The monocular branch sees per-pixel image features
whose depth cue carries a per-object scale error, and has to learn its own
depth distribution.

Both branches share one model shape:

* BEV encoder: a per-cell affine map to ``FEAT_CHANNELS`` channels.
* Detection head: an affine map of each cell's 3x3 neighbourhood to
  ``K * (2 + 7 + 1)`` outputs (class logits, residuals and a direction logit
  per anchor).

The monocular branch additionally owns an affine map from image features to
depth-bin logits. Training runs in two phases. First the stereo branch is
fitted on the detection loss alone. It is then frozen and acts as the
teacher while the monocular parameters are trained with plain minibatch
gradient descent.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .anchors import AnchorGrid, Assignment, assign_targets, generate_anchors
from .boxes import Box3D, bev_corners, decode_boxes, direction_bit, encode_folded, nms_bev
from .data_io import Category, DepthRaster, GroundTruthObject, PredictionRecord, bev_to_camera_box
from .encoders import (PILLAR_CHANNELS, LinearHeadParams, MonoBevEncoder, apply_linear_head,
                       linear_head_grads, pillarize)
from .errors import DivergenceDetected
from .evaluator import Criterion, EvalConfig, compute_ap
from .geometry import (BevGridSpec, CameraIntrinsics, depth_to_bin, foreground_mask, pixel_rays,
                       softmax, uniform_bin_edges, unproject_depth)
from .losses import (LossValueGrad, LossWeights, anchor_da_loss, chain_scores, compose_total,
                     depth_focal_loss, detection_task_loss, feature_da_loss, object_box_loss,
                     object_cls_loss, score_logits, sigmoid)
from .matcher import DEFAULT_MIN_IOU, DEFAULT_SCORE_THRESH, match_by_iou

log = logging.getLogger(__name__)

CAM_HEIGHT = 1.65
FEAT_CHANNELS = 8
HEAD_OUTPUTS = 10  # 2 class logits, 7 residuals, 1 direction logit
DEPTH_BASIS = np.linspace(4.0, 28.0, 7)
DEPTH_BASIS_WIDTH = 3.0
IMAGE_CHANNELS = ("constant", "car", "ground") + tuple(f"depth_{int(m)}" for m in DEPTH_BASIS)
# image channels carried into the BEV by the depth distribution
LIFT_CHANNELS = ("car", "ground")


@dataclass(frozen=True)
class SceneSetup:
    """Geometry shared by every synthetic scene."""

    spec: BevGridSpec = BevGridSpec(x_range=(0.0, 30.0), y_range=(-12.0, 12.0), z_range=(-3.0, 1.0),
                                    cell=1.0)
    feat_hw: tuple = (10, 48)
    cam: CameraIntrinsics = CameraIntrinsics(24.0, 24.0, 23.5, 1.5)
    stereo_scale: int = 2
    depth_bins: int = 28
    near: float = 2.0
    far: float = 30.0
    x_box: tuple = (6.0, 26.0)
    max_boxes: int = 6
    stereo_noise: float = 0.2
    mono_scale_noise: float = 0.05
    ground_noise: float = 0.02

    @property
    def edges(self) -> np.ndarray:
        return uniform_bin_edges(self.depth_bins, self.near, self.far)

    @property
    def stereo_cam(self) -> CameraIntrinsics:
        s = self.stereo_scale
        off = (s - 1) / 2
        return CameraIntrinsics(self.cam.f_u * s, self.cam.f_v * s, self.cam.c_u * s + off,
                                self.cam.c_v * s + off, 0.54)

    @property
    def stereo_hw(self) -> tuple:
        return (self.feat_hw[0] * self.stereo_scale, self.feat_hw[1] * self.stereo_scale)


@dataclass
class SyntheticScene:
    scene_id: str
    boxes: np.ndarray  # (n, 7) BEV boxes
    classes: list
    stereo_depth: DepthRaster
    image_feats: np.ndarray  # (C_img, H_f, W_f)
    true_depth: np.ndarray  # (H_f, W_f), 0 where the ray hits nothing
    cam: CameraIntrinsics

    def ground_truth(self) -> list[GroundTruthObject]:
        out = []
        for b in self.boxes:
            loc, dims, yaw = bev_to_camera_box(Box3D(*b))
            out.append(GroundTruthObject(Category.CAR, 0.0, 0, 0.0, (0.0, 0.0, 1.0, 100.0), dims, loc, yaw))
        return out


# ---------------------------------------------------------------------------
# scene generation

def cast_rays(rays: np.ndarray, boxes: np.ndarray, cam_height: float = CAM_HEIGHT):
    """Depth of the first surface hit by each camera ray.

    ``rays`` are camera-frame directions at unit depth, so the ray parameter
    is the depth itself. Returns ``(depth, hit_box)`` with depth 0 for rays
    that hit nothing and ``hit_box`` -1 for ground or nothing.
    """
    r = rays.reshape(-1, 3)
    ground = np.where(r[:, 1] > 1e-9, cam_height / np.maximum(r[:, 1], 1e-9), np.inf)
    depth, hit = ground.copy(), np.full(len(r), -1)
    d_bev = np.stack([r[:, 2], -r[:, 0], -r[:, 1]], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        for m, b in enumerate(np.asarray(boxes).reshape(-1, 7)):
            c, s = np.cos(b[6]), np.sin(b[6])
            o = -b[:3]
            o_loc = np.array([o[0] * c + o[1] * s, -o[0] * s + o[1] * c, o[2]])
            d_loc = np.stack([d_bev[:, 0] * c + d_bev[:, 1] * s, -d_bev[:, 0] * s + d_bev[:, 1] * c,
                              d_bev[:, 2]], axis=-1)
            half = b[3:6] / 2
            t1 = (-half - o_loc) / d_loc
            t2 = (half - o_loc) / d_loc
            t_in = np.nanmax(np.minimum(t1, t2), axis=1)
            t_out = np.nanmin(np.maximum(t1, t2), axis=1)
            ok = (t_out >= t_in) & (t_in > 0) & (t_in < depth)
            depth[ok] = t_in[ok]
            hit[ok] = m
    depth[~np.isfinite(depth)] = 0.0
    return depth.reshape(rays.shape[:-1]), hit.reshape(rays.shape[:-1])


def _sample_boxes(rng, setup: SceneSetup):
    n = int(rng.integers(1, setup.max_boxes + 1))
    spec, boxes = setup.spec, []
    half_fov = np.arctan(setup.cam.c_u / setup.cam.f_u) * 0.85
    tries = 0
    while len(boxes) < n and tries < 200:
        tries += 1
        x = rng.uniform(*setup.x_box)
        y = rng.uniform(-1, 1) * min(spec.y_range[1] - 2.5, x * np.tan(half_fov))
        l, w, h = np.array([3.9, 1.6, 1.56]) * rng.uniform(0.8, 1.2, 3)
        yaw = rng.uniform(-np.pi, np.pi)
        cand = np.array([x, y, -CAM_HEIGHT + h / 2, l, w, h, yaw])
        c = bev_corners([cand])[0]
        inside = ((c[:, 0] > spec.x_range[0]) & (c[:, 0] < spec.x_range[1])
                  & (c[:, 1] > spec.y_range[0]) & (c[:, 1] < spec.y_range[1])).all()
        clear = all(np.hypot(x - b[0], y - b[1]) > (np.hypot(l, w) + np.hypot(b[3], b[4])) / 2 + 0.3
                    for b in boxes)
        if inside and clear:
            boxes.append(cand)
    return np.array(boxes)


def image_features(depth_cue: np.ndarray, car: np.ndarray, ground: np.ndarray) -> np.ndarray:
    """``(C_img, H_f, W_f)`` monocular pixel features from a noisy depth cue."""
    valid = depth_cue > 0
    basis = np.exp(-0.5 * ((depth_cue[None] - DEPTH_BASIS[:, None, None]) / DEPTH_BASIS_WIDTH) ** 2)
    basis *= valid[None]
    return np.concatenate([np.ones((1,) + depth_cue.shape), car[None].astype(np.float64),
                           ground[None].astype(np.float64), basis])


def make_scene(rng, setup: SceneSetup, scene_id: str) -> SyntheticScene:
    boxes = _sample_boxes(rng, setup)
    # monocular view at feature resolution
    depth, hit = cast_rays(pixel_rays(setup.cam, *setup.feat_hw), boxes)
    obj_scale = np.exp(setup.mono_scale_noise * rng.standard_normal(len(boxes)))
    pix_scale = np.exp(setup.ground_noise * rng.standard_normal(depth.shape))
    car = hit >= 0
    ground = (hit < 0) & (depth > 0)
    cue = np.where(car, depth * obj_scale[np.maximum(hit, 0)], depth * pix_scale) * (depth > 0)
    feats = image_features(cue, car, ground)
    # stereo view at a finer resolution, low-noise depth
    sdepth, _ = cast_rays(pixel_rays(setup.stereo_cam, *setup.stereo_hw), boxes)
    noisy = np.where(sdepth > 0, np.maximum(sdepth + rng.normal(0, setup.stereo_noise, sdepth.shape), 1e-3), 0.0)
    noisy[sdepth > setup.far * 2] = 0.0
    raster = DepthRaster(setup.stereo_hw[1], setup.stereo_hw[0], noisy)
    return SyntheticScene(scene_id, boxes, ["Car"] * len(boxes), raster, feats, depth, setup.cam)


def generate_scenes(seed: int, n: int, setup: SceneSetup = SceneSetup()) -> list[SyntheticScene]:
    """``n`` scenes drawn deterministically from ``seed``."""
    if n <= 0:
        raise ValueError("need at least one scene")
    rng = np.random.default_rng(seed)
    return [make_scene(rng, setup, f"{seed}-{k:05d}") for k in range(n)]


# ---------------------------------------------------------------------------
# model

def pillar_features(cloud: np.ndarray, spec: BevGridSpec) -> np.ndarray:
    """Pillar statistics rescaled to order-one values for the linear encoder.

    Channels: log point count, mean x and y offsets from the cell centre in
    cell units, mean and max height above the ground plane, and an occupancy
    flag (the reflectance of pseudo points is 1).
    """
    p = pillarize(cloud, spec)
    occ = p[0] > 0
    centers = spec.cell_centers()
    out = np.zeros_like(p)
    out[0] = np.log1p(p[0])
    out[1] = np.where(occ, (p[1] - centers[..., 0]) / spec.cell, 0.0)
    out[2] = np.where(occ, (p[2] - centers[..., 1]) / spec.cell, 0.0)
    out[3] = np.where(occ, p[3] + CAM_HEIGHT, 0.0)
    out[4] = np.where(occ, p[4] + CAM_HEIGHT, 0.0)
    out[5] = np.where(occ, p[5], 0.0)
    return out


def im2col3(F: np.ndarray) -> np.ndarray:
    """``(B, C, H, W)`` -> ``(B*H*W, 9*C)`` zero-padded 3x3 neighbourhoods."""
    b, c, h, w = F.shape
    P = np.zeros((b, h + 2, w + 2, c))
    P[:, 1:-1, 1:-1] = F.transpose(0, 2, 3, 1)
    win = np.lib.stride_tricks.sliding_window_view(P, (3, 3), axis=(1, 2))  # (B, H, W, C, 3, 3)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, 9 * c)


def col2im3(dcols: np.ndarray, shape) -> np.ndarray:
    """Adjoint of :func:`im2col3`."""
    b, c, h, w = shape
    g = dcols.reshape(b, h, w, 9, c).transpose(0, 3, 4, 1, 2)
    P = np.zeros((b, c, h + 2, w + 2))
    for k in range(9):
        di, dj = divmod(k, 3)
        P[:, :, di:di + h, dj:dj + w] += g[:, k]
    return P[:, :, 1:-1, 1:-1]


def init_branch(rng, c_in: int, k_anchors: int, prior: float = 0.01) -> dict:
    """Random encoder and detection-head parameters for one branch."""
    head_b = np.zeros(k_anchors * HEAD_OUTPUTS)
    head_b[1::HEAD_OUTPUTS] = np.log(prior / (1 - prior))
    return {
        "enc_W": rng.normal(0, 1 / np.sqrt(c_in), (FEAT_CHANNELS, c_in)),
        "enc_b": np.zeros(FEAT_CHANNELS),
        "head_W": rng.normal(0, 0.1 / np.sqrt(9 * FEAT_CHANNELS), (9 * FEAT_CHANNELS, k_anchors * HEAD_OUTPUTS)),
        "head_b": head_b,
    }


def init_mono(rng, setup: SceneSetup, k_anchors: int) -> dict:
    params = init_branch(rng, len(LIFT_CHANNELS), k_anchors)
    params["depth_W"] = np.zeros((setup.depth_bins, len(IMAGE_CHANNELS)))
    params["depth_b"] = np.zeros(setup.depth_bins)
    return params


@dataclass
class HeadOutputs:
    """Per-anchor outputs of a batch, anchors of all scenes concatenated."""

    cls: np.ndarray  # (B*N, 2)
    res: np.ndarray  # (B*N, 7)
    dir: np.ndarray  # (B*N,)
    cols: np.ndarray = field(repr=False, default=None)

    @cached_property
    def scores(self) -> np.ndarray:
        return sigmoid(score_logits(self.cls))


def run_head(F: np.ndarray, params: dict) -> HeadOutputs:
    cols = im2col3(F)
    out = (cols @ params["head_W"] + params["head_b"]).reshape(-1, HEAD_OUTPUTS)
    return HeadOutputs(out[:, 0:2], out[:, 2:9], out[:, 9], cols)


def head_backward(heads: HeadOutputs, params: dict, grads: dict, shape) -> tuple[np.ndarray, dict]:
    """Chain per-anchor output gradients back to the BEV map and head params."""
    n = len(heads.cls)
    g = np.concatenate([grads.get("cls_logits_M", np.zeros((n, 2))), grads.get("res_M", np.zeros((n, 7))),
                        np.reshape(grads.get("dir_logits_M", np.zeros(n)), (n, 1))], axis=1)
    g = g.reshape(heads.cols.shape[0], -1)
    dparams = {"head_W": heads.cols.T @ g, "head_b": g.sum(axis=0)}
    dF = col2im3(g @ params["head_W"].T, shape)
    return dF, dparams


@dataclass
class BranchOutputs:
    F: np.ndarray  # (B, C, H, W)
    heads: HeadOutputs
    depth_logits: np.ndarray | None = None  # (B, H_f, W_f, D)
    caches: tuple | None = field(repr=False, default=None)


def _encoder_params(params: dict) -> LinearHeadParams:
    return LinearHeadParams(params["enc_W"], params["enc_b"])


class Model:
    """Fixed geometry plus batched forward/backward passes of both branches."""

    def __init__(self, setup: SceneSetup = SceneSetup()):
        self.setup = setup
        self.grid: AnchorGrid = generate_anchors(setup.spec)
        self.encoder = MonoBevEncoder(setup.cam, setup.feat_hw, setup.edges, setup.spec)
        self.lift_idx = [IMAGE_CHANNELS.index(c) for c in LIFT_CHANNELS]

    @property
    def k(self) -> int:
        return self.grid.K

    def stereo_forward(self, pillars: np.ndarray, params: dict) -> BranchOutputs:
        F = apply_linear_head(pillars.transpose(1, 0, 2, 3), _encoder_params(params)).transpose(1, 0, 2, 3)
        return BranchOutputs(F, run_head(F, params))

    def stereo_backward(self, out: BranchOutputs, pillars, params: dict, grads: dict) -> dict:
        dF, dp = head_backward(out.heads, params, grads, out.F.shape)
        enc = linear_head_grads(pillars.transpose(1, 0, 2, 3), _encoder_params(params),
                                dF.transpose(1, 0, 2, 3))
        dp.update(enc_W=enc["weight"], enc_b=enc["bias"])
        return dp

    def depth_logits(self, feats: np.ndarray, params: dict) -> np.ndarray:
        """``(B, C_img, H_f, W_f)`` -> ``(B, H_f, W_f, D)``."""
        b, c, h, w = feats.shape
        flat = feats.reshape(b, c, h * w).transpose(0, 2, 1).reshape(-1, c)
        return (flat @ params["depth_W"].T + params["depth_b"]).reshape(b, h, w, -1)

    def mono_forward(self, feats: np.ndarray, params: dict) -> BranchOutputs:
        logits = self.depth_logits(feats, params)
        F, cache = self.encoder.forward_batch(feats[:, self.lift_idx], logits, _encoder_params(params))
        return BranchOutputs(F, run_head(F, params), logits, cache)

    def mono_backward(self, out: BranchOutputs, feats, params: dict, grads: dict) -> dict:
        dF, dp = head_backward(out.heads, params, grads, out.F.shape)
        if "F_M" in grads:
            dF = dF + grads["F_M"]
        g = self.encoder.backward_batch(dF, out.caches, _encoder_params(params))
        dW, db, dlogits = g["weight"], g["bias"], g["depth_logits"]
        if "depth_logits" in grads:
            dlogits = dlogits + grads["depth_logits"]
        dp.update(enc_W=dW, enc_b=db,
                  depth_W=_pixels_last(dlogits).T @ _pixels_last(feats.transpose(0, 2, 3, 1)),
                  depth_b=dlogits.sum(axis=(0, 1, 2)))
        return dp

    def decode(self, heads: HeadOutputs, idx: np.ndarray) -> np.ndarray:
        """Boxes of the chosen anchors, yaw resolved with the direction logit.

        ``idx`` indexes the concatenated anchors of a batch.
        """
        anchors = self.grid.anchors[np.asarray(idx) % len(self.grid)]
        boxes = decode_boxes(heads.res[idx], anchors)
        flip = direction_bit(boxes[:, 6]) != (heads.dir[idx] > 0)
        boxes[flip, 6] += np.pi
        boxes[:, 6] = np.mod(boxes[:, 6] + np.pi, 2 * np.pi) - np.pi
        return boxes


def _pixels_last(a: np.ndarray) -> np.ndarray:
    """``(B, H, W, K)`` -> ``(B*H*W, K)``."""
    return a.reshape(-1, a.shape[-1])


def forward(scene: SyntheticScene, params: dict, model: Model | None = None) -> dict:
    """Outputs of both branches for one scene.

    ``params`` holds ``"stereo"`` and ``"mono"`` parameter dicts.
    """
    model = model or Model()
    pillars = pillar_features(unproject_depth(scene.stereo_depth, model.setup.stereo_cam), model.setup.spec)
    s = model.stereo_forward(pillars[None], params["stereo"])
    m = model.mono_forward(scene.image_feats[None], params["mono"])
    return {
        "F_S": s.F[0], "F_M": m.F[0],
        "cls_logits_S": s.heads.cls, "cls_logits_M": m.heads.cls,
        "res_S": s.heads.res, "res_M": m.heads.res,
        "dir_logits_S": s.heads.dir, "dir_logits_M": m.heads.dir,
        "depth_dist": softmax(m.depth_logits[0], axis=-1),
    }


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr: float = 0.05
    batch_size: int = 10
    weights: LossWeights = LossWeights()
    enable_sgm: bool = False
    enable_feature: bool = True
    enable_anchor: bool = True
    enable_object: bool = True
    seed: int = 7
    teacher_epochs: int | None = None
    score_thresh: float = DEFAULT_SCORE_THRESH
    min_iou: float = DEFAULT_MIN_IOU
    max_matched: int = 32
    eval_scenes: int = 100
    eval_every: int = 0
    eval_iou: float = 0.5
    log_path: str | None = None
    joint: bool = False  # keep fitting the stereo branch during phase two

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")

    def group(self, name: str) -> "TrainConfig":
        """The configuration of ablation group ``a`` to ``f``."""
        feature, anchor, obj = ABLATION_GROUPS[name]
        return replace(self, enable_sgm=any((feature, anchor, obj)), enable_feature=feature,
                       enable_anchor=anchor, enable_object=obj)


# group -> (feature level, anchor level, object level)
ABLATION_GROUPS = {
    "a": (False, False, False),
    "b": (True, False, False),
    "c": (False, True, False),
    "d": (False, False, True),
    "e": (True, True, False),
    "f": (True, True, True),
}


@dataclass
class PreparedScene:
    """Everything about a scene that does not depend on trained parameters."""

    scene: SyntheticScene
    pillars: np.ndarray
    assignment: object
    mask: np.ndarray
    depth_target: np.ndarray
    depth_valid: np.ndarray
    teacher_F: np.ndarray | None = None
    teacher_cls: np.ndarray | None = None
    stereo_idx: np.ndarray | None = None
    stereo_boxes: np.ndarray | None = None


def prepare(scenes, model: Model) -> list[PreparedScene]:
    setup = model.setup
    out = []
    for sc in scenes:
        cloud = unproject_depth(sc.stereo_depth, setup.stereo_cam)
        valid = (sc.true_depth >= setup.near) & (sc.true_depth < setup.far)
        out.append(PreparedScene(
            sc, pillar_features(cloud, setup.spec),
            assign_targets(model.grid, [Box3D(*b) for b in sc.boxes], gt_classes=sc.classes),
            foreground_mask(sc.boxes, setup.spec),
            depth_to_bin(sc.true_depth, setup.edges), valid))
    return out


@dataclass
class Batch:
    """Scenes stacked along a leading axis; anchors concatenated scene by scene."""

    items: list
    pillars: np.ndarray
    feats: np.ndarray
    assignment: Assignment
    mask: np.ndarray
    depth_target: np.ndarray
    depth_valid: np.ndarray

    @classmethod
    def of(cls, items) -> "Batch":
        a = [ps.assignment for ps in items]
        assignment = Assignment(np.concatenate([x.labels for x in a]),
                                np.concatenate([x.target_res for x in a]),
                                np.concatenate([x.target_dir for x in a]),
                                np.concatenate([x.matched_gt for x in a]))
        return cls(list(items), np.stack([ps.pillars for ps in items]),
                   np.stack([ps.scene.image_feats for ps in items]), assignment,
                   np.stack([ps.mask for ps in items]), np.stack([ps.depth_target for ps in items]),
                   np.stack([ps.depth_valid for ps in items]))

    @property
    def teacher_F(self) -> np.ndarray:
        return np.stack([ps.teacher_F for ps in self.items])

    @property
    def teacher_cls(self) -> np.ndarray:
        return np.concatenate([ps.teacher_cls for ps in self.items])


def _top_predictions(scores: np.ndarray, thresh: float, limit: int) -> np.ndarray:
    idx = np.flatnonzero(scores >= thresh)
    order = np.argsort(-scores[idx], kind="stable")[:limit]
    return idx[order]


def _chunks(items, size: int):
    return [items[i:i + size] for i in range(0, len(items), size)]


def _keep_teacher(chunk, model: Model, out: BranchOutputs, cfg: TrainConfig) -> None:
    n = len(model.grid)
    for b, ps in enumerate(chunk):
        rows = slice(b * n, (b + 1) * n)
        ps.teacher_F = out.F[b]
        ps.teacher_cls = out.heads.cls[rows].copy()
        idx = _top_predictions(out.heads.scores[rows], cfg.score_thresh, cfg.max_matched)
        ps.stereo_idx = idx
        ps.stereo_boxes = model.decode(out.heads, idx + b * n)


def attach_teacher(prepared, model: Model, stereo: dict, cfg: TrainConfig) -> None:
    """Run the frozen stereo branch once per scene and keep its outputs."""
    for chunk in _chunks(prepared, cfg.batch_size):
        _keep_teacher(chunk, model, model.stereo_forward(Batch.of(chunk).pillars, stereo), cfg)


def _check_finite(epoch: int, values: dict) -> None:
    for name, v in values.items():
        if not np.isfinite(v):
            raise DivergenceDetected(epoch, name)


def object_parts(batch: Batch, model: Model, heads: HeadOutputs, cfg: TrainConfig):
    """IoU-matched object-level losses against the frozen teacher.

    Matching runs scene by scene; the pairs of all scenes are then pooled.
    Returns ``(cls part, box part, pair count)`` with ``None`` parts when
    nothing matched.
    """
    n = len(model.grid)
    idx, s_boxes, s_cls, m_group, s_group = [], [], [], [], []
    for b, ps in enumerate(batch.items):
        if len(ps.stereo_idx) == 0:
            continue
        rows = slice(b * n, (b + 1) * n)
        top = _top_predictions(heads.scores[rows], cfg.score_thresh, cfg.max_matched) + b * n
        idx.append(top)
        m_group.append(np.full(len(top), b))
        s_boxes.append(ps.stereo_boxes)
        s_cls.append(ps.teacher_cls[ps.stereo_idx])
        s_group.append(np.full(len(ps.stereo_idx), b))
    if not idx or not sum(map(len, idx)):
        return None, None, 0
    idx = np.concatenate(idx)
    s_boxes = np.concatenate(s_boxes)
    pairs = match_by_iou(model.decode(heads, idx), s_boxes, cfg.min_iou,
                         groups=(np.concatenate(m_group), np.concatenate(s_group)))
    if len(pairs) == 0:
        return None, None, 0
    m = idx[pairs.mono_idx]
    t_scores = score_logits(np.concatenate(s_cls)[pairs.stereo_idx])
    # teacher boxes re-expressed as residuals of the monocular anchors
    t_res = encode_folded(s_boxes[pairs.stereo_idx], model.grid.anchors[m % n])
    pair_arr = np.stack([m, np.arange(len(m))], axis=1)
    oc = chain_scores(object_cls_loss(pair_arr, score_logits(heads.cls), t_scores), 2)
    ob = object_box_loss(pair_arr, heads.res, t_res)
    return oc, ob, len(m)


def mono_losses(batch: Batch, model: Model, out: BranchOutputs, cfg: TrainConfig) -> tuple[dict, dict]:
    """Composed loss of one batch plus raw component values for logging.

    The feature and anchor terms are evaluated for the log even when they
    are disabled. Object-level matching is the costliest step, so it only
    runs when the object level is enabled; otherwise ``L_IoU-MA`` and
    ``pairs`` are logged as ``None``.
    """
    w = cfg.weights
    h = out.heads
    depth = depth_focal_loss(out.depth_logits, batch.depth_target, w, valid=batch.depth_valid)
    det = detection_task_loss(h.cls, batch.assignment, h.res, h.dir, depth, w)
    fd = feature_da_loss(out.F.transpose(1, 0, 2, 3), batch.teacher_F.transpose(1, 0, 2, 3), batch.mask,
                         normalize=w.feature_normalize)
    feat = LossValueGrad(fd.value, {"F_M": fd.grads["F_M"].transpose(1, 0, 2, 3)})
    anchor = anchor_da_loss(h.cls, batch.teacher_cls, batch.assignment.fg, batch.assignment.bg, w)
    use_object = cfg.enable_sgm and cfg.enable_object
    oc, ob, n_pairs = object_parts(batch, model, h, cfg) if use_object else (None, None, None)
    parts = {"detection": det}
    if cfg.enable_sgm:
        if cfg.enable_feature:
            parts["feature"] = feat
        if cfg.enable_anchor:
            parts["anchor"] = anchor
        if cfg.enable_object and oc is not None:
            parts["object_cls"], parts["object_box"] = oc, ob
    comp = compose_total(parts, w)
    obj_value = w.lambda_object * ((oc.value if oc else 0.0) + (ob.value if ob else 0.0)) if use_object else None
    monitor = {"L_feature": feat.value, "L_anchor": anchor.value, "L_IoU-MA": obj_value,
               "L_3Ddet": det.value, "L_total": comp["total"].value, "pairs": n_pairs}
    return comp, monitor


def _sgd(params: dict, grads: dict, lr: float) -> None:
    for k, g in grads.items():
        params[k] -= lr * g


def _batches(prepared, size: int, rng) -> list:
    order = rng.permutation(len(prepared))
    return [[prepared[i] for i in order[k:k + size]] for k in range(0, len(order), size)]


def train_stereo(prepared, model: Model, cfg: TrainConfig) -> dict:
    """Phase one: fit the stereo branch on the detection loss alone."""
    rng = np.random.default_rng([cfg.seed, 1])
    params = init_branch(rng, len(PILLAR_CHANNELS), model.k)
    for epoch in range(cfg.teacher_epochs or cfg.epochs):
        total = 0.0
        for items in _batches(prepared, cfg.batch_size, rng):
            batch = Batch.of(items)
            out = model.stereo_forward(batch.pillars, params)
            h = out.heads
            det = detection_task_loss(h.cls, batch.assignment, h.res, h.dir, None, cfg.weights)
            _check_finite(epoch, {"L_3Ddet": det.value})
            total += det.value * len(items)
            _sgd(params, model.stereo_backward(out, batch.pillars, params, det.grads), cfg.lr)
        log.debug("stereo epoch %d loss %.5f", epoch, total / len(prepared))
    return params


def predict(model: Model, heads: HeadOutputs, frame_id: str, offset: int = 0, score_thresh: float = 0.05,
            limit: int = 100, nms_iou: float = 0.1) -> list[PredictionRecord]:
    """NMS-filtered predictions of one scene whose anchors start at ``offset``."""
    n = len(model.grid)
    idx = _top_predictions(heads.scores[offset:offset + n], score_thresh, limit) + offset
    if len(idx) == 0:
        return []
    boxes = model.decode(heads, idx)
    scores = heads.scores[idx]
    keep = nms_bev(boxes, scores, nms_iou)
    return [PredictionRecord(Box3D(*boxes[k]), float(scores[k]), Category.CAR, frame_id) for k in keep]


def evaluate_branch(prepared, model: Model, params: dict, branch: str = "mono", iou: float = 0.5,
                    batch_size: int = 10) -> dict:
    """Held-out BEV AP of one branch and its masked feature gap to the teacher."""
    preds, gts, gaps = [], {}, []
    n = len(model.grid)
    for chunk in _chunks(prepared, batch_size):
        batch = Batch.of(chunk)
        out = (model.mono_forward(batch.feats, params) if branch == "mono"
               else model.stereo_forward(batch.pillars, params))
        for b, ps in enumerate(chunk):
            preds.extend(predict(model, out.heads, ps.scene.scene_id, b * n))
            gts[ps.scene.scene_id] = ps.scene.ground_truth()
            if ps.teacher_F is not None:
                gaps.append(feature_da_loss(out.F[b], ps.teacher_F, ps.mask).value)
    ap = compute_ap(preds, gts, EvalConfig(iou, Criterion.AP_BEV))
    return {"ap_bev": ap, "feature_gap": float(np.mean(gaps)) if gaps else None}


def _stereo_step(batch: Batch, model: Model, stereo: dict, cfg: TrainConfig, epoch: int) -> None:
    """One detection-loss update of the stereo branch; its pre-update outputs become the teacher."""
    out = model.stereo_forward(batch.pillars, stereo)
    _keep_teacher(batch.items, model, out, cfg)
    h = out.heads
    det = detection_task_loss(h.cls, batch.assignment, h.res, h.dir, None, cfg.weights)
    _check_finite(epoch, {"L_3Ddet_stereo": det.value})
    _sgd(stereo, model.stereo_backward(out, batch.pillars, stereo, det.grads), cfg.lr)


def train_mono(prepared, model: Model, cfg: TrainConfig, held_out=None, log_file=None, stereo=None):
    """Phase two: train the monocular branch against the stereo teacher.

    The teacher is frozen unless ``cfg.joint`` is set; then ``stereo`` (a
    parameter dict, updated in place) keeps fitting its own detection loss
    and the teacher outputs of each batch are refreshed before the
    monocular step. Alignment gradients never reach the stereo branch.
    Joint mode writes teacher outputs into ``prepared`` and ``held_out``,
    so callers pass copies.
    """
    if cfg.joint and stereo is None:
        raise ValueError("joint training needs the stereo parameters")
    rng = np.random.default_rng([cfg.seed, 2])
    params = init_mono(rng, model.setup, model.k)
    history, trajectory = [], []
    for epoch in range(cfg.epochs):
        sums: dict = {}
        for items in _batches(prepared, cfg.batch_size, rng):
            batch = Batch.of(items)
            if cfg.joint:
                _stereo_step(batch, model, stereo, cfg, epoch)
            out = model.mono_forward(batch.feats, params)
            comp, monitor = mono_losses(batch, model, out, cfg)
            _check_finite(epoch, {k: v for k, v in monitor.items() if k != "pairs" and v is not None})
            for k, v in monitor.items():
                if v is None:
                    sums.setdefault(k, None)
                else:
                    sums[k] = sums.get(k, 0.0) + (v if k == "pairs" else v * len(items))
            _sgd(params, model.mono_backward(out, batch.feats, params, comp["total"].grads), cfg.lr)
        record = {"epoch": epoch + 1}
        record.update({k: (v if v is None else int(v) if k == "pairs" else v / len(prepared))
                       for k, v in sums.items()})
        last = epoch + 1 == cfg.epochs
        if held_out is not None and (last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0)):
            if cfg.joint:
                attach_teacher(held_out, model, stereo, cfg)
            record.update(evaluate_branch(held_out, model, params, "mono", cfg.eval_iou, cfg.batch_size))
        else:
            record.update(ap_bev=None, feature_gap=None)
        history.append(record)
        trajectory.append(_digest(params))
        if log_file is not None:
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
    return params, history, trajectory


def _digest(params: dict) -> bytes:
    return b"".join(params[k].tobytes() for k in sorted(params))


@dataclass
class TrainingResult:
    stereo: dict
    mono: dict
    history: list
    trajectory: list
    metrics: dict


@dataclass
class Workbench:
    """Scenes, model and teacher shared by the runs of one ablation study."""

    scenes: list
    cfg: TrainConfig
    setup: SceneSetup = SceneSetup()

    @cached_property
    def model(self) -> Model:
        return Model(self.setup)

    @cached_property
    def prepared(self) -> list:
        return prepare(self.scenes, self.model)

    @cached_property
    def held_out(self) -> list:
        seed = int(np.random.SeedSequence([self.cfg.seed, 99]).generate_state(1)[0])
        return prepare(generate_scenes(seed, self.cfg.eval_scenes, self.setup), self.model)

    @cached_property
    def stereo(self) -> dict:
        params = train_stereo(self.prepared, self.model, self.cfg)
        attach_teacher(self.prepared, self.model, params, self.cfg)
        attach_teacher(self.held_out, self.model, params, self.cfg)
        return params

    def teacher_metrics(self) -> dict:
        m = evaluate_branch(self.held_out, self.model, self.stereo, "stereo", self.cfg.eval_iou,
                            self.cfg.batch_size)
        m["fg_margin"] = foreground_margin(self.held_out, [ps.teacher_F for ps in self.held_out])
        return m

    def run(self, cfg: TrainConfig | None = None, log_file=None) -> TrainingResult:
        cfg = cfg or self.cfg
        shared = self.stereo
        before = _digest(shared)
        prepared, held_out, stereo = self.prepared, self.held_out, shared
        if cfg.joint:
            prepared = [replace(ps) for ps in prepared]
            held_out = [replace(ps) for ps in held_out]
            stereo = {k: v.copy() for k, v in shared.items()}
        mono, history, trajectory = train_mono(prepared, self.model, cfg, held_out, log_file, stereo)
        if _digest(shared) != before:
            raise RuntimeError("stereo parameters changed while frozen")
        return TrainingResult(stereo, mono, history, trajectory, history[-1])


def foreground_margin(prepared, maps) -> float:
    """Mean channel-averaged |response| on foreground cells minus background."""
    fg, bg = [], []
    for ps, F in zip(prepared, maps):
        heat = np.abs(F).mean(axis=0)
        fg.append(heat[ps.mask > 0])
        bg.append(heat[ps.mask == 0])
    return float(np.concatenate(fg).mean() - np.concatenate(bg).mean())


def run_training(scenes, config: TrainConfig, setup: SceneSetup = SceneSetup()) -> TrainingResult:
    """Both training phases for one configuration.

    When ``config.log_path`` is set, one JSON record per epoch is written
    there.
    """
    if not scenes:
        raise ValueError("need at least one scene")
    bench = Workbench(list(scenes), config, setup)
    if config.log_path:
        with open(config.log_path, "w") as f:
            return bench.run(log_file=f)
    return bench.run()


def ablation_matrix(scenes, base: TrainConfig, groups="abcdef", setup: SceneSetup = SceneSetup(),
                    log_file=None) -> dict:
    """Train every requested ablation group against one shared teacher."""
    bench = Workbench(list(scenes), base, setup)
    results = {}
    for g in groups:
        if log_file is not None:
            log_file.write(json.dumps({"group": g}) + "\n")
        results[g] = bench.run(base.group(g), log_file)
    return results
