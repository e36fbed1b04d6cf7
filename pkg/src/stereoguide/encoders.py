"""BEV encoders for both branches.

The stereo/point-cloud branch reduces each pillar to six fixed statistics;
the monocular branch lifts image features with a predicted depth
distribution. Each branch then applies its own per-cell affine map so both
produce maps with the same channel count.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .geometry import BevGridSpec, CameraIntrinsics, FrustumLifter, camera_to_bev, softmax

PILLAR_CHANNELS = ("count", "mean_x", "mean_y", "mean_z", "max_z", "reflectance")


def pillarize(cloud: np.ndarray, spec: BevGridSpec) -> np.ndarray:
    """Per-cell point statistics ``(6, H, W)`` of a camera-frame cloud.

    An optional fourth column carries reflectance; without it every point
    counts as reflectance 1. Coordinates are reported in the BEV frame.
    """
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, np.shape(cloud)[-1] if np.size(cloud) else 3)
    refl = pts[:, 3] if pts.shape[1] > 3 else np.ones(len(pts))
    bev = camera_to_bev(pts[:, :3])
    cell = spec.locate(bev)
    keep = cell >= 0
    cell, bev, refl = cell[keep], bev[keep], refl[keep]
    n = spec.H * spec.W
    out = np.zeros((6, n))
    count = np.bincount(cell, minlength=n).astype(np.float64)
    occupied = count > 0
    out[0] = count
    for c, values in ((1, bev[:, 0]), (2, bev[:, 1]), (3, bev[:, 2]), (5, refl)):
        s = np.bincount(cell, weights=values, minlength=n)
        out[c, occupied] = s[occupied] / count[occupied]
    zmax = np.full(n, -np.inf)
    np.maximum.at(zmax, cell, bev[:, 2])
    out[4, occupied] = zmax[occupied]
    return out.reshape(6, spec.H, spec.W)


@dataclass
class LinearHeadParams:
    weight: np.ndarray  # (C_out, C_in)
    bias: np.ndarray  # (C_out,)

    @classmethod
    def identity(cls, channels: int) -> "LinearHeadParams":
        return cls(np.eye(channels), np.zeros(channels))

    @classmethod
    def zeros(cls, c_out: int, c_in: int) -> "LinearHeadParams":
        return cls(np.zeros((c_out, c_in)), np.zeros(c_out))


def apply_linear_head(bev: np.ndarray, params: LinearHeadParams) -> np.ndarray:
    bev = np.asarray(bev, dtype=np.float64)
    if bev.shape[0] != params.weight.shape[1]:
        raise ShapeMismatch(f"head expects {params.weight.shape[1]} channels, got {bev.shape[0]}")
    out = np.tensordot(params.weight, bev, axes=(1, 0))
    return out + params.bias.reshape(-1, *([1] * (bev.ndim - 1)))


def linear_head_grads(bev: np.ndarray, params: LinearHeadParams, grad_out: np.ndarray) -> dict:
    """Gradients of a scalar w.r.t. the head input, weight and bias."""
    c_in = bev.shape[0]
    x = np.asarray(bev, dtype=np.float64).reshape(c_in, -1)
    g = np.asarray(grad_out, dtype=np.float64).reshape(len(params.bias), -1)
    return {
        "input": (params.weight.T @ g).reshape(bev.shape),
        "weight": g @ x.T,
        "bias": g.sum(axis=1),
    }


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    return probs * (grad_probs - (grad_probs * probs).sum(axis=-1, keepdims=True))


class MonoBevEncoder:
    """Image features + depth logits -> BEV map, with an explicit backward pass."""

    def __init__(self, cam: CameraIntrinsics, feat_hw, edges, spec: BevGridSpec):
        self.lifter = FrustumLifter(cam, feat_hw, edges, spec)

    def forward(self, image_feats, depth_logits, params: LinearHeadParams):
        logits = np.asarray(depth_logits, dtype=np.float64)
        if logits.shape[:2] != self.lifter.feat_hw:
            raise ShapeMismatch(f"depth logits {logits.shape} vs feature grid {self.lifter.feat_hw}")
        probs = softmax(logits, axis=-1)
        lifted = self.lifter.forward(image_feats, probs)
        out = apply_linear_head(lifted, params)
        return out, (np.asarray(image_feats, dtype=np.float64), probs, lifted)

    def backward(self, grad_out, cache, params: LinearHeadParams) -> dict:
        feats, probs, lifted = cache
        head = linear_head_grads(lifted, params, grad_out)
        dfeats, dprobs = self.lifter.backward(head["input"], feats, probs)
        return {
            "depth_logits": softmax_backward(probs, dprobs),
            "image_feats": dfeats,
            "weight": head["weight"],
            "bias": head["bias"],
        }


    def forward_batch(self, image_feats, depth_logits, params: LinearHeadParams):
        """Batched :meth:`forward` over a leading scene axis."""
        probs = softmax(np.asarray(depth_logits, dtype=np.float64), axis=-1)
        lifted = self.lifter.forward_batch(image_feats, probs)
        out = apply_linear_head(lifted.transpose(1, 0, 2, 3), params).transpose(1, 0, 2, 3)
        return out, (np.asarray(image_feats, dtype=np.float64), probs, lifted)

    def backward_batch(self, grad_out, cache, params: LinearHeadParams) -> dict:
        feats, probs, lifted = cache
        head = linear_head_grads(lifted.transpose(1, 0, 2, 3), params,
                                 np.asarray(grad_out).transpose(1, 0, 2, 3))
        dfeats, dprobs = self.lifter.backward_batch(head["input"].transpose(1, 0, 2, 3), feats, probs)
        return {
            "depth_logits": softmax_backward(probs, dprobs),
            "image_feats": dfeats,
            "weight": head["weight"],
            "bias": head["bias"],
        }


def mono_bev(image_feats, depth_logits, cam: CameraIntrinsics, spec: BevGridSpec,
             params: LinearHeadParams, edges, grad_output=None):
    """Monocular BEV features; with ``grad_output`` also returns gradients."""
    enc = MonoBevEncoder(cam, np.shape(image_feats)[1:], edges, spec)
    out, cache = enc.forward(image_feats, depth_logits, params)
    if grad_output is None:
        return out
    return out, enc.backward(grad_output, cache, params)
