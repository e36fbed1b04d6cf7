"""Camera model, pseudo-LiDAR unprojection, frustum lifting and BEV masks.

Camera frame: x right, y down, z forward. BEV frame: x forward, y left,
z up. Pixel ``(u, v)`` means column ``u`` and row ``v``; pixel centers sit
on integer coordinates.

BEV feature maps are plain ``(C, H, W)`` arrays, masks ``(H, W)`` uint8
arrays, both indexed by a shared :class:`BevGridSpec`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .boxes import as_box_array
from .errors import ShapeMismatch


@dataclass(frozen=True)
class CameraIntrinsics:
    f_u: float
    f_v: float
    c_u: float
    c_v: float
    baseline: float = 0.0

    def __post_init__(self):
        if not (self.f_u > 0 and self.f_v > 0):
            raise ValueError("focal lengths must be positive")

    @classmethod
    def from_projection(cls, p: np.ndarray, baseline: float = 0.0) -> "CameraIntrinsics":
        p = np.asarray(p, dtype=np.float64)
        return cls(float(p[0, 0]), float(p[1, 1]), float(p[0, 2]), float(p[1, 2]), baseline)

    @classmethod
    def from_calibration(cls, calib) -> "CameraIntrinsics":
        return cls.from_projection(calib.p_left, calib.baseline)


def _cells(lo, hi, cell):
    return int(math.ceil((hi - lo) / cell - 1e-9))


@dataclass(frozen=True)
class BevGridSpec:
    x_range: tuple = (0.0, 70.4)
    y_range: tuple = (-40.0, 40.0)
    z_range: tuple = (-3.0, 1.0)
    cell: float = 0.32

    def __post_init__(self):
        for lo, hi in (self.x_range, self.y_range, self.z_range):
            if not hi > lo:
                raise ValueError("grid ranges need max > min")
        if not self.cell > 0:
            raise ValueError("cell size must be positive")

    @property
    def H(self) -> int:
        return _cells(*self.x_range, self.cell)

    @property
    def W(self) -> int:
        return _cells(*self.y_range, self.cell)

    @property
    def shape(self):
        return (self.H, self.W)

    def cell_centers(self) -> np.ndarray:
        """``(H, W, 2)`` BEV (x, y) coordinates of every cell center."""
        xs = self.x_range[0] + (np.arange(self.H) + 0.5) * self.cell
        ys = self.y_range[0] + (np.arange(self.W) + 0.5) * self.cell
        return np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)

    def locate(self, bev_points: np.ndarray) -> np.ndarray:
        """Flat cell index of each BEV-frame point, -1 when out of range."""
        p = np.asarray(bev_points, dtype=np.float64).reshape(-1, 3)
        i = np.floor((p[:, 0] - self.x_range[0]) / self.cell)
        j = np.floor((p[:, 1] - self.y_range[0]) / self.cell)
        ok = ((i >= 0) & (i < self.H) & (j >= 0) & (j < self.W)
              & (p[:, 2] >= self.z_range[0]) & (p[:, 2] < self.z_range[1]))
        return np.where(ok, i * self.W + j, -1).astype(np.int64)


def camera_to_bev(points: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    return np.stack([p[..., 2], -p[..., 0], -p[..., 1]], axis=-1)


def bev_to_camera(points: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    return np.stack([-p[..., 1], -p[..., 2], p[..., 0]], axis=-1)


# ---------------------------------------------------------------------------
# unprojection

def pixel_rays(cam: CameraIntrinsics, height: int, width: int) -> np.ndarray:
    """``(height, width, 3)`` camera-frame points at unit depth."""
    v, u = np.meshgrid(np.arange(height, dtype=np.float64),
                       np.arange(width, dtype=np.float64), indexing="ij")
    return np.stack([(u - cam.c_u) / cam.f_u, (v - cam.c_v) / cam.f_v, np.ones_like(u)], axis=-1)


def unproject_depth(depth, cam: CameraIntrinsics) -> np.ndarray:
    """Pseudo point cloud ``(N, 3)`` in camera frame; zero-depth pixels skipped.

    ``depth`` is a DepthRaster or an ``(H, W)`` array. Points come out in
    row-major pixel order.
    """
    z = np.asarray(getattr(depth, "values", depth), dtype=np.float64)
    v, u = np.nonzero(z > 0)
    d = z[v, u]
    return np.stack([(u - cam.c_u) * d / cam.f_u, (v - cam.c_v) * d / cam.f_v, d], axis=-1)


def project_points(points: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    """Camera-frame points -> ``(N, 3)`` of (u, v, depth)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return np.stack([p[:, 0] * cam.f_u / p[:, 2] + cam.c_u,
                     p[:, 1] * cam.f_v / p[:, 2] + cam.c_v, p[:, 2]], axis=-1)


def rasterize_depth(points: np.ndarray, cam: CameraIntrinsics, height: int, width: int) -> np.ndarray:
    """Nearest-point z-buffer of a camera-frame cloud; empty pixels hold 0."""
    uvz = project_points(points, cam)
    uvz = uvz[uvz[:, 2] > 0]
    u = np.rint(uvz[:, 0]).astype(np.int64)
    v = np.rint(uvz[:, 1]).astype(np.int64)
    ok = (u >= 0) & (u < width) & (v >= 0) & (v < height)
    u, v, z = u[ok], v[ok], uvz[ok, 2]
    out = np.full(height * width, np.inf)
    np.minimum.at(out, v * width + u, z)
    out[np.isinf(out)] = 0.0
    return out.reshape(height, width).astype(np.float32)


# ---------------------------------------------------------------------------
# depth distributions and frustum lifting

def uniform_bin_edges(bins: int = 80, near: float = 2.0, far: float = 60.0) -> np.ndarray:
    return np.linspace(near, far, bins + 1)


def depth_to_bin(depth: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Bin index of each depth, clipped into ``[0, D)``."""
    idx = np.searchsorted(edges, np.asarray(depth, dtype=np.float64), side="right") - 1
    return np.clip(idx, 0, len(edges) - 2)


@dataclass
class DepthDistribution:
    """Per-pixel categorical depth, ``probs`` shaped ``(H_f, W_f, D)``."""

    probs: np.ndarray
    edges: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.edges = np.asarray(self.edges, dtype=np.float64)
        if self.probs.ndim != 3 or self.probs.shape[-1] != len(self.edges) - 1:
            raise ShapeMismatch(f"probs {self.probs.shape} vs {len(self.edges) - 1} bins")
        if np.any(self.probs < 0) or np.any(np.abs(self.probs.sum(-1) - 1) > 1e-6):
            raise ValueError("depth probabilities must be nonnegative and sum to 1")

    @property
    def bins(self) -> int:
        return len(self.edges) - 1

    @property
    def centers(self) -> np.ndarray:
        return (self.edges[:-1] + self.edges[1:]) / 2

    @classmethod
    def from_logits(cls, logits: np.ndarray, edges: np.ndarray) -> "DepthDistribution":
        return cls(softmax(logits, axis=-1), edges)

    @classmethod
    def one_hot(cls, bin_index: np.ndarray, edges: np.ndarray) -> "DepthDistribution":
        idx = np.asarray(bin_index)
        probs = np.zeros(idx.shape + (len(edges) - 1,))
        np.put_along_axis(probs, idx[..., None], 1.0, axis=-1)
        return cls(probs, edges)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


class FrustumLifter:
    """Fixed placement of (pixel, depth bin) frustum cells onto a BEV grid.

    The placement depends only on the camera, the feature-grid size, the bin
    centers and the grid spec, so it is computed once and reused for every
    forward/backward pass.
    """

    def __init__(self, cam: CameraIntrinsics, feat_hw: tuple, edges: np.ndarray,
                 spec: BevGridSpec):
        self.cam, self.spec = cam, spec
        self.feat_hw = tuple(feat_hw)
        self.edges = np.asarray(edges, dtype=np.float64)
        centers = (self.edges[:-1] + self.edges[1:]) / 2
        rays = pixel_rays(cam, *self.feat_hw).reshape(-1, 1, 3)
        pts = rays * centers[None, :, None]
        #: (P, D) flat BEV cell of each frustum cell, -1 when dropped
        self.cell_index = spec.locate(camera_to_bev(pts)).reshape(len(rays), len(centers))

    @property
    def n_cells(self) -> int:
        return self.spec.H * self.spec.W

    @cached_property
    def _scatter(self):
        flat = self.cell_index.ravel()
        cols = np.flatnonzero(flat >= 0)
        return sp.csr_matrix((np.ones(len(cols)), (flat[cols], cols)),
                             shape=(self.n_cells, flat.size))

    @cached_property
    def _layout(self):
        """Kept frustum cells sorted by BEV cell, as CSR rows over pixels."""
        flat = self.cell_index.ravel()
        kept = np.flatnonzero(flat >= 0)
        kept = kept[np.argsort(flat[kept], kind="stable")]
        rows = flat[kept]
        indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=self.n_cells))])
        pixel = kept // self.cell_index.shape[1]
        return kept, rows, pixel, indptr

    def weights(self, probs: np.ndarray):
        """Sparse ``(H*W, P)`` matrix of depth mass each pixel puts in each cell."""
        kept, _, pixel, indptr = self._layout
        data = np.asarray(probs, dtype=np.float64).reshape(-1)[kept]
        return sp.csr_matrix((data, pixel, indptr), shape=(self.n_cells, self.cell_index.shape[0]))

    def _check(self, feats, probs):
        p = self.cell_index.shape[0]
        if feats.shape[1:] != self.feat_hw or probs.shape[:2] != self.feat_hw:
            raise ShapeMismatch(f"features {feats.shape} / probs {probs.shape} "
                                f"do not match feature grid {self.feat_hw}")
        if probs.shape[-1] != self.cell_index.shape[1]:
            raise ShapeMismatch(f"{probs.shape[-1]} depth bins, lifter built for "
                                f"{self.cell_index.shape[1]}")
        return feats.reshape(len(feats), p), probs.reshape(p, -1)

    def forward(self, feats: np.ndarray, probs: np.ndarray) -> np.ndarray:
        """``(C, H_f, W_f)`` x ``(H_f, W_f, D)`` -> ``(C, H, W)`` BEV map."""
        f, pr = self._check(np.asarray(feats, dtype=np.float64), np.asarray(probs, dtype=np.float64))
        bev = np.asarray(self.weights(pr) @ f.T).T
        return bev.reshape(len(f), *self.spec.shape)

    def backward(self, grad_bev: np.ndarray, feats: np.ndarray, probs: np.ndarray):
        """Gradients of a scalar w.r.t. ``feats`` and ``probs``."""
        f, pr = self._check(np.asarray(feats, dtype=np.float64), np.asarray(probs, dtype=np.float64))
        g = np.asarray(grad_bev, dtype=np.float64).reshape(len(f), -1)
        dfeats = np.asarray(self.weights(pr).T @ g.T).T.reshape(np.shape(feats))
        kept, rows, pixel, _ = self._layout
        dprobs = np.zeros(pr.size)
        dprobs[kept] = np.einsum("cn,cn->n", g[:, rows], f[:, pixel])
        return dfeats, dprobs.reshape(np.shape(probs))


    def batch_weights(self, probs: np.ndarray):
        """Block-diagonal ``(B*H*W, B*P)`` weights for ``(B, H_f, W_f, D)`` probs."""
        kept, _, pixel, indptr = self._layout
        b = len(probs)
        p = self.cell_index.shape[0]
        data = np.asarray(probs, dtype=np.float64).reshape(b, -1)[:, kept].ravel()
        indices = (pixel[None, :] + p * np.arange(b)[:, None]).ravel()
        ptr = np.concatenate([[0], (indptr[1:][None, :] + len(kept) * np.arange(b)[:, None]).ravel()])
        return sp.csr_matrix((data, indices, ptr), shape=(b * self.n_cells, b * p))

    def forward_batch(self, feats: np.ndarray, probs: np.ndarray) -> np.ndarray:
        """``(B, C, H_f, W_f)`` x ``(B, H_f, W_f, D)`` -> ``(B, C, H, W)``."""
        feats = np.asarray(feats, dtype=np.float64)
        b, c = feats.shape[:2]
        if feats.shape[2:] != self.feat_hw or np.shape(probs)[1:3] != self.feat_hw:
            raise ShapeMismatch(f"features {feats.shape} / probs {np.shape(probs)} "
                                f"do not match feature grid {self.feat_hw}")
        rows = feats.reshape(b, c, -1).transpose(0, 2, 1).reshape(-1, c)
        bev = self.batch_weights(probs) @ rows
        return bev.reshape(b, self.spec.H, self.spec.W, c).transpose(0, 3, 1, 2)

    def backward_batch(self, grad_bev: np.ndarray, feats: np.ndarray, probs: np.ndarray):
        """Batched :meth:`backward`."""
        feats = np.asarray(feats, dtype=np.float64)
        b, c = feats.shape[:2]
        g = np.asarray(grad_bev, dtype=np.float64).reshape(b, c, -1)
        g_rows = g.transpose(0, 2, 1).reshape(-1, c)
        dfeats = (self.batch_weights(probs).T @ g_rows).reshape(b, -1, c).transpose(0, 2, 1)
        kept, rows, pixel, _ = self._layout
        f = feats.reshape(b, c, -1)
        dprobs = np.zeros((b, np.size(probs) // b))
        dprobs[:, kept] = np.einsum("bcn,bcn->bn", g[:, :, rows], f[:, :, pixel])
        return dfeats.reshape(feats.shape), dprobs.reshape(np.shape(probs))


def collapse_to_bev(scatter, frustum: np.ndarray) -> np.ndarray:
    """Sum frustum features into their BEV cells: ``(C, P*D) -> (C, H*W)``."""
    return np.asarray((scatter @ frustum.T).T)


def lift_frustum(image_feats: np.ndarray, dist: DepthDistribution, cam: CameraIntrinsics,
                 spec: BevGridSpec) -> np.ndarray:
    feats = np.asarray(image_feats, dtype=np.float64)
    if feats.ndim != 3 or feats.shape[1:] != dist.probs.shape[:2]:
        raise ShapeMismatch(f"features {feats.shape} vs depth grid {dist.probs.shape[:2]}")
    return FrustumLifter(cam, feats.shape[1:], dist.edges, spec).forward(feats, dist.probs)


# ---------------------------------------------------------------------------
# foreground masks

def points_in_boxes_bev(points_xy: np.ndarray, boxes) -> np.ndarray:
    """``(N, M)`` membership of BEV points in box footprints (edges inclusive)."""
    b = as_box_array(boxes)
    p = np.asarray(points_xy, dtype=np.float64).reshape(-1, 2)
    if len(b) == 0:
        return np.zeros((len(p), 0), dtype=bool)
    dx = p[:, None, 0] - b[None, :, 0]
    dy = p[:, None, 1] - b[None, :, 1]
    c, s = np.cos(b[:, 6]), np.sin(b[:, 6])
    along = dx * c + dy * s
    across = -dx * s + dy * c
    return (np.abs(along) <= b[:, 3] / 2) & (np.abs(across) <= b[:, 4] / 2)


def foreground_mask(gts, spec: BevGridSpec) -> np.ndarray:
    """Cells whose center falls inside any ground-truth footprint."""
    centers = spec.cell_centers().reshape(-1, 2)
    inside = points_in_boxes_bev(centers, gts)
    return inside.any(axis=1).reshape(spec.shape).astype(np.uint8)
