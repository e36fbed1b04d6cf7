"""Channel-averaged BEV response heatmaps written as binary PGM images.

Images are drawn with forward (+x) pointing up and left (+y) pointing left,
so row 0 is the far edge of the grid and column 0 its leftmost cell.
"""
from __future__ import annotations

import re

import numpy as np

from .boxes import as_box_array, bev_corners
from .geometry import BevGridSpec

OUTLINE_VALUE = 255


def normalize_to_u8(values: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant input becomes all 128."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if not hi > lo:
        return np.full(v.shape, 128, dtype=np.uint8)
    return np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)


def _to_image(grid: np.ndarray) -> np.ndarray:
    return grid[::-1, ::-1]


def outline_cells(box, spec: BevGridSpec) -> np.ndarray:
    """``(k, 2)`` (i, j) grid cells crossed by a box's BEV outline."""
    corners = bev_corners(as_box_array([box]))[0]
    step = spec.cell / 4
    pts = []
    for a, b in zip(corners, np.roll(corners, -1, axis=0)):
        n = max(2, int(np.ceil(np.hypot(*(b - a)) / step)) + 1)
        t = np.linspace(0.0, 1.0, n)[:, None]
        pts.append(a + t * (b - a))
    pts = np.concatenate(pts)
    i = np.floor((pts[:, 0] - spec.x_range[0]) / spec.cell).astype(np.int64)
    j = np.floor((pts[:, 1] - spec.y_range[0]) / spec.cell).astype(np.int64)
    ok = (i >= 0) & (i < spec.H) & (j >= 0) & (j < spec.W)
    return np.unique(np.stack([i[ok], j[ok]], axis=1), axis=0)


def render_heatmap(bev_map: np.ndarray, boxes=(), spec: BevGridSpec | None = None) -> np.ndarray:
    """Mean over channels, scaled to 8 bits, with optional box outlines.

    ``bev_map`` is ``(C, H, W)`` or ``(H, W)``. Drawing boxes needs the grid
    ``spec`` to place them.
    """
    m = np.asarray(bev_map, dtype=np.float64)
    if m.ndim == 3:
        m = m.mean(axis=0)
    if m.ndim != 2:
        raise ValueError(f"expected a (C, H, W) or (H, W) map, got shape {np.shape(bev_map)}")
    grid = normalize_to_u8(m)
    boxes = list(boxes) if boxes is not None else []
    if boxes:
        if spec is None:
            raise ValueError("drawing boxes needs the BEV grid spec")
        if spec.shape != grid.shape:
            raise ValueError(f"grid spec {spec.shape} does not match map {grid.shape}")
        for box in boxes:
            cells = outline_cells(box, spec)
            grid[cells[:, 0], cells[:, 1]] = OUTLINE_VALUE
    return np.ascontiguousarray(_to_image(grid))


def encode_pgm(image: np.ndarray) -> bytes:
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError("PGM images are 2-D")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    body = data[m.end():m.end() + w * h]
    if len(body) != w * h:
        raise ValueError("truncated PGM payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path, image: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_pgm(image))


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_pgm(f.read())
