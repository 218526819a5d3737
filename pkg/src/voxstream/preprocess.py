"""Depth-frame validation and filtering ahead of fusion.

Implements the combined depth-discontinuity / hole-neighborhood outlier
filter and normal-map computation. Invalid depth is 0 everywhere, in
memory and on the wire.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera parameters; principal point inside the image."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


def _check_rotation(pose: np.ndarray) -> None:
    r = pose[:3, :3]
    if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-5:
        raise ValueError("pose rotation is not orthonormal within 1e-5")


@dataclass
class DepthFrame:
    """One RGB-D observation: depth in meters (0 = invalid), color, pose.

    pose is the 4x4 camera-to-world transform.
    """

    depth: np.ndarray
    color: np.ndarray
    pose: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.uint8)
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.depth.ndim != 2:
            raise ValueError("depth must be a 2-D array")
        if self.color.shape != self.depth.shape + (3,):
            raise ValueError("color must match depth with 3 channels")
        if self.pose.shape != (4, 4):
            raise ValueError("pose must be 4x4")
        _check_rotation(self.pose)

    @property
    def valid_mask(self) -> np.ndarray:
        return self.depth > 0


@dataclass(frozen=True)
class DepthFilterConfig:
    c_d: float = 0.2
    c_h: float = 0.25
    radius: int = 3

    def __post_init__(self) -> None:
        if self.c_d <= 0:
            raise ValueError("c_d must be positive")
        if not 0 < self.c_h < 1:
            raise ValueError("c_h must be in (0, 1)")
        if self.radius < 1:
            raise ValueError("radius must be at least 1")

    @property
    def neighborhood(self) -> int:
        """Neighbor count |N(d)|: full window minus the center pixel."""
        side = 2 * self.radius + 1
        return side * side - 1


def filter_depth(frame: DepthFrame, cfg: DepthFilterConfig = DepthFilterConfig()) -> DepthFrame:
    """Discard outlier depth samples; returns a new frame with them zeroed.

    A sample is discarded when some valid neighbor in the window differs by
    more than c_d, or when more than c_h * |N| of its neighbors carry no
    depth. Both tests read the input frame only (single pass, no
    cascading); neighbors outside the image count as invalid.
    """
    h, w = frame.depth.shape
    r = cfg.radius
    if h < 2 * r + 1 or w < 2 * r + 1:
        raise ValueError("frame smaller than the filter window")

    depth = frame.depth
    valid = depth > 0
    pad_d = np.pad(depth, r, mode="constant", constant_values=0.0)
    pad_v = np.pad(valid, r, mode="constant", constant_values=False)

    discontinuity = np.zeros_like(valid)
    invalid_neighbors = np.zeros(depth.shape, dtype=np.int32)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dx == 0 and dy == 0:
                continue
            nb_d = pad_d[r + dy : r + dy + h, r + dx : r + dx + w]
            nb_v = pad_v[r + dy : r + dy + h, r + dx : r + dx + w]
            discontinuity |= nb_v & (np.abs(depth - nb_d) > cfg.c_d)
            invalid_neighbors += ~nb_v

    holes = invalid_neighbors > cfg.c_h * cfg.neighborhood
    keep = valid & ~discontinuity & ~holes
    out = depth.copy()
    out[~keep] = 0.0
    return DepthFrame(out, frame.color, frame.pose, frame.timestamp)


def backproject(depth: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Camera-space points for every pixel of a depth map, shape (H, W, 3)."""
    h, w = depth.shape
    us = np.arange(w, dtype=np.float64)
    vs = np.arange(h, dtype=np.float64)
    x = (us[None, :] - intr.cx) / intr.fx * depth
    y = (vs[:, None] - intr.cy) / intr.fy * depth
    return np.stack([x, y, depth], axis=-1)


def compute_normals(frame: DepthFrame, intr: Intrinsics) -> np.ndarray:
    """Per-pixel unit normals in the camera frame, oriented toward the camera.

    Central differences of back-projected points; a pixel is invalid (zero
    vector) wherever the center or any of its four axis neighbors lacks
    depth.
    """
    depth = frame.depth
    h, w = depth.shape
    points = backproject(depth, intr)
    valid = depth > 0

    normals = np.zeros((h, w, 3), dtype=np.float64)
    ok = np.zeros((h, w), dtype=bool)
    ok[1:-1, 1:-1] = (
        valid[1:-1, 1:-1]
        & valid[1:-1, 2:]
        & valid[1:-1, :-2]
        & valid[2:, 1:-1]
        & valid[:-2, 1:-1]
    )

    du = np.zeros_like(points)
    dv = np.zeros_like(points)
    du[1:-1, 1:-1] = points[1:-1, 2:] - points[1:-1, :-2]
    dv[1:-1, 1:-1] = points[2:, 1:-1] - points[:-2, 1:-1]
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1)
    ok &= norm > 1e-12
    n[ok] /= norm[ok][:, None]

    # Orient against the view ray: n . p < 0 for the point p seen under it.
    flip = ok & (np.einsum("ijk,ijk->ij", n, points) > 0)
    n[flip] *= -1.0
    normals[ok] = n[ok]
    return normals
