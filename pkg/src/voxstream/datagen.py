"""Synthetic RGB-D data: analytic scenes, a sensor noise model, orbit
trajectories, and the VXDS dataset file format.

Stands in for real sensors and pose tracking: every frame carries an exact
ground-truth camera-to-world pose.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .preprocess import DepthFrame, Intrinsics

VXDS_MAGIC = b"VXDS"
VXDS_VERSION = 1


class DatasetFormatError(ValueError):
    """Raised when a VXDS file is malformed or truncated."""


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    color: tuple[int, int, int] = (200, 200, 200)

    def intersect(self, origin, dirs):
        oc = origin - np.asarray(self.center)
        a = np.einsum("...k,...k->...", dirs, dirs)
        b = 2.0 * np.einsum("...k,k->...", dirs, oc)
        c = float(oc @ oc) - self.radius**2
        disc = b * b - 4 * a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > 1e-9, t0, t1)
        t = np.where(hit & (t > 1e-9), t, np.inf)
        return t

    def distance(self, points):
        return np.abs(np.linalg.norm(points - np.asarray(self.center), axis=-1) - self.radius)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box between two corners."""

    minimum: tuple[float, float, float]
    maximum: tuple[float, float, float]
    color: tuple[int, int, int] = (200, 200, 200)

    def intersect(self, origin, dirs):
        lo = np.asarray(self.minimum, dtype=np.float64)
        hi = np.asarray(self.maximum, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (lo - origin) * inv
            t2 = (hi - origin) * inv
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        near = np.nanmax(tmin, axis=-1)
        far = np.nanmin(tmax, axis=-1)
        t = np.where((near <= far) & (near > 1e-9), near, np.inf)
        return t

    def distance(self, points):
        lo = np.asarray(self.minimum, dtype=np.float64)
        hi = np.asarray(self.maximum, dtype=np.float64)
        q_out = np.maximum(np.maximum(lo - points, 0.0), points - hi)
        outside = np.linalg.norm(q_out, axis=-1)
        inside = np.minimum.reduce(
            [points[..., k] - lo[k] for k in range(3)] + [hi[k] - points[..., k] for k in range(3)]
        )
        inside = np.maximum(inside, 0.0)
        return np.where(outside > 0, outside, inside)


@dataclass(frozen=True)
class Rect:
    """Finite rectangle given by center, unit normal, and half extents.

    The in-plane axes are a deterministic tangent basis of the normal.
    """

    center: tuple[float, float, float]
    normal: tuple[float, float, float]
    half_u: float
    half_v: float
    color: tuple[int, int, int] = (200, 200, 200)

    def basis(self):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        helper = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        u = np.cross(helper, n)
        u /= np.linalg.norm(u)
        v = np.cross(n, u)
        return n, u, v

    def intersect(self, origin, dirs):
        n, u, v = self.basis()
        c = np.asarray(self.center, dtype=np.float64)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c - origin) @ n) / denom
        p = origin + t[..., None] * dirs
        rel = p - c
        in_u = np.abs(rel @ u) <= self.half_u
        in_v = np.abs(rel @ v) <= self.half_v
        ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & in_u & in_v
        return np.where(ok, t, np.inf)

    def distance(self, points):
        n, u, v = self.basis()
        rel = points - np.asarray(self.center, dtype=np.float64)
        pu = np.clip(rel @ u, -self.half_u, self.half_u)
        pv = np.clip(rel @ v, -self.half_v, self.half_v)
        closest = pu[..., None] * u + pv[..., None] * v
        return np.linalg.norm(rel - closest, axis=-1)


Primitive = Sphere | Box | Rect


@dataclass
class SyntheticScene:
    primitives: list

    def __post_init__(self) -> None:
        if not self.primitives:
            raise ValueError("a scene needs at least one primitive")

    def distance(self, points) -> np.ndarray:
        """Unsigned distance from points to the nearest primitive surface."""
        return np.minimum.reduce([p.distance(points) for p in self.primitives])


@dataclass(frozen=True)
class NoiseModel:
    """Depth sensor noise: sigma(d) = sigma_base + sigma_quadratic * d^2,
    blob dropouts, and extra dropouts near depth discontinuities."""

    sigma_base: float = 0.001
    sigma_quadratic: float = 0.002
    dropout_rate: float = 0.02
    edge_dropout: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("dropout_rate", "edge_dropout"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in [0, 1]")


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose looking from eye toward target.

    Camera convention: +x right, +y down, +z forward.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("eye and target coincide")
    z = forward / norm
    up = np.asarray(up, dtype=np.float64)
    down = -up + (up @ z) * z
    if np.linalg.norm(down) < 1e-9:
        down = np.array([1.0, 0.0, 0.0]) - z[0] * z
    y = down / np.linalg.norm(down)
    x = np.cross(y, z)
    pose = np.eye(4)
    pose[:3, 0] = x
    pose[:3, 1] = y
    pose[:3, 2] = z
    pose[:3, 3] = eye
    return pose


def orbit_trajectory(center, radius, n_frames, look_at=None, height=0.0, axis=(0.0, 0.0, 1.0)):
    """Evenly spaced poses on a circle around center, all looking at look_at.

    The circle lies in the plane orthogonal to axis, offset by height along
    it.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be at least 1")
    center = np.asarray(center, dtype=np.float64)
    target = center if look_at is None else np.asarray(look_at, dtype=np.float64)
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    helper = np.array([0.0, 0.0, 1.0]) if abs(a[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(helper, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(a, e1)
    poses = []
    for k in range(n_frames):
        theta = 2.0 * np.pi * k / n_frames
        eye = center + radius * (np.cos(theta) * e1 + np.sin(theta) * e2) + height * a
        poses.append(look_at_pose(eye, target, up=a))
    return poses


def render_depth(scene: SyntheticScene, pose, intr: Intrinsics):
    """Exact depth and color for one view; depth 0 where no primitive is hit."""
    pose = np.asarray(pose, dtype=np.float64)
    r = pose[:3, :3]
    origin = pose[:3, 3]
    us = np.arange(intr.width, dtype=np.float64)
    vs = np.arange(intr.height, dtype=np.float64)
    dx = (us[None, :] - intr.cx) / intr.fx
    dy = (vs[:, None] - intr.cy) / intr.fy
    dirs_cam = np.stack([np.broadcast_to(dx, (intr.height, intr.width)),
                         np.broadcast_to(dy, (intr.height, intr.width)),
                         np.ones((intr.height, intr.width))], axis=-1)
    # z component of dirs is 1, so the ray parameter equals camera z-depth.
    dirs = dirs_cam @ r.T

    ts = np.stack([p.intersect(origin, dirs) for p in scene.primitives], axis=0)
    best = np.argmin(ts, axis=0)
    depth = np.take_along_axis(ts, best[None], axis=0)[0]
    color = np.zeros((intr.height, intr.width, 3), dtype=np.uint8)
    palette = np.array([p.color for p in scene.primitives], dtype=np.uint8)
    hit = np.isfinite(depth)
    color[hit] = palette[best[hit]]
    depth = np.where(hit, depth, 0.0)
    return depth, color


def render_frame(scene: SyntheticScene, pose, intr: Intrinsics,
                 noise: NoiseModel | None = None, frame_index: int = 0,
                 timestamp: float = 0.0) -> DepthFrame:
    """Render one RGB-D frame; noise, if given, is deterministic in
    (noise.seed, frame_index)."""
    depth, color = render_depth(scene, pose, intr)
    if noise is not None:
        depth = _apply_noise(depth, noise, frame_index)
    return DepthFrame(depth, color, np.asarray(pose, dtype=np.float64), timestamp)


def _discontinuity_mask(depth, threshold=0.1, margin=2):
    """Pixels within margin of a depth jump or a valid/invalid border."""
    valid = depth > 0
    edge = np.zeros(depth.shape, dtype=bool)
    for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
        nb = np.roll(depth, shift, axis=axis)
        nb_v = np.roll(valid, shift, axis=axis)
        jump = valid & nb_v & (np.abs(depth - nb) > threshold)
        border = valid & ~nb_v
        edge |= jump | border
    grown = edge.copy()
    for _ in range(margin - 1):
        nxt = grown.copy()
        nxt[1:, :] |= grown[:-1, :]
        nxt[:-1, :] |= grown[1:, :]
        nxt[:, 1:] |= grown[:, :-1]
        nxt[:, :-1] |= grown[:, 1:]
        grown = nxt
    return grown


def _apply_noise(depth, noise: NoiseModel, frame_index: int):
    rng = np.random.default_rng([noise.seed, frame_index])
    h, w = depth.shape
    out = depth.copy()
    valid = out > 0

    sigma = noise.sigma_base + noise.sigma_quadratic * out**2
    out[valid] += rng.normal(0.0, 1.0, size=int(valid.sum())) * sigma[valid]
    out[out <= 0] = 0.0

    if noise.edge_dropout > 0:
        near_edge = _discontinuity_mask(depth) & valid
        drop = rng.random(size=(h, w)) < noise.edge_dropout
        out[near_edge & drop] = 0.0

    if noise.dropout_rate > 0:
        mean_blob_area = np.pi * 3.0**2
        n_blobs = int(round(noise.dropout_rate * h * w / mean_blob_area))
        if n_blobs:
            cy = rng.integers(0, h, size=n_blobs)
            cx = rng.integers(0, w, size=n_blobs)
            radius = rng.uniform(1.5, 4.5, size=n_blobs)
            ys = np.arange(h)[:, None]
            xs = np.arange(w)[None, :]
            for k in range(n_blobs):
                blob = (ys - cy[k]) ** 2 + (xs - cx[k]) ** 2 <= radius[k] ** 2
                out[blob] = 0.0
    return out


def render_sequence(scene, poses, intr, noise=None, fps=30.0):
    """Render a full trajectory as a list of DepthFrames."""
    return [
        render_frame(scene, pose, intr, noise, frame_index=k, timestamp=k / fps)
        for k, pose in enumerate(poses)
    ]


_HEADER = struct.Struct("<4sIIIffffI")


def save_dataset(path, frames: list[DepthFrame], intr: Intrinsics) -> None:
    """Write frames to a VXDS file; depth is quantized to millimeters."""
    with open(path, "wb") as f:
        f.write(_HEADER.pack(VXDS_MAGIC, VXDS_VERSION, intr.width, intr.height,
                             intr.fx, intr.fy, intr.cx, intr.cy, len(frames)))
        for frame in frames:
            if frame.depth.shape != (intr.height, intr.width):
                raise ValueError("frame size does not match intrinsics")
            f.write(frame.pose.astype("<f4").tobytes())
            mm = np.round(frame.depth * 1000.0).astype("<u2")
            f.write(mm.tobytes())
            f.write(np.ascontiguousarray(frame.color).tobytes())


def load_dataset(path, fps=30.0) -> tuple[list[DepthFrame], Intrinsics]:
    """Read a VXDS file back; truncation raises DatasetFormatError with the
    frame index."""
    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise DatasetFormatError("truncated VXDS header")
        magic, version, width, height, fx, fy, cx, cy, count = _HEADER.unpack(header)
        if magic != VXDS_MAGIC:
            raise DatasetFormatError("not a VXDS file")
        if version != VXDS_VERSION:
            raise DatasetFormatError(f"unsupported VXDS version {version}")
        intr = Intrinsics(fx, fy, cx, cy, width, height)
        frame_bytes = 64 + width * height * 2 + width * height * 3
        frames = []
        for k in range(count):
            raw = f.read(frame_bytes)
            if len(raw) < frame_bytes:
                raise DatasetFormatError(f"truncated VXDS file at frame {k}")
            pose = np.frombuffer(raw, dtype="<f4", count=16).reshape(4, 4).astype(np.float64)
            mm = np.frombuffer(raw, dtype="<u2", count=width * height, offset=64)
            color = np.frombuffer(raw, dtype=np.uint8, count=width * height * 3,
                                  offset=64 + width * height * 2)
            depth = mm.reshape(height, width).astype(np.float64) / 1000.0
            frames.append(DepthFrame(depth, color.reshape(height, width, 3).copy(),
                                     pose, timestamp=k / fps))
    return frames, intr
