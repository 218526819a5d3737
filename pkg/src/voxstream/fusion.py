"""Volumetric fusion: block allocation, TSDF integration, raycast preview.

Allocation optionally samples only every c_a-th pixel per row and column
(virtual downsampling); integration always consumes the full-resolution
depth map. The raycast preview ignores voxels whose fusion weight is below
the stability threshold c_w.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    BLOCK_DIM,
    BLOCK_COORD_MAX,
    BLOCK_COORD_MIN,
    BlockHashMap,
    BlockPosition,
    AddressingError,
    GridConfig,
    LOCAL_COORDS,
    TSDF_DTYPE,
    TSDF_SCALE,
    empty_tsdf_block,
    encode_tsdf,
)
from .preprocess import DepthFrame, Intrinsics, compute_normals


@dataclass(frozen=True)
class FusionConfig:
    c_a: int = 4
    max_weight: int = 255
    c_w: float = 2.0
    d_max: float = 5.0

    def __post_init__(self) -> None:
        if self.c_a < 1 or int(self.c_a) != self.c_a:
            raise ValueError("c_a must be a positive integer")
        if self.c_w < 0:
            raise ValueError("c_w must be non-negative")
        if not 1 <= self.max_weight <= 255:
            raise ValueError("max_weight must be in [1, 255]")


class TsdfModel:
    """The reconstruction process's TSDF model plus its outgoing stream queue.

    Blocks touched by integration accumulate in pending_stream until
    drained toward the server; each touched position is reported once per
    drain epoch.
    """

    def __init__(self, grid: GridConfig | None = None):
        self.grid = grid or GridConfig()
        self.blocks = BlockHashMap(
            TSDF_DTYPE, self.grid.tsdf_bucket_count, self.grid.tsdf_pool_blocks, empty_tsdf_block
        )
        self._pending: dict[BlockPosition, None] = {}

    @property
    def pending_stream(self) -> list[BlockPosition]:
        return list(self._pending)

    def drain_pending(self) -> list[BlockPosition]:
        drained = list(self._pending)
        self._pending.clear()
        return drained

    def _mark_touched(self, position: BlockPosition) -> None:
        self._pending[position] = None


def _segment_cells(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Integer grid cells (cell size 1) intersected by each segment a->b.

    Amortized grid walking: every cell the segment passes through is
    visited, with boundary crossings at parameter t <= 1 inclusive.
    Returns the sorted unique (M, 3) union over all segments.
    """
    n = len(a)
    d = b - a
    cell = np.floor(a).astype(np.int64)
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        tdelta = np.where(d != 0, 1.0 / np.abs(d), np.inf)
        boundary = cell + (step > 0)
        tmax = np.where(d != 0, (boundary - a) / d, np.inf)

    visited = [cell.copy()]
    active = np.ones(n, dtype=bool)
    rows = np.arange(n)
    while True:
        axis = np.argmin(tmax, axis=1)
        tnext = tmax[rows, axis]
        active &= tnext <= 1.0
        idx = np.where(active)[0]
        if idx.size == 0:
            break
        ax = axis[idx]
        cell[idx, ax] += step[idx, ax]
        tmax[idx, ax] += tdelta[idx, ax]
        visited.append(cell[idx].copy())
    return np.unique(np.concatenate(visited), axis=0)


def _candidate_pixels(frame: DepthFrame, cfg: FusionConfig):
    depth = frame.depth[:: cfg.c_a, :: cfg.c_a]
    rows, cols = np.where((depth > 0) & (depth <= cfg.d_max))
    return rows * cfg.c_a, cols * cfg.c_a, depth[rows, cols]


def allocate_blocks(model: TsdfModel, frame: DepthFrame, intr: Intrinsics,
                    cfg: FusionConfig = FusionConfig()) -> list[BlockPosition]:
    """Allocate every block crossed by the truncation segment of each
    sampled pixel; returns the newly allocated positions.

    Only pixels at coordinates divisible by c_a on both axes are sampled;
    each contributes the segment [p - t*r, p + t*r] along its view ray.
    """
    v, u, d = _candidate_pixels(frame, cfg)
    if len(d) == 0:
        return []
    pose = frame.pose
    r = pose[:3, :3]
    origin = pose[:3, 3]

    dirs_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(d)], axis=1)
    points = (dirs_cam * d[:, None]) @ r.T + origin
    rays = dirs_cam @ r.T
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)

    t = model.grid.truncation
    scale = 1.0 / model.grid.block_size
    a = (points - t * rays) * scale
    b = (points + t * rays) * scale
    cells = _segment_cells(a, b)
    if np.any(cells < BLOCK_COORD_MIN) or np.any(cells > BLOCK_COORD_MAX):
        raise AddressingError("allocation outside the addressable block extent")

    created = []
    blocks = model.blocks
    for cell in cells:
        pos = (int(cell[0]), int(cell[1]), int(cell[2]))
        if pos not in blocks:
            blocks.allocate(pos)
            created.append(pos)
    return created


def _visible_positions(model: TsdfModel, frame: DepthFrame, intr: Intrinsics, d_max: float):
    """Conservative frustum cull of allocated blocks against a frame."""
    positions = model.blocks.positions()
    if not positions:
        return []
    pos = np.asarray(positions, dtype=np.float64)
    vs = model.grid.voxel_size
    centers = (pos * BLOCK_DIM + 0.5 * BLOCK_DIM) * vs
    r = frame.pose[:3, :3]
    t = frame.pose[:3, 3]
    cam = (centers - t) @ r
    z = cam[:, 2]
    radius = 0.5 * BLOCK_DIM * vs * np.sqrt(3.0)

    vis = (z > -radius) & (z - radius <= d_max + model.grid.truncation)
    zc = np.maximum(z - radius, 1e-6)
    margin_u = intr.fx * radius / zc
    margin_v = intr.fy * radius / zc
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam[:, 0] / np.maximum(z, 1e-6) + intr.cx
        v = intr.fy * cam[:, 1] / np.maximum(z, 1e-6) + intr.cy
    inside = (u + margin_u >= 0) & (u - margin_u <= intr.width - 1) & \
             (v + margin_v >= 0) & (v - margin_v <= intr.height - 1)
    vis &= inside | (z <= radius)  # camera inside or next to the block
    return [positions[i] for i in np.where(vis)[0]]


def integrate_frame(model: TsdfModel, frame: DepthFrame, intr: Intrinsics,
                    cfg: FusionConfig = FusionConfig()) -> int:
    """Fuse one frame into every visible allocated block.

    Voxel centers project into the full-resolution depth map with
    nearest-neighbor lookup; running-average update with per-sample weight
    1 and weight clamp at max_weight. Returns the number of updated
    voxels; touched blocks join pending_stream.
    """
    vis = _visible_positions(model, frame, intr, cfg.d_max)
    if not vis:
        return 0
    blocks = model.blocks
    data = np.stack([blocks.get(p) for p in vis])

    pos = np.asarray(vis, dtype=np.int64)
    vs = model.grid.voxel_size
    centers = (pos[:, None, :] * BLOCK_DIM + LOCAL_COORDS[None, :, :] + 0.5) * vs
    r = frame.pose[:3, :3]
    t = frame.pose[:3, 3]
    cam = (centers.reshape(-1, 3) - t) @ r
    cam = cam.reshape(centers.shape)
    z = cam[..., 2]

    front = z > 1e-9
    zsafe = np.where(front, z, 1.0)
    u = np.round(intr.fx * cam[..., 0] / zsafe + intr.cx).astype(np.int64)
    v = np.round(intr.fy * cam[..., 1] / zsafe + intr.cy).astype(np.int64)
    inimg = front & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    uc = np.clip(u, 0, intr.width - 1)
    vc = np.clip(v, 0, intr.height - 1)
    d = frame.depth[vc, uc]
    sample_c = frame.color[vc, uc]

    valid = inimg & (d > 0) & (d <= cfg.d_max)
    sdf = (d - z) / model.grid.truncation
    update = valid & (sdf >= -1.0)
    if not update.any():
        return 0

    w0 = data["w"].astype(np.float64)
    d0 = data["d"].astype(np.float64) / TSDF_SCALE
    s = np.minimum(sdf, 1.0)
    d1 = encode_tsdf((w0 * d0 + s) / (w0 + 1.0))
    c1 = np.round(
        (w0[..., None] * data["c"].astype(np.float64) + sample_c) / (w0[..., None] + 1.0)
    ).astype(np.uint8)
    w1 = np.minimum(w0 + 1, cfg.max_weight).astype(np.uint16)

    data["d"][update] = d1[update]
    data["c"][update] = c1[update]
    data["w"][update] = w1[update]

    touched = update.any(axis=1)
    for i in np.where(touched)[0]:
        p = vis[i]
        blocks.get(p)[:] = data[i]
        model._mark_touched(p)
    return int(update.sum())


def sample_voxels(model: TsdfModel, points: np.ndarray):
    """Nearest-voxel (D, W) lookup for world points; unallocated space reads
    as unobserved (D = 1, W = 0)."""
    vs = model.grid.voxel_size
    idx = np.floor(points / vs).astype(np.int64)
    block = idx >> 3
    local = idx - (block << 3)
    lin = local[:, 0] + 8 * local[:, 1] + 64 * local[:, 2]

    d = np.ones(len(points), dtype=np.float64)
    w = np.zeros(len(points), dtype=np.int64)
    uniq, inverse = np.unique(block, axis=0, return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    counts = np.bincount(inverse, minlength=len(uniq))
    offsets = np.concatenate([[0], np.cumsum(counts)])
    for j in range(len(uniq)):
        blk = model.blocks.get((int(uniq[j, 0]), int(uniq[j, 1]), int(uniq[j, 2])))
        if blk is None:
            continue
        sel = order[offsets[j] : offsets[j + 1]]
        d[sel] = blk["d"][lin[sel]] / TSDF_SCALE
        w[sel] = blk["w"][lin[sel]]
    return d, w


def _sample_colors(model: TsdfModel, points: np.ndarray) -> np.ndarray:
    vs = model.grid.voxel_size
    idx = np.floor(points / vs).astype(np.int64)
    block = idx >> 3
    local = idx - (block << 3)
    lin = local[:, 0] + 8 * local[:, 1] + 64 * local[:, 2]
    out = np.zeros((len(points), 3), dtype=np.uint8)
    for i in range(len(points)):
        blk = model.blocks.get((int(block[i, 0]), int(block[i, 1]), int(block[i, 2])))
        if blk is not None:
            out[i] = blk["c"][lin[i]]
    return out


def raycast_preview(model: TsdfModel, pose: np.ndarray, intr: Intrinsics,
                    cfg: FusionConfig = FusionConfig()):
    """Ray-march the model for a live preview; returns (depth, normals, color).

    Zero crossings are reported only between consecutive stable samples
    (W >= c_w); unstable voxels read as unobserved. Pixels without a
    stable crossing have depth 0.
    """
    pose = np.asarray(pose, dtype=np.float64)
    r = pose[:3, :3]
    origin = pose[:3, 3]
    h, w = intr.height, intr.width

    us, vs_ = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dirs_cam = np.stack(
        [(us - intr.cx) / intr.fx, (vs_ - intr.cy) / intr.fy, np.ones((h, w))], axis=-1
    ).reshape(-1, 3)
    inv_norm = 1.0 / np.linalg.norm(dirs_cam, axis=1)
    dirs = dirs_cam @ r.T
    dirs *= inv_norm[:, None]

    step = 0.5 * model.grid.truncation
    near = model.grid.voxel_size
    far = cfg.d_max
    n_steps = int(np.ceil((far - near) / step)) + 1

    n = h * w
    hit_s = np.zeros(n, dtype=np.float64)
    active = np.ones(n, dtype=bool)
    prev_d = np.ones(n, dtype=np.float64)
    prev_stable = np.zeros(n, dtype=bool)

    for i in range(n_steps + 1):
        s = near + i * step
        if s > far + step:
            break
        idx = np.where(active)[0]
        if idx.size == 0:
            break
        pts = origin + s * dirs[idx]
        d, wgt = sample_voxels(model, pts)
        stable = (wgt >= cfg.c_w) & (wgt > 0)
        cross = prev_stable[idx] & stable & (prev_d[idx] > 0) & (d <= 0)
        if cross.any():
            ci = idx[cross]
            frac = prev_d[ci] / (prev_d[ci] - d[cross])
            hit_s[ci] = (s - step) + step * frac
            active[ci] = False
        prev_d[idx] = np.where(stable, d, 1.0)
        prev_stable[idx] = stable

    hit = hit_s > 0
    depth = (hit_s * inv_norm).reshape(h, w)  # ray length -> camera z-depth
    depth[~hit.reshape(h, w)] = 0.0
    color = np.zeros((n, 3), dtype=np.uint8)
    if hit.any():
        color[hit] = _sample_colors(model, origin + hit_s[hit, None] * dirs[hit])
    frame = DepthFrame(depth, color.reshape(h, w, 3), pose)
    normals = compute_normals(frame, intr)
    return depth, normals, color.reshape(h, w, 3)
