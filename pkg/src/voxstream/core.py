"""Sparse voxel-block model primitives.

Voxel value encodings, block addressing, the spatial hash, and the block
hash map that every other module stores its data in.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

BLOCK_DIM = 8
BLOCK_VOXELS = BLOCK_DIM**3

TSDF_SCALE = 32767

# In-memory layouts are packed little-endian so a block's buffer is also its
# wire representation (7 bytes per TSDF voxel, 4 per MC voxel).
TSDF_DTYPE = np.dtype([("d", "<i2"), ("w", "<u2"), ("c", "u1", (3,))])
MC_DTYPE = np.dtype([("i", "u1"), ("c", "u1", (3,))])

# Linear voxel order inside a block is x-fastest: index = x + 8y + 64z.
_IDX = np.arange(BLOCK_VOXELS)
LOCAL_COORDS = np.stack([_IDX % 8, (_IDX // 8) % 8, _IDX // 64], axis=1)

BLOCK_COORD_MIN = -32768
BLOCK_COORD_MAX = 32767

BlockPosition = tuple[int, int, int]


class PoolExhaustedError(RuntimeError):
    """Raised when allocating a block would exceed the configured pool size."""


class AddressingError(ValueError):
    """Raised when a world position falls outside the addressable block extent."""


@dataclass(frozen=True)
class GridConfig:
    """Geometry and capacity parameters shared by all voxel-block models."""

    voxel_size: float = 0.005
    truncation: float = 0.060
    block_dim: int = 8
    tsdf_bucket_count: int = 2**20
    mc_bucket_count: int = 2**22
    tsdf_pool_blocks: int = 2**19
    mc_pool_blocks: int = 2**20

    def __post_init__(self) -> None:
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.truncation < 2 * self.voxel_size:
            raise ValueError("truncation must be at least two voxels")
        if self.block_dim != BLOCK_DIM:
            raise ValueError("block_dim is fixed at 8")
        for name in ("tsdf_bucket_count", "mc_bucket_count", "tsdf_pool_blocks", "mc_pool_blocks"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def block_size(self) -> float:
        """World-space edge length of one block in meters."""
        return self.block_dim * self.voxel_size


def encode_tsdf(d):
    """Encode a truncated signed distance in [-1, 1] to int16.

    Values outside [-1, 1] are clamped; fusion can transiently exceed the
    range by rounding.
    """
    return np.round(np.clip(d, -1.0, 1.0) * TSDF_SCALE).astype(np.int16)


def decode_tsdf(v):
    """Decode an int16 TSDF value back to a float in [-1, 1]."""
    return np.asarray(v, dtype=np.float64) / TSDF_SCALE


def block_hash(position: BlockPosition, bucket_count: int) -> int:
    """Spatial hash of a block position into [0, bucket_count).

    Uses the standard large-prime XOR scheme; bucket_count must be a power
    of two.
    """
    if bucket_count <= 0 or bucket_count & (bucket_count - 1):
        raise ValueError("bucket_count must be a positive power of two")
    x, y, z = position
    return (x * 73856093 ^ y * 19349669 ^ z * 83492791) % bucket_count


def world_to_voxel(point, grid: GridConfig) -> tuple[BlockPosition, tuple[int, int, int]]:
    """Map a world-space point to (block position, local voxel coords).

    Floor-based partition: the voxel with index i covers
    [i * voxel_size, (i + 1) * voxel_size) on each axis.
    """
    p = np.asarray(point, dtype=np.float64)
    v = np.floor(p / grid.voxel_size).astype(np.int64)
    b = v >> 3
    if np.any(b < BLOCK_COORD_MIN) or np.any(b > BLOCK_COORD_MAX):
        raise AddressingError(f"point {tuple(p)} outside addressable extent")
    local = v - (b << 3)
    return (int(b[0]), int(b[1]), int(b[2])), (int(local[0]), int(local[1]), int(local[2]))


def voxel_origin(block: BlockPosition, local, grid: GridConfig) -> np.ndarray:
    """World-space minimum corner of a voxel, the inverse of world_to_voxel."""
    b = np.asarray(block, dtype=np.float64)
    l = np.asarray(local, dtype=np.float64)
    return (b * BLOCK_DIM + l) * grid.voxel_size


def linear_index(x, y, z):
    """Linear index of a local voxel coordinate, x-fastest."""
    return x + 8 * y + 64 * z


def empty_tsdf_block() -> np.ndarray:
    """A fresh TSDF block: W = 0 everywhere, D at the free-space default 1."""
    block = np.zeros(BLOCK_VOXELS, dtype=TSDF_DTYPE)
    block["d"] = TSDF_SCALE
    return block


def empty_mc_block() -> np.ndarray:
    """A fresh MC block: every cell suppressed (I = 0), color black."""
    return np.zeros(BLOCK_VOXELS, dtype=MC_DTYPE)


class BlockHashMap:
    """Sparse mapping from block positions to dense 512-voxel blocks.

    Iteration follows insertion order, which makes model scans
    deterministic. A single writer may mutate the map; concurrent readers
    are safe only between mutations.
    """

    def __init__(self, dtype: np.dtype, bucket_count: int, pool_blocks: int, empty_factory=None):
        if bucket_count <= 0 or bucket_count & (bucket_count - 1):
            raise ValueError("bucket_count must be a positive power of two")
        if pool_blocks <= 0:
            raise ValueError("pool_blocks must be positive")
        self.dtype = dtype
        self.bucket_count = bucket_count
        self.pool_blocks = pool_blocks
        self._empty_factory = empty_factory or (lambda: np.zeros(BLOCK_VOXELS, dtype=dtype))
        self._blocks: dict[BlockPosition, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._blocks)

    def __contains__(self, position: BlockPosition) -> bool:
        return position in self._blocks

    def __iter__(self) -> Iterator[BlockPosition]:
        return iter(self._blocks)

    def positions(self) -> list[BlockPosition]:
        return list(self._blocks)

    def items(self):
        return self._blocks.items()

    def get(self, position: BlockPosition):
        """The live block array at position, or None if absent."""
        return self._blocks.get(position)

    def allocate(self, position: BlockPosition) -> np.ndarray:
        """Return the block at position, creating an empty one if absent."""
        block = self._blocks.get(position)
        if block is None:
            if len(self._blocks) >= self.pool_blocks:
                raise PoolExhaustedError(f"block pool of {self.pool_blocks} blocks exhausted")
            block = self._empty_factory()
            self._blocks[position] = block
        return block

    def put(self, position: BlockPosition, data: np.ndarray) -> None:
        """Copy data into the block at position, allocating if needed."""
        if data.shape != (BLOCK_VOXELS,):
            raise ValueError("block data must have shape (512,)")
        self.allocate(position)[:] = data

    def remove(self, position: BlockPosition) -> bool:
        """Drop a block; returns False if it was not present."""
        return self._blocks.pop(position, None) is not None

    def bucket_of(self, position: BlockPosition) -> int:
        return block_hash(position, self.bucket_count)
