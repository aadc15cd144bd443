"""Pillar voxelization: fixed (padded, static-shape) and dynamic (ragged) layouts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class CapacityError(ValueError):
    """A voxel holds more points than the fixed layout can store."""


@dataclass
class PointCloud:
    """``points`` is m x f; columns 0..2 are x, y, z in meters, the rest are features."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0 and pts.ndim != 2:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] < 3:
            raise ValueError(f"PointCloud: expected m x f with f >= 3, got {pts.shape}")
        if not np.isfinite(pts[:, :3]).all():
            raise ValueError("PointCloud: coordinates must be finite")
        self.points = pts

    @property
    def m(self) -> int:
        return self.points.shape[0]

    @property
    def f(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class PillarGridConfig:
    origin_xy: tuple[float, float] = (-5.12, -5.12)
    voxel_size: float = 0.32
    grid_extent: tuple[int, int] = (32, 32)
    cap_points: int = 32
    max_voxels: int = 1024

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be > 0")
        if self.cap_points < 1 or self.max_voxels < 1:
            raise ValueError("cap_points and max_voxels must be >= 1")
        if min(self.grid_extent) < 1:
            raise ValueError("grid_extent must be positive")


@dataclass
class DropStats:
    cap: int = 0
    out_of_range: int = 0
    voxel: int = 0


@dataclass
class FixedVoxelBatch:
    features: np.ndarray      # N x P x f, zero where mask is 0
    mask: np.ndarray          # N x P of {0, 1}
    coords: np.ndarray        # N x 2 int (ix, iy); rows >= num_voxels are zero
    num_voxels: int
    drop_stats: DropStats = field(default_factory=DropStats)
    kept: int = 0

    @property
    def occupied(self) -> slice:
        return slice(0, self.num_voxels)


@dataclass
class DynamicVoxelBatch:
    flat_features: np.ndarray  # m' x f, in-range points in input order
    voxel_id: np.ndarray       # m' slot index per point
    coords: np.ndarray         # n_occ x 2
    n_occ: int


def voxel_index(x: float, y: float, config: PillarGridConfig) -> tuple[int, int] | None:
    """Cell of (x, y) on the half-open grid, or None when outside it."""
    ix, iy, ok = voxel_indices(np.array([[x, y]]), config)
    return (int(ix[0]), int(iy[0])) if ok[0] else None


def voxel_indices(xy: np.ndarray, config: PillarGridConfig):
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    ix = np.floor((xy[:, 0] - config.origin_xy[0]) / config.voxel_size)
    iy = np.floor((xy[:, 1] - config.origin_xy[1]) / config.voxel_size)
    ok = (ix >= 0) & (iy >= 0) & (ix < config.grid_extent[0]) & (iy < config.grid_extent[1])
    ix = np.where(ok, ix, -1).astype(np.int64)
    iy = np.where(ok, iy, -1).astype(np.int64)
    return ix, iy, ok


def _group(cloud: PointCloud, config: PillarGridConfig):
    """Slot per in-range point, slots ordered by first occurrence."""
    ix, iy, ok = voxel_indices(cloud.points, config)
    idx = np.flatnonzero(ok)
    cell = ix[idx] * config.grid_extent[1] + iy[idx]
    uniq, first, inv = np.unique(cell, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank_of = np.empty_like(order)
    rank_of[order] = np.arange(len(order))
    slot = rank_of[inv]
    cells = uniq[order]
    coords = np.stack([cells // config.grid_extent[1], cells % config.grid_extent[1]], axis=1)
    return idx, slot, coords.astype(np.int64), int((~ok).sum())


def _within_slot_rank(slot: np.ndarray) -> np.ndarray:
    order = np.argsort(slot, kind="stable")
    sorted_slot = slot[order]
    starts = np.r_[0, np.flatnonzero(np.diff(sorted_slot)) + 1] if len(slot) else np.zeros(0, int)
    group_start = np.repeat(starts, np.diff(np.r_[starts, len(slot)]))
    rank = np.empty_like(slot)
    rank[order] = np.arange(len(slot)) - group_start
    return rank


def fixed_voxelize(cloud: PointCloud, config: PillarGridConfig) -> FixedVoxelBatch:
    """Bucket points into an N x P x f padded tensor.

    Points beyond ``cap_points`` in a pillar are dropped in input order, and
    pillars first seen after ``max_voxels`` are dropped whole.
    """
    n, p, f = config.max_voxels, config.cap_points, cloud.f
    features = np.zeros((n, p, f))
    mask = np.zeros((n, p))
    coords_out = np.zeros((n, 2), dtype=np.int64)
    idx, slot, coords, out_of_range = _group(cloud, config)
    stats = DropStats(out_of_range=out_of_range)
    in_budget = slot < n
    stats.voxel = int((~in_budget).sum())
    idx, slot = idx[in_budget], slot[in_budget]
    rank = _within_slot_rank(slot)
    keep = rank < p
    stats.cap = int((~keep).sum())
    idx, slot, rank = idx[keep], slot[keep], rank[keep]
    features[slot, rank] = cloud.points[idx]
    mask[slot, rank] = 1.0
    n_occ = min(len(coords), n)
    coords_out[:n_occ] = coords[:n_occ]
    return FixedVoxelBatch(features, mask, coords_out, n_occ, stats, kept=len(idx))


def dynamic_voxelize(cloud: PointCloud, config: PillarGridConfig) -> DynamicVoxelBatch:
    """Ragged layout: every in-range point plus its voxel slot; no cap."""
    idx, slot, coords, _ = _group(cloud, config)
    return DynamicVoxelBatch(cloud.points[idx].copy(), slot, coords, len(coords))


def densify(dyn: DynamicVoxelBatch, config: PillarGridConfig) -> FixedVoxelBatch:
    """Fixed layout holding exactly the points of ``dyn``."""
    counts = np.bincount(dyn.voxel_id, minlength=dyn.n_occ)
    over = np.flatnonzero(counts > config.cap_points)
    if len(over):
        bad = ", ".join(f"({dyn.coords[i, 0]}, {dyn.coords[i, 1]}): {counts[i]}" for i in over[:10])
        raise CapacityError(f"voxels exceed cap_points={config.cap_points}: {bad}")
    if dyn.n_occ > config.max_voxels:
        raise CapacityError(f"{dyn.n_occ} voxels exceed max_voxels={config.max_voxels}")
    n, p = config.max_voxels, config.cap_points
    f = dyn.flat_features.shape[1]
    features = np.zeros((n, p, f))
    mask = np.zeros((n, p))
    coords = np.zeros((n, 2), dtype=np.int64)
    rank = _within_slot_rank(dyn.voxel_id)
    features[dyn.voxel_id, rank] = dyn.flat_features
    mask[dyn.voxel_id, rank] = 1.0
    coords[:dyn.n_occ] = dyn.coords
    return FixedVoxelBatch(features, mask, coords, dyn.n_occ, DropStats(), kept=len(dyn.voxel_id))
