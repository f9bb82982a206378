"""Ray-cast occupancy features: 2D observability counts and 3D visibility states.

Traversal is a supercover variant of incremental grid stepping: when a segment
crosses a cell corner (or voxel edge/vertex in 3D) exactly, all touching
neighbor cells are emitted, which keeps corner cases deterministic across
platforms. Rays are cast in 2D for observability and in 3D for visibility.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .dataio import PointCloud
from .errors import ConfigError
from .pillars import GridConfig, crop_mask

# states of the 3D visibility grid
UNKNOWN = 0
FREE = 1
OCCUPIED = 2

_TIE_TOL = 1e-12  # tie tolerance on the segment parameter t in [0, 1]


@dataclass(frozen=True)
class ObservabilityMap:
    """Dense per-cell ray-pass counts on the top-view grid."""

    counts: np.ndarray  # (H, W) int64
    origin_cell: tuple[int, int]

    def normalized(self) -> np.ndarray:
        """log(1 + count) scaled by the frame maximum, in [0, 1]."""
        peak = self.counts.max()
        if peak <= 0:
            return np.zeros_like(self.counts, dtype=np.float64)
        return np.log1p(self.counts) / math.log1p(peak)


@dataclass(frozen=True)
class VoxelStateGrid:
    """(H, W, D) grid over {UNKNOWN, FREE, OCCUPIED}."""

    states: np.ndarray


def _clip_segment(p0: np.ndarray, p1: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Liang-Barsky clip of segment p0-p1 to the closed box [lo, hi]; None if outside."""
    d = p1 - p0
    t0, t1 = 0.0, 1.0
    for axis in range(len(lo)):
        if d[axis] == 0.0:
            if p0[axis] < lo[axis] or p0[axis] > hi[axis]:
                return None
        else:
            ta = (lo[axis] - p0[axis]) / d[axis]
            tb = (hi[axis] - p0[axis]) / d[axis]
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
            if t0 > t1:
                return None
    return p0 + t0 * d, p0 + t1 * d


def _cell_of(u: np.ndarray, shape: tuple[int, ...]) -> list[int]:
    return [min(max(int(math.floor(u[i])), 0), shape[i] - 1) for i in range(len(shape))]


def _supercover(u0: np.ndarray, u1: np.ndarray, shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Ordered supercover traversal in cell units; endpoints must lie in [0, shape]."""
    ndim = len(shape)
    cur = _cell_of(u0, shape)
    end = _cell_of(u1, shape)
    d = u1 - u0
    step = [0] * ndim
    tmax = [math.inf] * ndim
    tdelta = [math.inf] * ndim
    for i in range(ndim):
        if d[i] > 0:
            step[i] = 1
            tmax[i] = (cur[i] + 1 - u0[i]) / d[i]
            tdelta[i] = 1.0 / d[i]
        elif d[i] < 0:
            step[i] = -1
            tmax[i] = (cur[i] - u0[i]) / d[i]
            tdelta[i] = -1.0 / d[i]

    cells = [tuple(cur)]
    while cur != end:
        candidates = [i for i in range(ndim) if cur[i] != end[i] and step[i] != 0]
        if not candidates:
            break
        tmin = min(tmax[i] for i in candidates)
        tied = [i for i in candidates if tmax[i] <= tmin + _TIE_TOL]
        if len(tied) > 1:
            # corner/edge crossing: emit every partially-stepped neighbor
            for size in range(1, len(tied)):
                for subset in combinations(tied, size):
                    cell = list(cur)
                    for i in subset:
                        cell[i] += step[i]
                    cells.append(tuple(cell))
        for i in tied:
            cur[i] += step[i]
            tmax[i] += tdelta[i]
        cells.append(tuple(cur))
    return cells


def traverse_cells_2d(
    origin: tuple[float, float], endpoint: tuple[float, float], cfg: GridConfig
) -> list[tuple[int, int]]:
    """Ordered (row, col) cells traversed by the segment, origin and endpoint included.

    The segment is clipped to the grid extent first; a degenerate segment
    yields its single cell.
    """
    lo = np.array([cfg.x_range[0], cfg.y_range[0]])
    hi = np.array([cfg.x_range[1], cfg.y_range[1]])
    clipped = _clip_segment(np.asarray(origin, dtype=np.float64),
                            np.asarray(endpoint, dtype=np.float64), lo, hi)
    if clipped is None:
        return []
    size = np.array([cfg.pillar_size[0], cfg.pillar_size[1]])
    u0 = (clipped[0] - lo) / size
    u1 = (clipped[1] - lo) / size
    cells = _supercover(u0, u1, (cfg.width, cfg.height))
    return [(cy, cx) for cx, cy in cells]


def _batch_observability(origin_xy: np.ndarray, endpoints: np.ndarray, cfg: GridConfig) -> np.ndarray:
    """Vectorized counterpart of per-point traverse_cells_2d accumulation.

    Mirrors the scalar stepping rules expression-for-expression so both paths
    agree bitwise; equivalence is covered by tests.
    """
    counts = np.zeros((cfg.height, cfg.width), dtype=np.int64)
    if len(endpoints) == 0:
        return counts
    lo = np.array([cfg.x_range[0], cfg.y_range[0]])
    size = np.array([cfg.pillar_size[0], cfg.pillar_size[1]])
    shape = np.array([cfg.width, cfg.height])

    u0 = (origin_xy - lo) / size
    u1 = (endpoints - lo) / size
    cur = np.clip(np.floor(u0).astype(np.int64), 0, shape - 1)
    cur = np.broadcast_to(cur, u1.shape).copy()
    end = np.clip(np.floor(u1).astype(np.int64), 0, shape - 1)
    d = u1 - u0
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        nb = cur + (step > 0)
        tmax = np.where(step != 0, (nb - u0) / d, np.inf)
        tdelta = np.where(step != 0, np.abs(1.0 / d), np.inf)

    np.add.at(counts, (cur[:, 1], cur[:, 0]), 1)
    active = (cur != end).any(axis=1)
    while active.any():
        cand = active[:, None] & (cur != end) & (step != 0)
        t_eff = np.where(cand, tmax, np.inf)
        tmin = t_eff.min(axis=1)
        do_step = cand & (tmax <= (tmin + _TIE_TOL)[:, None])
        both = do_step.all(axis=1)
        if both.any():
            bx = np.flatnonzero(both)
            np.add.at(counts, (cur[bx, 1], cur[bx, 0] + step[bx, 0]), 1)
            np.add.at(counts, (cur[bx, 1] + step[bx, 1], cur[bx, 0]), 1)
        cur[do_step] += step[do_step]
        tmax[do_step] += tdelta[do_step]
        ai = np.flatnonzero(active)
        np.add.at(counts, (cur[ai, 1], cur[ai, 0]), 1)
        active = (cur != end).any(axis=1)
    return counts


def observability(cloud: PointCloud, cfg: GridConfig, origin=(0.0, 0.0, 0.0)) -> ObservabilityMap:
    """Per-cell count of laser rays from origin to each in-range point."""
    ox, oy = float(origin[0]), float(origin[1])
    keep = crop_mask(cloud.xyz, cfg)
    endpoints = cloud.xyz[keep][:, :2].astype(np.float64)
    inside = (cfg.x_range[0] <= ox <= cfg.x_range[1]) and (cfg.y_range[0] <= oy <= cfg.y_range[1])
    if inside:
        counts = _batch_observability(np.array([ox, oy]), endpoints, cfg)
    else:
        # origin outside the grid: per-ray clipping path
        counts = np.zeros((cfg.height, cfg.width), dtype=np.int64)
        for ex, ey in endpoints:
            for r, c in traverse_cells_2d((ox, oy), (ex, ey), cfg):
                counts[r, c] += 1
    ocell = _cell_of(
        np.array([(ox - cfg.x_range[0]) / cfg.pillar_size[0],
                  (oy - cfg.y_range[0]) / cfg.pillar_size[1]]),
        (cfg.width, cfg.height),
    )
    return ObservabilityMap(counts, (ocell[1], ocell[0]))


def visibility(cloud: PointCloud, cfg: GridConfig, origin=(0.0, 0.0, 0.0)) -> VoxelStateGrid:
    """Three-state voxel grid from 3D rays that stop at the first point-bearing voxel."""
    depth = cfg.depth
    states = np.zeros((cfg.height, cfg.width, depth), dtype=np.uint8)
    keep = crop_mask(cloud.xyz, cfg)
    pts = cloud.xyz[keep].astype(np.float64)
    if len(pts) == 0:
        return VoxelStateGrid(states)

    lo = np.array([cfg.x_range[0], cfg.y_range[0], cfg.z_range[0]])
    hi = np.array([cfg.x_range[1], cfg.y_range[1], cfg.z_range[1]])
    # z voxels tile the extent exactly even when it is not a multiple of dz
    size = np.array([cfg.pillar_size[0], cfg.pillar_size[1],
                     (cfg.z_range[1] - cfg.z_range[0]) / depth])
    shape = (cfg.width, cfg.height, depth)

    point_count = np.zeros(shape, dtype=np.int64)
    u_pts = (pts - lo) / size
    vox = np.clip(np.floor(u_pts).astype(np.int64), 0, np.array(shape) - 1)
    np.add.at(point_count, (vox[:, 0], vox[:, 1], vox[:, 2]), 1)

    o = np.asarray(origin, dtype=np.float64)
    for p in pts:
        clipped = _clip_segment(o, p, lo, hi)
        if clipped is None:
            continue
        u0 = (clipped[0] - lo) / size
        u1 = (clipped[1] - lo) / size
        for cx, cy, cz in _supercover(u0, u1, shape):
            if point_count[cx, cy, cz] > 0:
                states[cy, cx, cz] = OCCUPIED
                break
            if states[cy, cx, cz] == UNKNOWN:
                states[cy, cx, cz] = FREE
    return VoxelStateGrid(states)


def inject_noise(cloud: PointCloud, snr: float, seed: int, cfg: GridConfig) -> PointCloud:
    """Append floor(N / snr) uniform noise points inside the crop volume.

    Noise reflectance is uniform in [0, 1]; when the cloud carries raw class
    ids the noise points get raw id 0 (unlabeled). Original points unchanged.
    """
    if snr <= 0:
        raise ConfigError(f"snr must be positive, got {snr}")
    n_noise = int(len(cloud) // snr)
    if n_noise == 0:
        return cloud
    rng = np.random.default_rng(seed)
    xyz = np.empty((n_noise, 3), dtype=np.float32)
    for axis, (a, b) in enumerate((cfg.x_range, cfg.y_range, cfg.z_range)):
        xyz[:, axis] = rng.uniform(a, b, n_noise)
    refl = rng.uniform(0.0, 1.0, n_noise).astype(np.float32)
    new_xyz = np.vstack([cloud.xyz, xyz])
    new_refl = np.concatenate([cloud.reflectance, refl])
    if cloud.raw_class is not None:
        new_raw = np.concatenate([cloud.raw_class, np.zeros(n_noise, dtype=np.uint16)])
        return PointCloud(new_xyz, new_refl, new_raw)
    return PointCloud(new_xyz, new_refl)
