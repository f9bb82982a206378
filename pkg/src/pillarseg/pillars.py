"""Top-view pillar rasterization and the (P, N, C) feature tensor.

Cells are half-open along x and y: a point on a shared boundary belongs to
the cell whose low edge it sits on, so assignment is total and deterministic.
Row index follows y, column index follows x.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import PointCloud
from .errors import ConfigError, ShapeError

AUGMENTED_CHANNELS = 10  # x, y, z, r, dxyz to pillar mean, dxyz to cell center


@dataclass(frozen=True)
class GridConfig:
    """Crop ranges and pillar geometry of the top-view grid."""

    x_range: tuple[float, float]
    y_range: tuple[float, float]
    z_range: tuple[float, float]
    pillar_size: tuple[float, float, float]
    max_points: int
    max_pillars: int

    def __post_init__(self):
        for name, (lo, hi) in (("x", self.x_range), ("y", self.y_range), ("z", self.z_range)):
            if not hi > lo:
                raise ConfigError(f"{name}_range max must exceed min, got [{lo}, {hi}]")
        if any(s <= 0 for s in self.pillar_size):
            raise ConfigError("pillar_size components must be positive")
        for name, (lo, hi), step in (
            ("x", self.x_range, self.pillar_size[0]),
            ("y", self.y_range, self.pillar_size[1]),
        ):
            cells = (hi - lo) / step
            if abs(cells - round(cells)) > 1e-6:
                raise ConfigError(f"{name}_range extent is not a multiple of pillar_size")
        if self.max_points < 1 or self.max_pillars < 1:
            raise ConfigError("max_points and max_pillars must be at least 1")

    @property
    def width(self) -> int:
        return int(round((self.x_range[1] - self.x_range[0]) / self.pillar_size[0]))

    @property
    def height(self) -> int:
        return int(round((self.y_range[1] - self.y_range[0]) / self.pillar_size[1]))

    @property
    def depth(self) -> int:
        cells = (self.z_range[1] - self.z_range[0]) / self.pillar_size[2]
        return max(1, int(round(cells)))

    @property
    def z_center(self) -> float:
        return 0.5 * (self.z_range[0] + self.z_range[1])

    def cell_centers_xy(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """World (x, y) of cell centers for the given (row, col) indices."""
        x = self.x_range[0] + (np.asarray(cols) + 0.5) * self.pillar_size[0]
        y = self.y_range[0] + (np.asarray(rows) + 0.5) * self.pillar_size[1]
        return np.column_stack([x, y])


@dataclass(frozen=True)
class PillarSet:
    """Fixed-size pillar tensor.

    ``features`` is (max_pillars, max_points, C); rows `[0, valid_pillars)` are
    populated in ascending (row, col) order, everything beyond the valid counts
    is exactly zero.
    """

    features: np.ndarray
    pillar_coords: np.ndarray  # (max_pillars, 2) int, (row, col)
    valid_points: np.ndarray  # (max_pillars,) int
    valid_pillars: int

    @property
    def mask(self) -> np.ndarray:
        """(max_pillars, max_points) bool validity mask."""
        n = self.features.shape[1]
        return np.arange(n)[None, :] < self.valid_points[:, None]


def crop_mask(xyz: np.ndarray, cfg: GridConfig) -> np.ndarray:
    """Points inside the half-open crop box [min, max) on all three axes."""
    m = np.ones(len(xyz), dtype=bool)
    for axis, (lo, hi) in enumerate((cfg.x_range, cfg.y_range, cfg.z_range)):
        m &= (xyz[:, axis] >= lo) & (xyz[:, axis] < hi)
    return m


def cell_indices(xyz: np.ndarray, cfg: GridConfig) -> tuple[np.ndarray, np.ndarray]:
    """(row, col) cell index per point; caller guarantees points are in range."""
    cols = np.floor((xyz[:, 0] - cfg.x_range[0]) / cfg.pillar_size[0]).astype(np.int64)
    rows = np.floor((xyz[:, 1] - cfg.y_range[0]) / cfg.pillar_size[1]).astype(np.int64)
    np.clip(cols, 0, cfg.width - 1, out=cols)
    np.clip(rows, 0, cfg.height - 1, out=rows)
    return rows, cols


def pillarize(cloud: PointCloud, cfg: GridConfig, rng_seed: int = 0) -> PillarSet:
    """Crop and rasterize a cloud into pillars of raw (x, y, z, r) channels.

    Per-pillar overflow beyond ``max_points`` and pillar overflow beyond
    ``max_pillars`` are resolved by seeded uniform sampling without
    replacement; when nothing overflows the output is seed-independent.
    """
    n_max = cfg.max_points
    p_max = cfg.max_pillars
    features = np.zeros((p_max, n_max, 4), dtype=np.float64)
    coords = np.zeros((p_max, 2), dtype=np.int64)
    valid_points = np.zeros(p_max, dtype=np.int64)

    keep = crop_mask(cloud.xyz, cfg)
    if not keep.any():
        return PillarSet(features, coords, valid_points, 0)

    xyz = cloud.xyz[keep].astype(np.float64)
    refl = cloud.reflectance[keep].astype(np.float64)
    rows, cols = cell_indices(xyz, cfg)
    keys = rows * cfg.width + cols

    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    rng: np.random.Generator | None = None

    pillar_ids = np.arange(len(uniq))
    if len(uniq) > p_max:
        rng = np.random.default_rng(rng_seed)
        pillar_ids = np.sort(rng.choice(len(uniq), size=p_max, replace=False))
    n_valid = len(pillar_ids)

    # stable grouping: points of each pillar in original cloud order
    order = np.argsort(inverse, kind="stable")
    starts = np.zeros(len(uniq) + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])

    pts = np.column_stack([xyz, refl])
    for out_idx, pid in enumerate(pillar_ids):
        members = order[starts[pid] : starts[pid + 1]]
        if len(members) > n_max:
            if rng is None:
                rng = np.random.default_rng(rng_seed)
            sel = np.sort(rng.choice(len(members), size=n_max, replace=False))
            members = members[sel]
        k = len(members)
        features[out_idx, :k] = pts[members]
        valid_points[out_idx] = k
        coords[out_idx, 0] = uniq[pid] // cfg.width
        coords[out_idx, 1] = uniq[pid] % cfg.width

    return PillarSet(features, coords, valid_points, n_valid)


def augment_points(pset: PillarSet, cfg: GridConfig) -> PillarSet:
    """Expand raw (x, y, z, r) channels to the 10-channel encoding.

    Adds per-point offsets to the arithmetic mean of the pillar's valid points
    and offsets to the pillar's geometric cell center (z offset taken to the
    z-range midpoint). Padded slots stay zero.
    """
    if pset.features.shape[2] != 4:
        raise ShapeError(f"expected raw 4-channel features, got {pset.features.shape[2]}")
    p_max, n_max, _ = pset.features.shape
    out = np.zeros((p_max, n_max, AUGMENTED_CHANNELS), dtype=pset.features.dtype)
    out[:, :, :4] = pset.features

    mask = pset.mask
    counts = np.maximum(pset.valid_points, 1).astype(np.float64)
    xyz = pset.features[:, :, :3]
    means = xyz.sum(axis=1) / counts[:, None]
    centers = np.zeros((p_max, 3))
    centers[:, :2] = cfg.cell_centers_xy(pset.pillar_coords[:, 0], pset.pillar_coords[:, 1])
    centers[:, 2] = cfg.z_center

    out[:, :, 4:7] = np.where(mask[:, :, None], xyz - means[:, None, :], 0.0)
    out[:, :, 7:10] = np.where(mask[:, :, None], xyz - centers[:, None, :], 0.0)
    out[pset.valid_pillars :] = 0.0
    return PillarSet(out, pset.pillar_coords, pset.valid_points, pset.valid_pillars)


def compact(pset: PillarSet, dtype=np.float32) -> PillarSet:
    """Storage form trimmed to the valid pillar rows (cache use only; the
    fixed-size contract form keeps max_pillars rows)."""
    v = pset.valid_pillars
    return PillarSet(
        np.ascontiguousarray(pset.features[:v], dtype=dtype),
        pset.pillar_coords[:v].copy(),
        pset.valid_points[:v].copy(),
        v,
    )


def pillar_centers(pset: PillarSet, cfg: GridConfig) -> np.ndarray:
    """(valid_pillars, 3) geometric cell centers of the valid pillars."""
    v = pset.valid_pillars
    xy = cfg.cell_centers_xy(pset.pillar_coords[:v, 0], pset.pillar_coords[:v, 1])
    return np.column_stack([xy, np.full(v, cfg.z_center)])


def scatter(features_per_pillar: np.ndarray, pset: PillarSet, cfg: GridConfig) -> np.ndarray:
    """Scatter per-pillar feature rows into a dense (C, H, W) pseudo image."""
    v = pset.valid_pillars
    if features_per_pillar.shape[0] < v:
        raise ShapeError(
            f"feature rows {features_per_pillar.shape[0]} < valid pillars {v}"
        )
    rows = pset.pillar_coords[:v, 0]
    cols = pset.pillar_coords[:v, 1]
    if v and (rows.max() >= cfg.height or cols.max() >= cfg.width):
        raise AssertionError("pillar coordinate outside grid bounds")
    image = np.zeros((features_per_pillar.shape[1], cfg.height, cfg.width),
                     dtype=features_per_pillar.dtype)
    image[:, rows, cols] = features_per_pillar[:v].T
    return image


def gather(image: np.ndarray, pset: PillarSet) -> np.ndarray:
    """Per-pillar feature rows read back from a pseudo image at the valid coords."""
    v = pset.valid_pillars
    rows = pset.pillar_coords[:v, 0]
    cols = pset.pillar_coords[:v, 1]
    return image[:, rows, cols].T
