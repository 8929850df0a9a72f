"""Spectral PCA reduction and the dual pillar/voxel grid partition.

Both grids share the horizontal cell size so a voxel's (x, y) index is
directly comparable with a pillar index.  Cell indices follow
`floor((coord - range_min) / cell)`; real coordinates are recovered as
`index * cell + range_min`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene.types import HpcScene, SceneError


class ConfigError(ValueError):
    pass


@dataclass
class PcaModel:
    mean: np.ndarray                    # (B,)
    components: np.ndarray              # (k, B), rows orthonormal
    explained_variance_ratio: np.ndarray  # (k,), non-increasing

    @property
    def num_components(self) -> int:
        return self.components.shape[0]


def pca_fit(spectra: np.ndarray, k: int) -> PcaModel:
    """Principal axes by descending variance via covariance eigendecomposition.

    Sign convention: the largest-magnitude entry of each component is made
    positive, so fitted models are stable across runs.  Components beyond
    the data rank are zeroed and get a zero variance ratio.
    """
    x = np.asarray(spectra, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ConfigError("pca_fit needs at least two samples")
    num_bands = x.shape[1]
    if k > num_bands:
        raise ConfigError(f"k={k} exceeds band count {num_bands}")

    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order][:k]
    components = eigvecs[:, order][:, :k].T.copy()

    total = np.trace(cov)
    eigvals = np.clip(eigvals, 0.0, None)
    ratios = eigvals / total if total > 0 else np.zeros(k)

    rank_tol = max(total, 1.0) * 1e-12
    degenerate = eigvals <= rank_tol
    components[degenerate] = 0.0
    ratios = np.where(degenerate, 0.0, ratios)

    for row in components:
        peak = np.argmax(np.abs(row))
        if row[peak] < 0:
            row *= -1.0
    return PcaModel(mean=mean, components=components,
                    explained_variance_ratio=ratios)


def pca_apply(model: PcaModel, spectra: np.ndarray) -> np.ndarray:
    x = np.asarray(spectra, dtype=np.float64)
    if x.shape[1] != model.mean.shape[0]:
        raise ConfigError("band count does not match the fitted model")
    return (x - model.mean) @ model.components.T


@dataclass
class GridRange:
    """The detection cuboid plus cell sizes; origin is the minimum corner."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float
    cell_xy: float
    cell_z: float
    pillar_z_extent: float | None = None   # defaults to the full z range

    def __post_init__(self):
        if self.cell_xy <= 0 or self.cell_z <= 0:
            raise ConfigError("cell sizes must be positive")
        if self.pillar_z_extent is None:
            self.pillar_z_extent = self.z_max - self.z_min

    @property
    def grid_xy(self) -> tuple:
        return (int(round((self.x_max - self.x_min) / self.cell_xy)),
                int(round((self.y_max - self.y_min) / self.cell_xy)))

    @property
    def grid_z(self) -> int:
        return int(round((self.z_max - self.z_min) / self.cell_z))


@dataclass
class PillarSet:
    indices: np.ndarray        # (N_p, 2) int64, lex-sorted unique
    point_rows: np.ndarray     # (M,) rows into the scene's kept points, grouped
    group_offsets: np.ndarray  # (N_p + 1,) slice bounds into point_rows
    grid: GridRange

    @property
    def num_pillars(self) -> int:
        return self.indices.shape[0]


@dataclass
class VoxelSet:
    indices: np.ndarray        # (N_v, 3) int64, lex-sorted unique
    point_rows: np.ndarray
    group_offsets: np.ndarray
    grid: GridRange

    @property
    def num_voxels(self) -> int:
        return self.indices.shape[0]


def _group(cells: np.ndarray):
    """Group row ids by identical index tuples; returns sorted unique cells."""
    order = np.lexsort(cells.T[::-1])
    sorted_cells = cells[order]
    if len(order) == 0:
        uniq = sorted_cells
        offsets = np.zeros(1, dtype=np.int64)
        return uniq, order, offsets
    change = np.any(np.diff(sorted_cells, axis=0) != 0, axis=1)
    starts = np.concatenate([[0], np.nonzero(change)[0] + 1])
    uniq = sorted_cells[starts]
    offsets = np.concatenate([starts, [len(order)]]).astype(np.int64)
    return uniq, order, offsets


def partition(scene: HpcScene, grid: GridRange):
    """Bin scene points into pillars (2D) and voxels (3D) on shared grids.

    Points outside the detection range are discarded, including points
    exactly on the max boundary.  Returns (PillarSet, VoxelSet, kept_rows)
    where kept_rows maps retained points back to scene rows.
    """
    p = scene.points.astype(np.float64)
    ix = np.floor((p[:, 0] - grid.x_min) / grid.cell_xy).astype(np.int64)
    iy = np.floor((p[:, 1] - grid.y_min) / grid.cell_xy).astype(np.int64)
    iz = np.floor((p[:, 2] - grid.z_min) / grid.cell_z).astype(np.int64)
    nx, ny = grid.grid_xy
    nz = grid.grid_z
    keep = ((ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) &
            (iz >= 0) & (iz < nz))
    kept_rows = np.nonzero(keep)[0]

    cells2d = np.stack([ix[keep], iy[keep]], axis=1)
    cells3d = np.stack([ix[keep], iy[keep], iz[keep]], axis=1)

    uniq2, order2, off2 = _group(cells2d)
    uniq3, order3, off3 = _group(cells3d)
    pillars = PillarSet(indices=uniq2, point_rows=kept_rows[order2],
                        group_offsets=off2, grid=grid)
    voxels = VoxelSet(indices=uniq3, point_rows=kept_rows[order3],
                      group_offsets=off3, grid=grid)
    return pillars, voxels, kept_rows


def pillar_init_features(scene: HpcScene, pillars: PillarSet,
                         reduced_spectra: np.ndarray,
                         max_points_per_pillar: int = 32,
                         seed: int = 0):
    """Per-point pillar features: 9 geometric channels plus k spectral ones.

    Channels: absolute xyz; offsets from the pillar point mean; offsets
    from the pillar cell center (x, y); the pillar's elevation range; then
    the reduced spectrum.  Pillars over the point cap are subsampled with
    the run seed.  Returns (features (M, 9+k), pillar_ids (M,)).
    """
    rng = np.random.default_rng(seed)
    grid = pillars.grid
    rows_all, pid_all = [], []
    for i in range(pillars.num_pillars):
        lo, hi = pillars.group_offsets[i], pillars.group_offsets[i + 1]
        rows = pillars.point_rows[lo:hi]
        if rows.shape[0] > max_points_per_pillar:
            rows = rows[np.sort(rng.choice(rows.shape[0],
                                           max_points_per_pillar,
                                           replace=False))]
        rows_all.append(rows)
        pid_all.append(np.full(rows.shape[0], i, dtype=np.int64))
    rows_all = np.concatenate(rows_all) if rows_all else np.zeros(0, np.int64)
    pid_all = np.concatenate(pid_all) if pid_all else np.zeros(0, np.int64)

    pts = scene.points[rows_all].astype(np.float64)
    k = reduced_spectra.shape[1]
    feats = np.zeros((pts.shape[0], 9 + k), dtype=np.float64)
    feats[:, 0:3] = pts

    counts = np.bincount(pid_all, minlength=pillars.num_pillars).astype(np.float64)
    counts = np.maximum(counts, 1.0)
    sums = np.zeros((pillars.num_pillars, 3))
    np.add.at(sums, pid_all, pts)
    means = sums / counts[:, None]
    feats[:, 3:6] = pts - means[pid_all]

    centers_x = grid.x_min + (pillars.indices[:, 0] + 0.5) * grid.cell_xy
    centers_y = grid.y_min + (pillars.indices[:, 1] + 0.5) * grid.cell_xy
    feats[:, 6] = pts[:, 0] - centers_x[pid_all]
    feats[:, 7] = pts[:, 1] - centers_y[pid_all]

    zmax = np.full(pillars.num_pillars, -np.inf)
    zmin = np.full(pillars.num_pillars, np.inf)
    np.maximum.at(zmax, pid_all, pts[:, 2])
    np.minimum.at(zmin, pid_all, pts[:, 2])
    span = np.where(np.isfinite(zmax - zmin), zmax - zmin, 0.0)
    feats[:, 8] = span[pid_all]

    feats[:, 9:] = reduced_spectra[rows_all]
    return feats.astype(np.float32), pid_all


def voxel_init_features(scene: HpcScene, voxels: VoxelSet) -> np.ndarray:
    """Mean point coordinates per voxel, shape (N_v, 3)."""
    pts = scene.points[voxels.point_rows].astype(np.float64)
    n = voxels.num_voxels
    ids = np.repeat(np.arange(n),
                    np.diff(voxels.group_offsets))
    sums = np.zeros((n, 3))
    np.add.at(sums, ids, pts)
    counts = np.maximum(np.diff(voxels.group_offsets), 1).astype(np.float64)
    return (sums / counts[:, None]).astype(np.float32)
