"""Nearest-cell spectral assignment from a raster onto point coordinates."""

from __future__ import annotations

import numpy as np

from .types import HpcScene, RasterHsi, SceneError


def nearest_cell(raster: RasterHsi, xy: np.ndarray) -> np.ndarray:
    """Row/col of the nearest cell center for each (x, y), ties toward the
    smaller index.

    A point exactly on the boundary between two cells is equidistant from
    both centers; the lower (row, col) wins so assignment is deterministic.
    """
    xy = np.asarray(xy, dtype=np.float64)
    h, w = raster.grid.shape[:2]
    out = np.empty((xy.shape[0], 2), dtype=np.int64)
    for axis, (coord, size) in enumerate(((xy[:, 1], h), (xy[:, 0], w))):
        u = (coord - raster.origin[1 - axis]) / raster.cell_size
        idx = np.floor(u).astype(np.int64)
        # exact integer u sits on a cell boundary: centers idx-1 and idx tie
        on_edge = (u == idx) & (idx > 0)
        idx[on_edge] -= 1
        out[:, axis] = np.clip(idx, 0, size - 1)
    return out


def assign_spectra(points, raster: RasterHsi, max_dist: float) -> HpcScene:
    """Fuse raster spectra onto points by horizontal nearest cell center.

    Points farther than `max_dist` from their nearest center get the
    all-zero spectrum and are flagged in `meta["unassigned"]`.
    """
    points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    if points.shape[0] == 0:
        raise SceneError("cannot assign spectra to an empty point list")

    rc = nearest_cell(raster, points[:, :2])
    centers_x = raster.origin[0] + (rc[:, 1] + 0.5) * raster.cell_size
    centers_y = raster.origin[1] + (rc[:, 0] + 0.5) * raster.cell_size
    dist = np.hypot(points[:, 0] - centers_x, points[:, 1] - centers_y)
    unassigned = dist > max_dist

    spectra = raster.grid[rc[:, 0], rc[:, 1]].astype(np.float32).copy()
    spectra[unassigned] = 0.0

    lo = points.min(axis=0)
    hi = points.max(axis=0)
    bounds = (lo[0], hi[0], lo[1], hi[1], lo[2], hi[2])
    return HpcScene(points=points, spectra=spectra, bounds=bounds,
                    meta={"unassigned": unassigned, "source": "raster-fusion"})
