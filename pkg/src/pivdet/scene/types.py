"""Core data model for hyperspectral point-cloud scenes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * np.pi


class SceneError(ValueError):
    """Raised for malformed scene data."""


def normalize_yaw(yaw):
    """Wrap angles into [-pi, pi)."""
    return np.mod(np.asarray(yaw) + np.pi, TWO_PI) - np.pi


@dataclass
class Box3D:
    """Oriented 3D box: center, size, yaw about the vertical axis."""

    cx: float
    cy: float
    cz: float
    dx: float
    dy: float
    dz: float
    yaw: float
    class_id: int = 0
    is_fake: bool = False

    def __post_init__(self):
        if not (self.dx > 0 and self.dy > 0 and self.dz > 0):
            raise SceneError(f"box sizes must be positive, got {(self.dx, self.dy, self.dz)}")
        self.yaw = float(normalize_yaw(self.yaw))

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.dx, self.dy, self.dz, self.yaw],
                        dtype=np.float64)

    @staticmethod
    def from_array(a, class_id: int = 0, is_fake: bool = False) -> "Box3D":
        a = np.asarray(a, dtype=np.float64)
        return Box3D(*a[:7], class_id=class_id, is_fake=is_fake)

    def bev_corners(self) -> np.ndarray:
        """Corners of the BEV rectangle, counter-clockwise, shape (4, 2)."""
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        hx, hy = 0.5 * self.dx, 0.5 * self.dy
        local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])


@dataclass
class HpcScene:
    """Point cloud with per-point spectra, axis-aligned bounds and box labels."""

    points: np.ndarray                 # (N, 3) f32
    spectra: np.ndarray                # (N, B) f32
    bounds: tuple                      # (x_min, x_max, y_min, y_max, z_min, z_max)
    labels: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 3)
        self.spectra = np.asarray(self.spectra, dtype=np.float32)
        if self.spectra.ndim != 2 or self.spectra.shape[0] != self.points.shape[0]:
            raise SceneError("spectra rows must match point count")
        self.bounds = tuple(float(b) for b in self.bounds)
        if len(self.bounds) != 6:
            raise SceneError("bounds must have six entries")

    @property
    def num_points(self) -> int:
        return self.points.shape[0]

    @property
    def num_bands(self) -> int:
        return self.spectra.shape[1]

    def validate(self) -> None:
        x0, x1, y0, y1, z0, z1 = self.bounds
        if self.num_points:
            p = self.points
            inside = ((p[:, 0] >= x0) & (p[:, 0] <= x1) &
                      (p[:, 1] >= y0) & (p[:, 1] <= y1) &
                      (p[:, 2] >= z0) & (p[:, 2] <= z1))
            if not inside.all():
                raise SceneError(f"{int((~inside).sum())} points outside bounds")
        for box in self.labels:
            if not (-np.pi <= box.yaw < np.pi):
                raise SceneError("label yaw out of range")

    def real_labels(self) -> list:
        return [b for b in self.labels if not b.is_fake]


@dataclass
class RasterHsi:
    """Gridded hyperspectral image: origin, square cells, (H, W, B) reflectance."""

    origin: tuple                      # (x, y) of the lower corner of cell (0, 0)
    cell_size: float
    grid: np.ndarray

    def __post_init__(self):
        if self.cell_size <= 0:
            raise SceneError("raster cell size must be positive")
        self.grid = np.asarray(self.grid, dtype=np.float32)
        if self.grid.ndim != 3:
            raise SceneError("raster grid must be (H, W, B)")
        if not np.isfinite(self.grid).all():
            raise SceneError("raster grid must be finite")

    @property
    def num_bands(self) -> int:
        return self.grid.shape[2]

    def cell_center(self, row: int, col: int) -> tuple:
        return (self.origin[0] + (col + 0.5) * self.cell_size,
                self.origin[1] + (row + 0.5) * self.cell_size)
