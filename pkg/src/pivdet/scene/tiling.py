"""Sliding-window scene tiling with optional whole-scene rotations."""

from __future__ import annotations

import numpy as np

from .types import Box3D, HpcScene, SceneError, normalize_yaw


def rotate_scene(scene: HpcScene, angle: float) -> HpcScene:
    """Rigidly rotate a scene about its horizontal bounds center."""
    if angle == 0.0:
        return scene
    x0, x1, y0, y1, z0, z1 = scene.bounds
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]], dtype=np.float64)

    pts = scene.points.astype(np.float64).copy()
    pts[:, :2] = (pts[:, :2] - (cx, cy)) @ rot.T + (cx, cy)

    corners = np.array([[x0, y0], [x0, y1], [x1, y0], [x1, y1]])
    rc = (corners - (cx, cy)) @ rot.T + (cx, cy)
    bounds = (rc[:, 0].min(), rc[:, 0].max(), rc[:, 1].min(), rc[:, 1].max(), z0, z1)

    labels = []
    for b in scene.labels:
        nx, ny = rot @ np.array([b.cx - cx, b.cy - cy]) + (cx, cy)
        labels.append(Box3D(nx, ny, b.cz, b.dx, b.dy, b.dz,
                            float(normalize_yaw(b.yaw + angle)),
                            class_id=b.class_id, is_fake=b.is_fake))
    meta = dict(scene.meta)
    meta["rotation"] = meta.get("rotation", 0.0) + angle
    return HpcScene(points=pts.astype(np.float32), spectra=scene.spectra.copy(),
                    bounds=bounds, labels=labels, meta=meta)


def tile_scene(scene: HpcScene, window: float, step: float,
               rotations=(0.0,), min_cell: float | None = None) -> list:
    """Crop axis-aligned windows on a BEV sliding grid, per scene rotation.

    Labels whose centers fall inside a window are kept and re-expressed in
    window-local coordinates; partial edge tiles are kept.  Each tile's
    meta records its origin and rotation so global coordinates can be
    recomposed.
    """
    if window <= 0 or step <= 0:
        raise SceneError("window and step must be positive")
    if min_cell is not None and window < min_cell:
        raise SceneError(f"window {window} smaller than one grid cell {min_cell}")

    tiles = []
    for angle in rotations:
        rotated = rotate_scene(scene, float(angle))
        x0, x1, y0, y1, z0, z1 = rotated.bounds
        # epsilon guards the ceil against float noise in the extent (f32 points)
        nx = max(1, int(np.ceil(max(0.0, (x1 - x0) - window) / step - 1e-6)) + 1)
        ny = max(1, int(np.ceil(max(0.0, (y1 - y0) - window) / step - 1e-6)) + 1)
        pts = rotated.points
        for iy in range(ny):
            for ix in range(nx):
                ox = x0 + ix * step
                oy = y0 + iy * step
                inside = ((pts[:, 0] >= ox) & (pts[:, 0] < ox + window) &
                          (pts[:, 1] >= oy) & (pts[:, 1] < oy + window))
                labels = []
                for b in rotated.labels:
                    if ox <= b.cx < ox + window and oy <= b.cy < oy + window:
                        labels.append(Box3D(b.cx - ox, b.cy - oy, b.cz,
                                            b.dx, b.dy, b.dz, b.yaw,
                                            class_id=b.class_id, is_fake=b.is_fake))
                local = pts[inside].copy()
                local[:, 0] -= ox
                local[:, 1] -= oy
                meta = dict(rotated.meta)
                meta.update(tile_origin=(float(ox), float(oy)),
                            tile_grid=(ix, iy), window=float(window))
                tiles.append(HpcScene(
                    points=local,
                    spectra=rotated.spectra[inside].copy(),
                    bounds=(0.0, window, 0.0, window, z0, z1),
                    labels=labels, meta=meta))
    return tiles
