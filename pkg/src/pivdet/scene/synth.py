"""Synthetic airborne hyperspectral scene generator.

Scenes are built from a ground plane, canopy blobs and box-shaped objects
sampled as surface points.  Two fusion artifacts of real airborne data are
reproduced: points under a canopy footprint receive the canopy spectrum
instead of their own (occlusion distortion), and object spectra are looked
up at a horizontally shifted position (registration distortion), so object
edges bleed into the background signature.  Fake objects copy real
geometry but carry a decoy spectral prototype.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .types import Box3D, HpcScene, SceneError


def make_default_prototypes(num_bands: int, count: int = 8) -> np.ndarray:
    """A fixed family of smooth reflectance-like curves in [0, 1]."""
    t = np.linspace(0.0, 1.0, num_bands)
    protos = np.empty((count, num_bands), dtype=np.float64)
    for i in range(count):
        mu = 0.1 + 0.8 * i / max(1, count - 1)
        bump = np.exp(-0.5 * ((t - mu) / 0.12) ** 2)
        slope = 0.2 * (t - 0.5) * (1 if i % 2 == 0 else -1)
        protos[i] = 0.25 + 0.55 * bump + slope
    return np.clip(protos, 0.0, 1.0)


@dataclass
class ObjectClassSpec:
    name: str
    size: tuple = (4.0, 2.0, 1.6)        # mean (dx, dy, dz) meters
    size_jitter: float = 0.1             # relative std
    count: int = 4
    prototype: int = 2
    yaw_mode: str = "uniform"            # "uniform" or "axis"
    yaw_jitter: float = 0.15             # used by "axis" mode


@dataclass
class SynthConfig:
    extent: float = 51.2                 # square scene, centered at the origin
    num_bands: int = 32
    classes: list = field(default_factory=lambda: [ObjectClassSpec("vehicle")])
    ground_density: float = 4.0          # pts / m^2
    object_density: float = 24.0         # pts / m^2 of top surface
    side_density: float = 8.0            # pts / m^2 of side surface
    canopy_count: int = 3
    canopy_radius: tuple = (2.5, 5.0)
    canopy_density: float = 12.0
    canopy_base: tuple = (2.5, 4.0)
    canopy_thickness: float = 1.5
    fake_ratio: float = 0.0
    noise_sigma: float = 0.01
    registration_offset: float = 0.4     # meters, applied to object spectra lookups
    ground_prototype: int = 0
    canopy_prototype: int = 1
    decoy_prototype: int = 7
    prototypes: np.ndarray | None = None

    def resolved_prototypes(self) -> np.ndarray:
        if self.prototypes is not None:
            protos = np.asarray(self.prototypes, dtype=np.float64)
            if protos.shape[1] != self.num_bands:
                raise SceneError("prototype band count mismatch")
            return protos
        return make_default_prototypes(self.num_bands)


def _sample_box_surface(rng, box: Box3D, top_density, side_density):
    """Points on the top face and the four side faces of a box."""
    n_top = max(1, int(round(top_density * box.dx * box.dy)))
    local = np.empty((n_top, 3))
    local[:, 0] = rng.uniform(-box.dx / 2, box.dx / 2, n_top)
    local[:, 1] = rng.uniform(-box.dy / 2, box.dy / 2, n_top)
    local[:, 2] = box.dz / 2 - rng.uniform(0.0, 0.05 * box.dz, n_top)

    sides = []
    for sx, sy, horiz in ((1, 0, box.dy), (-1, 0, box.dy), (0, 1, box.dx), (0, -1, box.dx)):
        n_side = int(round(side_density * horiz * box.dz * 0.5))
        if n_side == 0:
            continue
        s = np.empty((n_side, 3))
        along = rng.uniform(-horiz / 2, horiz / 2, n_side)
        s[:, 2] = rng.uniform(-box.dz / 2, box.dz / 2, n_side)
        if sx:
            s[:, 0] = sx * box.dx / 2
            s[:, 1] = along
        else:
            s[:, 0] = along
            s[:, 1] = sy * box.dy / 2
        sides.append(s)
    if sides:
        local = np.concatenate([local] + sides, axis=0)

    c, s = np.cos(box.yaw), np.sin(box.yaw)
    rot = np.array([[c, -s], [s, c]])
    world = np.empty_like(local)
    world[:, :2] = local[:, :2] @ rot.T + (box.cx, box.cy)
    world[:, 2] = local[:, 2] + box.cz
    return world


def _in_bev_rect(box: Box3D, xy: np.ndarray) -> np.ndarray:
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    dx = xy[:, 0] - box.cx
    dy = xy[:, 1] - box.cy
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    return (np.abs(lx) <= box.dx / 2) & (np.abs(ly) <= box.dy / 2)


def synth_scene(config: SynthConfig, seed: int) -> HpcScene:
    """Generate one scene; bit-identical for identical (config, seed)."""
    rng = np.random.default_rng(seed)
    protos = config.resolved_prototypes()
    half = config.extent / 2.0

    chunks = []       # (points, proto_ids)
    canopies = []     # (cx, cy, radius, base)

    n_ground = int(round(config.ground_density * config.extent ** 2))
    if n_ground:
        g = np.empty((n_ground, 3))
        g[:, 0] = rng.uniform(-half, half, n_ground)
        g[:, 1] = rng.uniform(-half, half, n_ground)
        g[:, 2] = np.abs(rng.normal(0.0, 0.03, n_ground))
        chunks.append((g, np.full(n_ground, config.ground_prototype)))

    for _ in range(config.canopy_count):
        radius = rng.uniform(*config.canopy_radius)
        cx = rng.uniform(-half + radius, half - radius)
        cy = rng.uniform(-half + radius, half - radius)
        base = rng.uniform(*config.canopy_base)
        n = max(1, int(round(config.canopy_density * np.pi * radius ** 2)))
        r = radius * np.sqrt(rng.uniform(0, 1, n))
        ang = rng.uniform(0, 2 * np.pi, n)
        pts = np.stack([cx + r * np.cos(ang), cy + r * np.sin(ang),
                        base + rng.uniform(0, config.canopy_thickness, n)], axis=1)
        chunks.append((pts, np.full(n, config.canopy_prototype)))
        canopies.append((cx, cy, radius, base))

    labels = []
    object_chunks = []   # (points, box, proto_id)
    placed = []
    for spec in config.classes:
        n_fake = int(round(spec.count * config.fake_ratio))
        fake_picks = rng.choice(spec.count, size=n_fake, replace=False) if n_fake else []
        for j in range(spec.count):
            size = np.asarray(spec.size) * (1.0 + spec.size_jitter *
                                            rng.uniform(-1, 1, 3))
            margin = 0.6 * max(size[0], size[1]) + 0.5
            for _attempt in range(64):
                cx = rng.uniform(-half + margin, half - margin)
                cy = rng.uniform(-half + margin, half - margin)
                clearance = max(size[0], size[1])
                if all(np.hypot(cx - px, cy - py) > clearance + pc
                       for px, py, pc in placed):
                    break
            if spec.yaw_mode == "axis":
                yaw = rng.choice([0.0, np.pi / 2]) + rng.uniform(
                    -spec.yaw_jitter, spec.yaw_jitter)
            else:
                yaw = rng.uniform(-np.pi, np.pi)
            placed.append((cx, cy, clearance))
            class_id = config.classes.index(spec)
            box = Box3D(cx, cy, size[2] / 2, size[0], size[1], size[2], yaw,
                        class_id=class_id, is_fake=bool(j in fake_picks))
            pts = _sample_box_surface(rng, box, config.object_density,
                                      config.side_density)
            proto = config.decoy_prototype if box.is_fake else spec.prototype
            object_chunks.append((pts, box, proto))
            labels.append(box)

    if not chunks and not object_chunks:
        raise SceneError("configuration produced zero points")

    # object spectra are looked up at a shifted position: points whose
    # shifted footprint leaves the box take the ground signature instead
    off = config.registration_offset
    for pts, box, proto in object_chunks:
        shifted = pts[:, :2] + np.array([off, 0.0])
        ids = np.where(_in_bev_rect(box, shifted), proto, config.ground_prototype)
        chunks.append((pts, ids))

    points = np.concatenate([c[0] for c in chunks], axis=0)
    proto_ids = np.concatenate([c[1] for c in chunks], axis=0).astype(np.int64)
    if points.shape[0] == 0:
        raise SceneError("configuration produced zero points")

    # canopy occlusion: anything below a canopy footprint takes its spectrum
    for cx, cy, radius, base in canopies:
        under = (np.hypot(points[:, 0] - cx, points[:, 1] - cy) <= radius) & \
                (points[:, 2] < base)
        proto_ids[under] = config.canopy_prototype

    spectra = protos[proto_ids]
    if config.noise_sigma > 0:
        spectra = spectra + rng.normal(0.0, config.noise_sigma, spectra.shape)

    lo = points.min(axis=0)
    hi = points.max(axis=0)
    bounds = (min(lo[0], -half), max(hi[0], half),
              min(lo[1], -half), max(hi[1], half),
              min(lo[2], 0.0), hi[2] + 1e-3)
    return HpcScene(points=points.astype(np.float32),
                    spectra=spectra.astype(np.float32),
                    bounds=bounds, labels=labels,
                    meta={"num_bands": config.num_bands, "source": "synth",
                          "seed": int(seed), "proto_ids": proto_ids})
