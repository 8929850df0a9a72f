"""Bit-exact binary scene format (HPCS) and the text label format.

HPCS layout, little-endian:
  magic "HPCS" | version u16=1 | num_points u64 | num_bands u16 |
  bounds 6*f32 | per point: x,y,z f32 + num_bands f32 |
  num_labels u32 | per label: class_id u16, is_fake u8, (cx,cy,cz,dx,dy,dz,yaw) f32

Label text format, one box per line, floats printed with 6 decimals:
  class cx cy cz dx dy dz yaw [score]
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .types import Box3D, HpcScene

MAGIC = b"HPCS"
VERSION = 1


class SceneFormatError(ValueError):
    """Base class for HPCS parse failures."""


class BadMagicError(SceneFormatError):
    pass


class TruncatedError(SceneFormatError):
    pass


class BandMismatchError(SceneFormatError):
    pass


def write_scene(scene: HpcScene, path) -> None:
    path = Path(path)
    n = scene.num_points
    b = scene.num_bands
    parts = [MAGIC, struct.pack("<HQH", VERSION, n, b)]
    parts.append(np.asarray(scene.bounds, dtype="<f4").tobytes())
    payload = np.concatenate(
        [scene.points.astype("<f4"), scene.spectra.astype("<f4")], axis=1
    ) if n else np.zeros((0, 3 + b), dtype="<f4")
    parts.append(payload.tobytes())
    parts.append(struct.pack("<I", len(scene.labels)))
    for box in scene.labels:
        parts.append(struct.pack("<HB", box.class_id, int(box.is_fake)))
        parts.append(np.asarray(box.as_array(), dtype="<f4").tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(
                f"expected {n} more bytes at offset {self.pos}, file has {len(self.data)}"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def read_scene(path, expected_bands: int | None = None) -> HpcScene:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise BadMagicError(f"{path}: not an HPCS file")
    version, n, b = struct.unpack("<HQH", r.take(12))
    if version != VERSION:
        raise SceneFormatError(f"{path}: unsupported version {version}")
    if expected_bands is not None and b != expected_bands:
        raise BandMismatchError(f"{path}: has {b} bands, expected {expected_bands}")
    bounds = np.frombuffer(r.take(24), dtype="<f4")
    payload = np.frombuffer(r.take(int(n) * (3 + b) * 4), dtype="<f4")
    payload = payload.reshape(int(n), 3 + b)
    (num_labels,) = struct.unpack("<I", r.take(4))
    labels = []
    for _ in range(num_labels):
        class_id, is_fake = struct.unpack("<HB", r.take(3))
        vals = np.frombuffer(r.take(28), dtype="<f4")
        labels.append(Box3D.from_array(vals, class_id=class_id, is_fake=bool(is_fake)))
    return HpcScene(
        points=payload[:, :3].copy(),
        spectra=payload[:, 3:].copy(),
        bounds=tuple(float(x) for x in bounds),
        labels=labels,
    )


def write_labels(boxes, path, scores=None) -> None:
    """Write boxes in the text label format; scores appended when given."""
    lines = []
    for i, box in enumerate(boxes):
        vals = box.as_array()
        line = f"{box.class_id} " + " ".join(f"{v:.6f}" for v in vals)
        if scores is not None:
            line += f" {scores[i]:.6f}"
        lines.append(line)
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_labels(path):
    """Read text labels; returns (boxes, scores) where scores may be None."""
    boxes, scores = [], []
    has_scores = None
    for raw in Path(path).read_text().splitlines():
        raw = raw.strip()
        if not raw:
            continue
        fields = raw.split()
        if len(fields) not in (8, 9):
            raise SceneFormatError(f"{path}: label line needs 8 or 9 fields: {raw!r}")
        if has_scores is None:
            has_scores = len(fields) == 9
        elif has_scores != (len(fields) == 9):
            raise SceneFormatError(f"{path}: inconsistent score column")
        boxes.append(Box3D.from_array([float(v) for v in fields[1:8]],
                                      class_id=int(fields[0])))
        if has_scores:
            scores.append(float(fields[8]))
    return boxes, (np.asarray(scores) if has_scores else None)
