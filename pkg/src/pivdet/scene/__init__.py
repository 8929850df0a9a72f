from .types import Box3D, HpcScene, RasterHsi, SceneError, normalize_yaw
from .io import (BadMagicError, BandMismatchError, SceneFormatError,
                 TruncatedError, read_labels, read_scene, write_labels,
                 write_scene)
from .spectra import assign_spectra, nearest_cell
from .synth import ObjectClassSpec, SynthConfig, make_default_prototypes, synth_scene
from .tiling import rotate_scene, tile_scene

__all__ = [
    "Box3D", "HpcScene", "RasterHsi", "SceneError", "normalize_yaw",
    "read_scene", "write_scene", "read_labels", "write_labels",
    "SceneFormatError", "BadMagicError", "TruncatedError", "BandMismatchError",
    "assign_spectra", "nearest_cell",
    "SynthConfig", "ObjectClassSpec", "synth_scene", "make_default_prototypes",
    "rotate_scene", "tile_scene",
]
