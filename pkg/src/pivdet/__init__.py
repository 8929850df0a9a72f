"""Pillar-voxel dual-branch 3D object detection for airborne hyperspectral
point clouds: data generation, sparse encoders, fusion, detection head,
training and evaluation."""

__version__ = "0.1.0"
