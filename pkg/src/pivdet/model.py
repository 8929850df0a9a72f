"""Full detector assembly: configuration, parameter init, per-scene
preprocessing and the dual-branch forward pass.

Every switchable mechanism (pillar branch, intermediate sparse fusion,
patch-wise fusion, multi-scale aggregation, weighted compression) has an
ablation flag whose off state removes the contribution exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Var
from .fusion import (AttentionSpec, build_association, init_patchwise,
                     init_sff_projection, patchwise_fuse,
                     sparse_feature_fusion)
from .head import (AnchorGrid, DetectionSet, LossWeights, TargetAssignment,
                   assign_targets, build_anchors, decode_and_nms, head_forward,
                   init_head, rpn_losses)
from .pillar_encoder import (init_pillar_stages, init_pointnet, pillar_stages,
                             pointnet_lite, stage_plan)
from .preprocess import (GridRange, PcaModel, partition, pca_apply, pca_fit,
                         pillar_init_features, voxel_init_features)
from .scene.types import HpcScene
from .sparse import SparseTensor2D, SparseTensor3D, to_dense
from .voxel_encoder import (concat_compress, elevation_compress, extra_scales,
                            fsb_plan, init_concat_compress, init_extra_scales,
                            init_voxel_stages, multiscale_aggregate,
                            voxel_bev, _run_stage)


@dataclass
class ClassConfig:
    name: str
    anchor_size: tuple = (4.0, 2.0, 1.6)
    anchor_z: float = 0.8
    pos_iou: float = 0.6
    neg_iou: float = 0.45
    eval_iou: float = 0.5
    direction_insensitive: bool = False


@dataclass
class DetectorConfig:
    grid: GridRange
    classes: list
    num_bands: int = 32
    pca_components: int = 6
    channels: tuple = (16, 32, 32, 32)
    max_points_per_pillar: int = 32
    attention_patch: int = 3
    attention_heads: int = 4
    focal_tau: float = 0.5
    head_mid_channels: int = 32
    loss_weights: LossWeights = field(default_factory=LossWeights)
    score_threshold: float = 0.1
    nms_iou: float = 0.1
    max_detections: int = 100
    seed: int = 0
    use_pillar_branch: bool = True
    use_sff: bool = True
    sff_stages: tuple = (2, 3, 4)      # stage 1 fusion available but off
    use_patchwise: bool = True
    use_multiscale: bool = True
    use_weighted_compression: bool = True
    use_concat_compression: bool = False

    @property
    def bev_hw(self) -> tuple:
        nx, ny = self.grid.grid_xy
        return (nx // 8, ny // 8)

    @property
    def bev_cell(self) -> float:
        return self.grid.cell_xy * 8

    @property
    def depth8(self) -> int:
        return self.grid.grid_z // 8

    @property
    def bev_channels(self) -> int:
        return self.channels[-1]

    @property
    def point_feature_width(self) -> int:
        return 9 + self.pca_components

    def attention_spec(self) -> AttentionSpec:
        return AttentionSpec(patch=self.attention_patch,
                             heads=self.attention_heads,
                             channels=self.bev_channels)


def desk_config(num_classes: int = 2, **overrides) -> DetectorConfig:
    """Laptop-scale preset: 25.6 m extent, 0.2 m cells, 16x16 BEV head."""
    grid = GridRange(-12.8, 12.8, -12.8, 12.8, 0.0, 6.4, 0.2, 0.2)
    names = ["vehicle", "crate", "tent", "kiosk"][:num_classes]
    sizes = [(4.0, 2.0, 1.6), (2.0, 2.0, 1.2), (4.0, 4.0, 2.2),
             (2.5, 2.5, 2.0)][:num_classes]
    classes = [ClassConfig(name=n, anchor_size=s, anchor_z=s[2] / 2,
                           pos_iou=0.5, neg_iou=0.35, eval_iou=0.5)
               for n, s in zip(names, sizes)]
    cfg = DetectorConfig(grid=grid, classes=classes)
    return replace(cfg, **overrides) if overrides else cfg


def paper_scale_config(**overrides) -> DetectorConfig:
    """Full-scale preset mirroring the published training setup: 0.1 m cells
    over a 51.2 m extent, 16 m vertical range, 21 spectral components."""
    grid = GridRange(-25.6, 25.6, -25.6, 25.6, 0.0, 16.0, 0.1, 0.1,
                     pillar_z_extent=16.0)
    classes = [
        ClassConfig("vehicle", (4.0, 2.0, 1.6), 0.8, 0.6, 0.45, 0.7),
        ClassConfig("tent", (4.0, 4.0, 2.5), 1.25, 0.5, 0.35, 0.5,
                    direction_insensitive=True),
        ClassConfig("box", (2.0, 2.0, 1.2), 0.6, 0.5, 0.35, 0.5,
                    direction_insensitive=True),
    ]
    cfg = DetectorConfig(grid=grid, classes=classes, pca_components=21,
                         channels=(32, 64, 128, 128), head_mid_channels=128,
                         num_bands=273)
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class SceneSample:
    pillar_feats: np.ndarray
    pillar_ids: np.ndarray
    pillar_indices: np.ndarray
    voxel_feats: np.ndarray
    voxel_indices: np.ndarray
    labels: list
    targets: TargetAssignment | None = None
    name: str = ""


def normalize_features(cfg: DetectorConfig, pillar_feats: np.ndarray,
                       voxel_feats: np.ndarray):
    """Fixed affine mapping raw meter-scale features into O(1) network inputs.

    Absolute coordinates map to [-1, 1] over the detection range; in-pillar
    offsets are expressed in cell units; the spectral channels pass through.
    Purely config-derived, so it is part of the network definition rather
    than of the declared feature contracts.
    """
    g = cfg.grid
    cx = 0.5 * (g.x_min + g.x_max)
    cy = 0.5 * (g.y_min + g.y_max)
    hx = 0.5 * (g.x_max - g.x_min)
    hy = 0.5 * (g.y_max - g.y_min)
    zr = g.z_max - g.z_min

    pf = pillar_feats.astype(np.float32).copy()
    pf[:, 0] = (pf[:, 0] - cx) / hx
    pf[:, 1] = (pf[:, 1] - cy) / hy
    pf[:, 2] = 2.0 * (pf[:, 2] - g.z_min) / zr - 1.0
    pf[:, 3:5] /= g.cell_xy          # horizontal offsets, cell units
    pf[:, 5] /= zr                   # vertical offset spans the pillar
    pf[:, 6:8] /= g.cell_xy
    pf[:, 8] /= zr

    vf = voxel_feats.astype(np.float32).copy()
    vf[:, 0] = (vf[:, 0] - cx) / hx
    vf[:, 1] = (vf[:, 1] - cy) / hy
    vf[:, 2] = 2.0 * (vf[:, 2] - g.z_min) / zr - 1.0
    return pf, vf


class Detector:
    """Owns the parameter store and wires the forward pass."""

    def __init__(self, config: DetectorConfig):
        self.config = config
        self.anchors = build_anchors(
            config.bev_hw, config.grid.x_min, config.grid.y_min,
            config.bev_cell, [c.anchor_size for c in config.classes],
            [c.anchor_z for c in config.classes])
        self.store = self._init_params()

    # ------------------------------------------------------------ params

    def _init_params(self) -> ParamStore:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        store = ParamStore()
        c4 = cfg.bev_channels
        if cfg.use_pillar_branch:
            init_pointnet(store, rng, cfg.point_feature_width, cfg.channels[0])
            init_pillar_stages(store, rng, cfg.channels, cfg.channels[0])
        init_voxel_stages(store, rng, cfg.channels, in_channels=3)
        if cfg.use_multiscale:
            init_extra_scales(store, rng, c4)
        if cfg.use_weighted_compression:
            store.add("voxel.elevation.z",
                      np.zeros(cfg.depth8, dtype=np.float32))
        if cfg.use_concat_compression:
            init_concat_compress(store, rng, cfg.depth8, c4)
        if cfg.use_pillar_branch and cfg.use_sff:
            for s in cfg.sff_stages:
                init_sff_projection(store, rng, cfg.channels[s - 1],
                                    cfg.channels[s - 1], f"sff.stage{s}")
        if cfg.use_pillar_branch and cfg.use_patchwise:
            init_patchwise(store, rng, cfg.attention_spec())
        init_head(store, rng, 2 * c4, cfg.head_mid_channels,
                  len(cfg.classes))
        return store

    # ------------------------------------------------------- preprocessing

    def preprocess_scene(self, scene: HpcScene, pca: PcaModel,
                         with_targets: bool = True,
                         name: str = "") -> SceneSample:
        cfg = self.config
        pillars, voxels, _ = partition(scene, cfg.grid)
        reduced = pca_apply(pca, scene.spectra).astype(np.float32)
        feats, pids = pillar_init_features(
            scene, pillars, reduced, cfg.max_points_per_pillar, seed=cfg.seed)
        vfeats = voxel_init_features(scene, voxels)
        targets = None
        if with_targets:
            targets = assign_targets(
                self.anchors, scene.labels,
                [c.pos_iou for c in cfg.classes],
                [c.neg_iou for c in cfg.classes])
        return SceneSample(pillar_feats=feats, pillar_ids=pids,
                           pillar_indices=pillars.indices,
                           voxel_feats=vfeats, voxel_indices=voxels.indices,
                           labels=list(scene.labels), targets=targets,
                           name=name)

    # ------------------------------------------------------------- forward

    def forward(self, sample: SceneSample, leaves: dict,
                collect: dict | None = None):
        cfg = self.config
        grid_hw = cfg.grid.grid_xy
        c4 = cfg.bev_channels
        h8, w8 = cfg.bev_hw
        dtype = leaves[next(iter(leaves))].value.dtype

        pillar_norm, voxel_norm = normalize_features(
            cfg, sample.pillar_feats, sample.voxel_feats)
        pillar_out = None
        if cfg.use_pillar_branch and sample.pillar_indices.shape[0]:
            pillar_in = pointnet_lite(
                leaves, pillar_norm.astype(dtype), sample.pillar_ids,
                sample.pillar_indices.shape[0], sample.pillar_indices, grid_hw)
            pillar_out = pillar_stages(pillar_in, leaves, cfg.channels)

        vox = SparseTensor3D(sample.voxel_indices,
                             Var(voxel_norm.astype(dtype)),
                             (grid_hw[0], grid_hw[1], cfg.grid.grid_z),
                             assume_sorted=True)
        plan = fsb_plan(cfg.channels, 3)
        cur = vox
        for s, layers in enumerate(plan):
            cur = _run_stage(cur, layers, leaves, f"voxel.stage{s + 1}",
                             cfg.focal_tau, [])
            if (cfg.use_sff and pillar_out is not None and
                    (s + 1) in cfg.sff_stages):
                pstage = pillar_out.stages[s]
                assoc = build_association(pstage.indices, cur.indices)
                fused = sparse_feature_fusion(cur.features, pstage.features,
                                              assoc, leaves,
                                              f"sff.stage{s + 1}")
                cur = SparseTensor3D(cur.indices, fused, cur.shape,
                                     assume_sorted=True)
        f4 = cur

        if cfg.use_multiscale:
            f5, f6, _ = extra_scales(f4, leaves)
            fused_vox = multiscale_aggregate(f4, [(f5, 2), (f6, 4)])
        else:
            fused_vox = f4

        if cfg.use_concat_compression:
            bev = concat_compress(fused_vox, leaves)
        else:
            if cfg.use_weighted_compression:
                z = leaves["voxel.elevation.z"]
            else:
                z = Var(np.zeros(cfg.depth8, dtype=dtype))
            bev = elevation_compress(fused_vox, z)
        voxel_map = voxel_bev(bev)                       # (H8, W8, C4)

        if pillar_out is not None:
            pillar_map = pillar_out.dense
        else:
            pillar_map = Var(np.zeros((h8, w8, c4), dtype=dtype))

        if cfg.use_pillar_branch and cfg.use_patchwise:
            fbev = patchwise_fuse(voxel_map, pillar_map, cfg.attention_spec(),
                                  leaves, collect_attention=collect)
        else:
            fbev = ad.concat([voxel_map, pillar_map], axis=2)

        if collect is not None:
            collect["fbev"] = fbev.value
        cls, box, direction = head_forward(leaves, fbev, len(cfg.classes))
        return {"cls": cls, "box": box, "dir": direction, "fbev": fbev}

    def loss(self, sample: SceneSample, leaves: dict):
        out = self.forward(sample, leaves)
        losses = rpn_losses(out["cls"], out["box"], out["dir"],
                            sample.targets, self.config.loss_weights)
        return losses

    def infer(self, sample: SceneSample, leaves: dict | None = None) -> DetectionSet:
        if leaves is None:
            leaves = self.store.leaves()
        out = self.forward(sample, leaves)
        return decode_and_nms(out["cls"].value, out["box"].value,
                              out["dir"].value, self.anchors,
                              self.config.score_threshold,
                              self.config.nms_iou,
                              self.config.max_detections)


def fit_pca_on_scenes(scenes, k: int, max_samples: int = 20_000,
                      seed: int = 0) -> PcaModel:
    """Fit the spectral reduction on a seeded subsample of all scene spectra."""
    rng = np.random.default_rng(seed)
    chunks = []
    for scene in scenes:
        s = scene.spectra
        if len(s) == 0:
            continue
        take = min(len(s), max(1, max_samples // max(1, len(scenes))))
        rows = rng.choice(len(s), size=take, replace=False)
        chunks.append(s[rows])
    if not chunks:
        raise ValueError("no spectra to fit")
    return pca_fit(np.concatenate(chunks, axis=0), k)


def zero_spectra(scene: HpcScene) -> HpcScene:
    """Ablation helper: the same scene with every spectrum zeroed."""
    return HpcScene(points=scene.points.copy(),
                    spectra=np.zeros_like(scene.spectra),
                    bounds=scene.bounds, labels=list(scene.labels),
                    meta=dict(scene.meta))
