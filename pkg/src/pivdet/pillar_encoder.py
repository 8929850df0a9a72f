"""Pillar branch: per-pillar PointNet-lite featurizer and the four-stage
2D sparse stack ending in an 8x-downsampled dense BEV map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Var
from .nn import add_conv, add_linear, linear
from .sparse import (ConvSpec, SparseError, SparseTensor2D,
                     strided_sparse_conv, submanifold_conv, to_dense)


@dataclass
class PillarStageOutputs:
    stages: list            # [F_p^1 .. F_p^4] as SparseTensor2D
    dense: object           # F_p^D, Var of shape (H/8, W/8, C4)
    specs: list             # ConvSpec per stage, for structural checks


def init_pointnet(store: ParamStore, rng, in_dim: int, out_dim: int,
                  prefix: str = "pillar.pointnet") -> None:
    add_linear(store, rng, prefix, in_dim, out_dim)


def pointnet_lite(leaves: dict, feats, pillar_ids, num_pillars: int,
                  pillar_indices, grid_shape,
                  prefix: str = "pillar.pointnet") -> SparseTensor2D:
    """Linear + ReLU per point, max-pool over each pillar's points."""
    if num_pillars == 0:
        raise SparseError("empty pillar set")
    x = feats if isinstance(feats, Var) else Var(np.asarray(feats))
    x = ad.relu(linear(leaves, prefix, x))
    pooled = ad.segment_max(x, pillar_ids, num_pillars)
    return SparseTensor2D(pillar_indices, pooled, grid_shape, assume_sorted=True)


def stage_plan(channels, in_channels: int):
    """ConvSpecs for stage 1 (2x submanifold) and stages 2-4 (strided + 2x
    submanifold).  Returns a list of per-stage layer spec lists."""
    plan = []
    c_prev = in_channels
    for stage, c in enumerate(channels):
        layers = []
        if stage == 0:
            layers.append(ConvSpec.make("submanifold", 2, in_channels=c_prev,
                                        out_channels=c))
            layers.append(ConvSpec.make("submanifold", 2, in_channels=c,
                                        out_channels=c))
        else:
            layers.append(ConvSpec.make("strided", 2, stride=2,
                                        in_channels=c_prev, out_channels=c))
            layers.append(ConvSpec.make("submanifold", 2, in_channels=c,
                                        out_channels=c))
            layers.append(ConvSpec.make("submanifold", 2, in_channels=c,
                                        out_channels=c))
        plan.append(layers)
        c_prev = c
    return plan


def init_pillar_stages(store: ParamStore, rng, channels, in_channels: int,
                       prefix: str = "pillar") -> None:
    for s, layers in enumerate(stage_plan(channels, in_channels)):
        for i, spec in enumerate(layers):
            add_conv(store, rng, f"{prefix}.stage{s + 1}.conv{i}",
                     spec.volume, spec.in_channels, spec.out_channels)


def pillar_stages(t: SparseTensor2D, leaves: dict, channels,
                  prefix: str = "pillar") -> PillarStageOutputs:
    """Run the four stages; returns every stage tensor plus the dense map."""
    h, w = t.shape
    if h % 8 or w % 8:
        raise SparseError(f"grid {t.shape} not divisible by 8")
    plan = stage_plan(channels, t.num_channels)
    stages = []
    cur = t
    first_specs = []
    for s, layers in enumerate(plan):
        first_specs.append(layers[0])
        for i, spec in enumerate(layers):
            name = f"{prefix}.stage{s + 1}.conv{i}"
            fn = strided_sparse_conv if spec.kind == "strided" else submanifold_conv
            cur = fn(cur, spec, leaves[f"{name}.weight"], leaves[f"{name}.bias"])
            cur = SparseTensor2D(cur.indices, ad.relu(cur.features), cur.shape,
                                 assume_sorted=True)
        stages.append(cur)
    dense = to_dense(stages[-1])
    return PillarStageOutputs(stages=stages, dense=dense, specs=first_specs)
