"""Voxel branch: focal sparse blocks, multi-scale aggregation and weighted
elevation compression down to a sparse BEV map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Var
from .nn import add_conv
from .sparse import (ConvSpec, SparseError, SparseTensor2D, SparseTensor3D,
                     _lookup, _ravel, focal_conv, strided_sparse_conv,
                     submanifold_conv, to_dense)


@dataclass
class BevSparse:
    indices: np.ndarray     # (N_b, 2) deduplicated horizontal coordinates
    features: Var           # (N_b, C)
    shape: tuple            # (H, W) at the compressed resolution


@dataclass
class VoxelStageOutputs:
    stages: list            # [F_v^1 .. F_v^4]
    specs: list             # leading ConvSpec per stage (horizontal checks)
    importances: list       # focal gate activations, one per focal layer


def elevation_weights(z: Var) -> Var:
    """W_i = D * exp(z_i) / sum_j exp(z_j); positive, sums to D."""
    d = z.value.shape[0]
    return ad.mul(ad.softmax(z, axis=0), Var(np.asarray(float(d))))


def fsb_plan(channels, in_channels: int):
    plan = []
    c_prev = in_channels
    for stage, c in enumerate(channels):
        layers = []
        if stage == 0:
            layers.append(ConvSpec.make("submanifold", 3, in_channels=c_prev,
                                        out_channels=c))
            layers.append(ConvSpec.make("submanifold", 3, in_channels=c,
                                        out_channels=c))
        else:
            layers.append(ConvSpec.make("strided", 3, stride=2,
                                        in_channels=c_prev, out_channels=c))
            layers.append(ConvSpec.make("submanifold", 3, in_channels=c,
                                        out_channels=c))
            layers.append(ConvSpec.make("submanifold", 3, in_channels=c,
                                        out_channels=c))
            layers.append(ConvSpec.make("focal", 3, in_channels=c,
                                        out_channels=c))
        plan.append(layers)
        c_prev = c
    return plan


def init_voxel_stages(store: ParamStore, rng, channels, in_channels: int = 3,
                      prefix: str = "voxel") -> None:
    for s, layers in enumerate(fsb_plan(channels, in_channels)):
        for i, spec in enumerate(layers):
            name = f"{prefix}.stage{s + 1}.conv{i}"
            add_conv(store, rng, name, spec.volume, spec.in_channels,
                     spec.out_channels)
            if spec.kind == "focal":
                store.add(f"{name}.importance",
                          np.zeros((spec.in_channels, 1), dtype=np.float32))


def _run_stage(cur, layers, leaves, name_prefix, tau, importances):
    for i, spec in enumerate(layers):
        name = f"{name_prefix}.conv{i}"
        if spec.kind == "focal":
            cur, imp = focal_conv(cur, spec, leaves[f"{name}.weight"],
                                  leaves[f"{name}.bias"],
                                  leaves[f"{name}.importance"], tau=tau)
            importances.append(imp)
        else:
            fn = strided_sparse_conv if spec.kind == "strided" else submanifold_conv
            cur = fn(cur, spec, leaves[f"{name}.weight"], leaves[f"{name}.bias"])
        cur = SparseTensor3D(cur.indices, ad.relu(cur.features), cur.shape,
                             assume_sorted=True)
    return cur


def voxel_stages(t: SparseTensor3D, leaves: dict, channels,
                 prefix: str = "voxel", tau: float = 0.5) -> VoxelStageOutputs:
    if t.shape[2] % 8:
        raise SparseError(f"vertical extent {t.shape[2]} not divisible by 8")
    plan = fsb_plan(channels, t.num_channels)
    stages, importances = [], []
    cur = t
    for s, layers in enumerate(plan):
        cur = _run_stage(cur, layers, leaves, f"{prefix}.stage{s + 1}", tau,
                         importances)
        stages.append(cur)
    return VoxelStageOutputs(stages=stages, specs=[p[0] for p in plan],
                             importances=importances)


def init_extra_scales(store: ParamStore, rng, c4: int,
                      prefix: str = "voxel") -> None:
    layers = fsb_plan([c4, c4], c4)[1]
    for s in (5, 6):
        for i, spec in enumerate(layers):
            name = f"{prefix}.stage{s}.conv{i}"
            add_conv(store, rng, name, spec.volume, spec.in_channels,
                     spec.out_channels)
            if spec.kind == "focal":
                store.add(f"{name}.importance",
                          np.zeros((spec.in_channels, 1), dtype=np.float32))


def extra_scales(f4: SparseTensor3D, leaves: dict, prefix: str = "voxel",
                 tau: float = 0.5):
    """Two further FSBs producing the 16x and 32x downsampled tensors."""
    c4 = f4.num_channels
    layers = fsb_plan([c4, c4], c4)[1]
    imps: list = []
    f5 = _run_stage(f4, layers, leaves, f"{prefix}.stage5", tau, imps)
    f6 = _run_stage(f5, layers, leaves, f"{prefix}.stage6", tau, imps)
    return f5, f6, imps


def multiscale_aggregate(f4: SparseTensor3D, coarse_list) -> SparseTensor3D:
    """Add each coarse voxel feature onto every fine voxel that floor-divides
    to its index.  The active set stays exactly F_v^4's."""
    out = f4.features
    for coarse, ratio in coarse_list:
        if coarse.num_channels != f4.num_channels:
            raise SparseError("channel mismatch between scales")
        target = f4.indices // ratio
        keys = _ravel(target, coarse.shape)
        rows = _lookup(_ravel(coarse.indices, coarse.shape), keys)
        # missing parents hit an appended zero row
        ext = ad.concat([coarse.features,
                         Var(np.zeros((1, coarse.num_channels),
                                      dtype=coarse.features.value.dtype))], axis=0)
        rows = np.where(rows < 0, coarse.num_active, rows)
        out = ad.add(out, ad.gather(ext, rows))
    return SparseTensor3D(f4.indices, out, f4.shape, assume_sorted=True)


def elevation_compress(t: SparseTensor3D, z: Var) -> BevSparse:
    """Weighted vertical summation: each voxel row is scaled by the weight of
    its height slot, then rows sharing an (x, y) are summed."""
    depth = z.value.shape[0]
    if t.num_active and t.indices[:, 2].max() >= depth:
        raise SparseError("vertical index exceeds the weight vector length")
    weights = elevation_weights(z)                       # (D,)
    w_col = ad.reshape(weights, (depth, 1))
    per_row = ad.gather(w_col, t.indices[:, 2])          # (N, 1)
    scaled = ad.mul(t.features, per_row)

    horiz = t.indices[:, :2]
    hw = (t.shape[0], t.shape[1])
    keys = horiz[:, 0] * hw[1] + horiz[:, 1]
    uniq, inverse = np.unique(keys, return_inverse=True)
    bev_indices = np.stack([uniq // hw[1], uniq % hw[1]], axis=1)
    summed = ad.scatter_add(scaled, inverse, len(uniq))
    return BevSparse(indices=bev_indices, features=summed, shape=hw)


def concat_compress(t: SparseTensor3D, leaves: dict,
                    prefix: str = "voxel.concat") -> BevSparse:
    """Ablation-only channel-concatenation compression: vertical slots are
    stacked along channels and projected back to C."""
    depth = t.shape[2]
    c = t.num_channels
    horiz = t.indices[:, :2]
    hw = (t.shape[0], t.shape[1])
    keys = horiz[:, 0] * hw[1] + horiz[:, 1]
    uniq, inverse = np.unique(keys, return_inverse=True)
    slot = inverse * depth + t.indices[:, 2]
    stacked = ad.scatter_add(t.features, slot, len(uniq) * depth)
    stacked = ad.reshape(stacked, (len(uniq), depth * c))
    proj = ad.matmul(stacked, leaves[f"{prefix}.weight"])
    bev_indices = np.stack([uniq // hw[1], uniq % hw[1]], axis=1)
    return BevSparse(indices=bev_indices, features=proj, shape=hw)


def init_concat_compress(store: ParamStore, rng, depth: int, c: int,
                         prefix: str = "voxel.concat") -> None:
    from .nn import kaiming_uniform
    store.add(f"{prefix}.weight",
              kaiming_uniform(rng, (depth * c, c), depth * c))


def voxel_bev(bev: BevSparse) -> Var:
    """Dense (H, W, C) map from the compressed sparse BEV features."""
    t = SparseTensor2D(bev.indices, bev.features, bev.shape, assume_sorted=True)
    return to_dense(t)
