"""Finite-difference validation harness for every learnable block.

Each registered check builds a small instance of one block, replays it in
f64 and compares reverse-mode gradients against central differences.  The
CLI `gradcheck` subcommand and the acceptance suite both run this registry.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Var, grad_check
from .fusion import (AssociationMap, AttentionSpec, init_patchwise,
                     patchwise_fuse, sparse_feature_fusion)
from .head import LossWeights, TargetAssignment, head_forward, init_head, rpn_losses
from .pillar_encoder import init_pillar_stages, init_pointnet, pointnet_lite, stage_plan
from .sparse import ConvSpec, SparseTensor2D, SparseTensor3D, focal_conv
from .voxel_encoder import (elevation_compress, fsb_plan, init_voxel_stages,
                            multiscale_aggregate, _run_stage)


def _random_sparse_indices(rng, shape, n):
    total = int(np.prod(shape))
    flat = np.sort(rng.choice(total, size=min(n, total), replace=False))
    return np.stack(np.unravel_index(flat, shape), axis=1)


def check_pointnet(eps=1e-6):
    rng = np.random.default_rng(10)
    store = ParamStore()
    init_pointnet(store, rng, 6, 4)
    inputs = {n: store.get(n).astype(np.float64) for n in store.names()}
    inputs["x"] = rng.standard_normal((8, 6))
    ids = np.array([0, 0, 0, 1, 1, 2, 2, 3])
    idx = np.array([[0, 1], [1, 1], [2, 0], [3, 3]])

    def closure(v):
        leaves = {k: vv for k, vv in v.items() if k != "x"}
        return pointnet_lite(leaves, v["x"], ids, 4, idx, (4, 4)).features

    return grad_check(closure, inputs, eps=eps)


def check_scb_stage(eps=1e-6):
    rng = np.random.default_rng(11)
    store = ParamStore()
    channels = (3, 4, 4, 4)
    init_pillar_stages(store, rng, channels, in_channels=3)
    names = [n for n in store.names() if n.startswith("pillar.stage2.")]
    idx = _random_sparse_indices(rng, (8, 8), 10)
    inputs = {n: store.get(n).astype(np.float64) for n in names}
    inputs["feats"] = rng.standard_normal((10, 3))

    def closure(v):
        t = SparseTensor2D(idx, v["feats"], (8, 8), assume_sorted=True)
        layers = stage_plan(channels, 3)[1]
        leaves = {k: vv for k, vv in v.items() if k != "feats"}
        cur = t
        from .sparse import strided_sparse_conv, submanifold_conv
        for i, spec in enumerate(layers):
            name = f"pillar.stage2.conv{i}"
            fn = strided_sparse_conv if spec.kind == "strided" else submanifold_conv
            cur = fn(cur, spec, leaves[f"{name}.weight"], leaves[f"{name}.bias"])
            cur = SparseTensor2D(cur.indices, ad.relu(cur.features), cur.shape,
                                 assume_sorted=True)
        return cur.features

    return grad_check(closure, inputs, eps=eps, max_entries=8)


def check_fsb_stage(eps=1e-6):
    rng = np.random.default_rng(12)
    store = ParamStore()
    channels = (2, 3, 3, 3)
    init_voxel_stages(store, rng, channels)
    names = [n for n in store.names() if n.startswith("voxel.stage2.")]
    idx = _random_sparse_indices(rng, (8, 8, 8), 10)
    inputs = {}
    for n in names:
        v = store.get(n).astype(np.float64)
        if n.endswith(".importance"):
            v = rng.standard_normal(v.shape) * 0.8
        inputs[n] = v
    inputs["feats"] = rng.standard_normal((10, 2))

    def closure(v):
        t = SparseTensor3D(idx, v["feats"], (8, 8, 8), assume_sorted=True)
        layers = fsb_plan(channels, 2)[1]
        leaves = {k: vv for k, vv in v.items() if k != "feats"}
        return _run_stage(t, layers, leaves, "voxel.stage2", 0.5, []).features

    return grad_check(closure, inputs, eps=eps, max_entries=6)


def check_focal_conv(eps=1e-6):
    rng = np.random.default_rng(13)
    idx = _random_sparse_indices(rng, (6, 6, 6), 6)
    spec = ConvSpec.make("focal", 3, in_channels=2, out_channels=2)
    inputs = {"feats": rng.standard_normal((6, 2)),
              "w": rng.standard_normal((27, 2, 2)) * 0.4,
              "b": rng.standard_normal(2) * 0.1,
              "wi": rng.standard_normal((2, 1))}

    def closure(v):
        t = SparseTensor3D(idx, v["feats"], (6, 6, 6), assume_sorted=True)
        out, _ = focal_conv(t, spec, v["w"], v["b"], v["wi"], tau=0.5)
        return out.features

    return grad_check(closure, inputs, eps=eps, max_entries=10)


def check_multiscale(eps=1e-6):
    rng = np.random.default_rng(14)
    fine_idx = _random_sparse_indices(rng, (8, 8, 8), 12)
    coarse_idx = _random_sparse_indices(rng, (4, 4, 4), 6)
    inputs = {"fine": rng.standard_normal((12, 3)),
              "coarse": rng.standard_normal((6, 3))}

    def closure(v):
        f4 = SparseTensor3D(fine_idx, v["fine"], (8, 8, 8), assume_sorted=True)
        f5 = SparseTensor3D(coarse_idx, v["coarse"], (4, 4, 4),
                            assume_sorted=True)
        return multiscale_aggregate(f4, [(f5, 2)]).features

    return grad_check(closure, inputs, eps=eps)


def check_elevation(eps=1e-6):
    rng = np.random.default_rng(15)
    idx = _random_sparse_indices(rng, (4, 4, 6), 10)
    inputs = {"feats": rng.standard_normal((10, 3)),
              "z": rng.standard_normal(6)}

    def closure(v):
        t = SparseTensor3D(idx, v["feats"], (4, 4, 6), assume_sorted=True)
        return elevation_compress(t, v["z"]).features

    return grad_check(closure, inputs, eps=eps)


def check_sff(eps=1e-6):
    rng = np.random.default_rng(16)
    assoc = AssociationMap(np.array([0, 2, 3]), np.array([1, 0, 2]))
    inputs = {"fv": rng.standard_normal((5, 3)),
              "fp": rng.standard_normal((4, 3))}

    def closure(v):
        return sparse_feature_fusion(v["fv"], v["fp"], assoc)

    return grad_check(closure, inputs, eps=eps)


def check_patchwise(eps=1e-6):
    rng = np.random.default_rng(17)
    spec = AttentionSpec(patch=3, heads=2, channels=2)
    store = ParamStore()
    init_patchwise(store, rng, spec)
    inputs = {n: store.get(n).astype(np.float64) for n in store.names()}
    inputs["vox"] = rng.standard_normal((3, 3, 2))
    inputs["pil"] = rng.standard_normal((3, 3, 2))

    def closure(v):
        leaves = {k: vv for k, vv in v.items() if k not in ("vox", "pil")}
        return patchwise_fuse(v["vox"], v["pil"], spec, leaves)

    return grad_check(closure, inputs, eps=eps, max_entries=5)


def check_head(eps=1e-6):
    rng = np.random.default_rng(18)
    store = ParamStore()
    init_head(store, rng, in_channels=2, mid_channels=3, num_classes=1)
    inputs = {n: store.get(n).astype(np.float64) for n in store.names()}
    inputs["fbev"] = rng.standard_normal((2, 2, 2))

    def closure(v):
        leaves = {k: vv for k, vv in v.items() if k != "fbev"}
        cls, box, d = head_forward(leaves, v["fbev"], num_classes=1)
        return ad.concat([cls, box, d], axis=1)

    return grad_check(closure, inputs, eps=eps, max_entries=5)


def check_losses(eps=1e-6):
    rng = np.random.default_rng(19)
    n, num_cls = 6, 2
    targets = TargetAssignment(
        cls_onehot=np.eye(num_cls)[rng.integers(0, num_cls, n)] *
        (rng.uniform(size=(n, 1)) < 0.4),
        cls_mask=(rng.uniform(size=n) > 0.1).astype(np.float64),
        pos_mask=np.zeros(n), reg_targets=rng.standard_normal((n, 7)) * 0.2,
        dir_targets=rng.integers(0, 2, n), num_pos=0)
    targets.pos_mask = (targets.cls_onehot.sum(axis=1) > 0).astype(np.float64)
    targets.num_pos = int(targets.pos_mask.sum())
    inputs = {"cls": rng.standard_normal((n, num_cls)),
              "box": rng.standard_normal((n, 7)),
              "dir": rng.standard_normal((n, 2))}

    def closure(v):
        return rpn_losses(v["cls"], v["box"], v["dir"], targets,
                          LossWeights())["total"]

    return grad_check(closure, inputs, eps=eps)


REGISTRY = {
    "pointnet": check_pointnet,
    "scb_stage": check_scb_stage,
    "fsb_stage": check_fsb_stage,
    "focal_conv": check_focal_conv,
    "multiscale_aggregate": check_multiscale,
    "elevation_compress": check_elevation,
    "sparse_feature_fusion": check_sff,
    "patchwise_fuse": check_patchwise,
    "head": check_head,
    "losses": check_losses,
}


def run_all(tolerance: float = 1e-4):
    """Run every registered check; returns (all_passed, per-block report)."""
    results = {}
    ok = True
    for name, fn in REGISTRY.items():
        report = fn()
        results[name] = report["max_rel_err"]
        ok &= report["max_rel_err"] <= tolerance
    return ok, results
