"""Multi-level feature fusion between the pillar and voxel branches.

Sparse feature fusion adds pillar features onto voxels that share the same
horizontal cell at matching stages.  Patch-wise fusion aligns the two
dense BEV maps with neighborhood cross-attention, then reweighs channels
with self-attention over each patch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Var
from .nn import _patch_rows, add_linear, kaiming_uniform, linear
from .sparse import SparseError, _lookup, _ravel


@dataclass
class AssociationMap:
    """Matched (voxel row, pillar row) pairs; the sparse form of M_kl."""

    voxel_rows: np.ndarray
    pillar_rows: np.ndarray

    @property
    def num_pairs(self) -> int:
        return self.voxel_rows.shape[0]


@dataclass
class AttentionSpec:
    patch: int = 3
    heads: int = 4
    channels: int = 32          # C of each branch's BEV map

    def __post_init__(self):
        if self.patch % 2 == 0:
            raise SparseError("patch size must be odd")
        if self.channels % self.heads:
            raise SparseError("channels must divide evenly into heads")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.head_dim)


def build_association(pillar_indices: np.ndarray,
                      voxel_indices: np.ndarray) -> AssociationMap:
    """Hash-join voxel horizontal coordinates against pillar indices."""
    if pillar_indices.shape[0] == 0 or voxel_indices.shape[0] == 0:
        empty = np.zeros(0, dtype=np.int64)
        return AssociationMap(empty, empty)
    span = int(max(pillar_indices[:, 1].max(),
                   voxel_indices[:, 1].max())) + 1
    pillar_keys = pillar_indices[:, 0] * span + pillar_indices[:, 1]
    order = np.argsort(pillar_keys, kind="stable")
    voxel_keys = voxel_indices[:, 0] * span + voxel_indices[:, 1]
    pos = np.searchsorted(pillar_keys[order], voxel_keys)
    pos_c = np.minimum(pos, len(order) - 1)
    found = pillar_keys[order][pos_c] == voxel_keys
    voxel_rows = np.nonzero(found)[0].astype(np.int64)
    pillar_rows = order[pos_c[found]].astype(np.int64)
    return AssociationMap(voxel_rows, pillar_rows)


def init_sff_projection(store: ParamStore, rng, pillar_ch: int, voxel_ch: int,
                        prefix: str) -> None:
    """Learnable pillar->voxel projection, only created on width mismatch."""
    if pillar_ch != voxel_ch:
        store.add(f"{prefix}.weight",
                  kaiming_uniform(rng, (pillar_ch, voxel_ch), pillar_ch))


def sparse_feature_fusion(voxel_features: Var, pillar_features: Var,
                          assoc: AssociationMap, leaves: dict | None = None,
                          prefix: str = "") -> Var:
    """F_v <- F_v + M . proj(F_p); unmatched voxel rows pass through."""
    proj = pillar_features
    key = f"{prefix}.weight" if prefix else None
    if leaves is not None and key is not None and key in leaves:
        proj = ad.matmul(pillar_features, leaves[key])
    if proj.value.shape[1] != voxel_features.value.shape[1]:
        raise SparseError("pillar features must be projected to the voxel width")
    if assoc.num_pairs == 0:
        return voxel_features
    if assoc.voxel_rows.max() >= voxel_features.value.shape[0] or \
            assoc.pillar_rows.max() >= proj.value.shape[0]:
        raise SparseError("association rows exceed feature row counts")
    gathered = ad.gather(proj, assoc.pillar_rows)
    added = ad.scatter_add(gathered, assoc.voxel_rows,
                           voxel_features.value.shape[0])
    return ad.add(voxel_features, added)


def init_patchwise(store: ParamStore, rng, spec: AttentionSpec,
                   prefix: str = "fuse") -> None:
    c = spec.channels
    add_linear(store, rng, f"{prefix}.align.q", c, c, bias=False)
    add_linear(store, rng, f"{prefix}.align.k", c, c, bias=False)
    add_linear(store, rng, f"{prefix}.align.v", c, c, bias=False)
    store.add(f"{prefix}.align.pos",
              kaiming_uniform(rng, (spec.patch ** 2, c), c))

    k2 = spec.patch ** 2
    qk = spec.heads * max(2, k2 // spec.heads)
    add_linear(store, rng, f"{prefix}.select.q", k2, qk, bias=False)
    add_linear(store, rng, f"{prefix}.select.k", k2, qk, bias=False)
    store.add(f"{prefix}.select.v",
              kaiming_uniform(rng, (k2, spec.heads), k2))
    store.add(f"{prefix}.select.out",
              kaiming_uniform(rng, (spec.heads, 1), spec.heads))


def patchwise_fuse(voxel_map: Var, pillar_map: Var, spec: AttentionSpec,
                   leaves: dict, prefix: str = "fuse",
                   collect_attention: dict | None = None) -> Var:
    """Two-stage fusion of the dense maps into an (H, W, 2C) BEV map.

    Stage A (alignment): each voxel cell queries its k x k pillar
    neighborhood (keys carry a learnable positional table); the attention
    output is concatenated with the voxel cell feature.  Stage B (channel
    selection): per k x k patch of the aligned map, channels attend over
    each other using their patch values as features; Q, K, V share the
    same source.  Border cells use zero-padded neighborhoods.
    """
    h, w, c = voxel_map.value.shape
    if pillar_map.value.shape != (h, w, c):
        raise SparseError("branch maps must share (H, W, C)")
    k = spec.patch
    k2 = k * k
    heads = spec.heads
    hd = spec.head_dim
    n = h * w

    vox = ad.reshape(voxel_map, (n, c))
    pil = ad.reshape(pillar_map, (n, c))
    src = _patch_rows(h, w, k)                     # (n, k2), sentinel n

    # ---- stage A: neighborhood alignment ----
    q = linear(leaves, f"{prefix}.align.q", vox)                  # (n, C)
    pil_ext = ad.concat([pil, Var(np.zeros((1, c), dtype=pil.value.dtype))],
                        axis=0)
    neigh = ad.gather(pil_ext, src.reshape(-1))                   # (n*k2, C)
    keys = linear(leaves, f"{prefix}.align.k", neigh)
    keys = ad.add(ad.reshape(keys, (n, k2, c)),
                  leaves[f"{prefix}.align.pos"])                  # (n, k2, C)
    vals = ad.reshape(linear(leaves, f"{prefix}.align.v", neigh), (n, k2, c))

    qh = ad.transpose(ad.reshape(q, (n, 1, heads, hd)), (0, 2, 1, 3))
    kh = ad.transpose(ad.reshape(keys, (n, k2, heads, hd)), (0, 2, 1, 3))
    vh = ad.transpose(ad.reshape(vals, (n, k2, heads, hd)), (0, 2, 1, 3))
    logits = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))),
                    Var(np.asarray(spec.scale)))                  # (n, heads, 1, k2)
    attn = ad.softmax(logits, axis=-1)
    if collect_attention is not None:
        collect_attention["align"] = attn.value
    ctx = ad.matmul(attn, vh)                                     # (n, heads, 1, hd)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (n, c))
    aligned = ad.concat([ctx, vox], axis=1)                       # (n, 2C)

    # ---- stage B: channel selection over each patch ----
    c2 = 2 * c
    aligned_ext = ad.concat([aligned,
                             Var(np.zeros((1, c2), dtype=aligned.value.dtype))],
                            axis=0)
    patches = ad.gather(aligned_ext, src.reshape(-1))             # (n*k2, 2C)
    tokens = ad.transpose(ad.reshape(patches, (n, k2, c2)), (0, 2, 1))  # (n, 2C, k2)

    qs = ad.matmul(tokens, leaves[f"{prefix}.select.q.weight"])   # (n, 2C, qk)
    ks = ad.matmul(tokens, leaves[f"{prefix}.select.k.weight"])
    qk_width = qs.value.shape[-1]
    shd = qk_width // heads
    qsh = ad.transpose(ad.reshape(qs, (n, c2, heads, shd)), (0, 2, 1, 3))
    ksh = ad.transpose(ad.reshape(ks, (n, c2, heads, shd)), (0, 2, 1, 3))
    logits_b = ad.mul(ad.matmul(qsh, ad.transpose(ksh, (0, 1, 3, 2))),
                      Var(np.asarray(1.0 / np.sqrt(shd))))        # (n, heads, 2C, 2C)
    attn_b = ad.softmax(logits_b, axis=-1)
    if collect_attention is not None:
        collect_attention["select"] = attn_b.value

    vs = ad.matmul(tokens, leaves[f"{prefix}.select.v"])          # (n, 2C, heads)
    vsh = ad.transpose(ad.reshape(vs, (n, c2, heads, 1)), (0, 2, 1, 3))
    mixed = ad.matmul(attn_b, vsh)                                # (n, heads, 2C, 1)
    mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (n, c2, heads))
    fused = ad.matmul(mixed, leaves[f"{prefix}.select.out"])      # (n, 2C, 1)
    fused = ad.reshape(fused, (n, c2))
    return ad.reshape(fused, (h, w, c2))
