"""Sparse tensors and the three sparse convolution kinds.

Convolutions are realized as gather -> matmul -> scatter-add driven by a
precomputed kernel-offset index map (the rulebook).  Missing sources point
at an appended all-zero feature row, so one dense matmul per layer covers
every kernel offset.  Output rows are always emitted in lexicographic
index order, which keeps results independent of input row permutations.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var


class SparseError(ValueError):
    pass


def _as_tuple(v, d):
    if np.isscalar(v):
        return (int(v),) * d
    t = tuple(int(x) for x in v)
    if len(t) != d:
        raise SparseError(f"expected {d} entries, got {t}")
    return t


@dataclass(frozen=True)
class ConvSpec:
    kind: str                  # "submanifold" | "strided" | "focal"
    kernel: tuple
    stride: tuple
    padding: tuple
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if self.kind not in ("submanifold", "strided", "focal"):
            raise SparseError(f"unknown conv kind {self.kind}")
        if any(k <= 0 for k in self.kernel):
            raise SparseError("kernel extents must be positive")
        if self.kind in ("submanifold", "focal") and any(s != 1 for s in self.stride):
            raise SparseError(f"{self.kind} convolution requires stride 1")

    @staticmethod
    def make(kind, d, kernel=3, stride=1, padding=None, in_channels=1,
             out_channels=1) -> "ConvSpec":
        kernel = _as_tuple(kernel, d)
        stride = _as_tuple(stride, d)
        if padding is None:
            padding = tuple(k // 2 for k in kernel)
        padding = _as_tuple(padding, d)
        return ConvSpec(kind, kernel, stride, padding, in_channels, out_channels)

    @property
    def volume(self) -> int:
        return int(np.prod(self.kernel))

    def horizontal(self) -> tuple:
        """(kernel, stride, padding) restricted to the two horizontal axes."""
        return (self.kernel[:2], self.stride[:2], self.padding[:2])


class SparseTensor:
    """Sorted unique integer sites paired with a dense feature matrix."""

    def __init__(self, indices: np.ndarray, features, shape: tuple,
                 assume_sorted: bool = False):
        indices = np.asarray(indices, dtype=np.int64)
        if indices.ndim != 2:
            raise SparseError("indices must be (N, d)")
        self.shape = tuple(int(s) for s in shape)
        if indices.shape[1] != len(self.shape):
            raise SparseError("index width does not match spatial shape")
        features = features if isinstance(features, Var) else Var(np.asarray(features))
        if features.value.ndim != 2 or features.value.shape[0] != indices.shape[0]:
            raise SparseError("features must be (N, C) matching indices")
        if indices.shape[0]:
            if (indices < 0).any() or (indices >= np.asarray(self.shape)).any():
                raise SparseError("indices out of the declared spatial shape")
        if not assume_sorted:
            order = np.lexsort(indices.T[::-1])
            indices = indices[order]
            if np.asarray(order != np.arange(len(order))).any():
                features = ad.gather(features, order)
            keys = _ravel(indices, self.shape)
            if indices.shape[0] and (np.diff(keys) == 0).any():
                raise SparseError("duplicate indices")
        self.indices = indices
        self.features = features

    @property
    def num_active(self) -> int:
        return self.indices.shape[0]

    @property
    def num_channels(self) -> int:
        return self.features.value.shape[1]

    @property
    def ndim(self) -> int:
        return len(self.shape)


class SparseTensor2D(SparseTensor):
    def __init__(self, indices, features, shape, assume_sorted=False):
        if len(tuple(shape)) != 2:
            raise SparseError("SparseTensor2D needs a 2-axis shape")
        super().__init__(indices, features, shape, assume_sorted)


class SparseTensor3D(SparseTensor):
    def __init__(self, indices, features, shape, assume_sorted=False):
        if len(tuple(shape)) != 3:
            raise SparseError("SparseTensor3D needs a 3-axis shape")
        super().__init__(indices, features, shape, assume_sorted)


def _ravel(indices: np.ndarray, shape: tuple) -> np.ndarray:
    key = indices[:, 0].astype(np.int64)
    for d in range(1, len(shape)):
        key = key * shape[d] + indices[:, d]
    return key


def _offsets(kernel: tuple) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(k) for k in kernel], indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def _lookup(keys_sorted: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Row of each query key in `keys_sorted`, or -1 when absent."""
    pos = np.searchsorted(keys_sorted, query)
    pos_c = np.minimum(pos, len(keys_sorted) - 1) if len(keys_sorted) else pos
    found = np.zeros(query.shape, dtype=bool)
    if len(keys_sorted):
        found = keys_sorted[pos_c] == query
    return np.where(found, pos_c, -1)


_RULEBOOK_CACHE: OrderedDict = OrderedDict()
_RULEBOOK_CACHE_MAX = 2048


def _cache_key(tag, indices, shape, spec_geom):
    digest = hashlib.sha1(indices.tobytes()).hexdigest()
    return (tag, digest, indices.shape, shape, spec_geom)


def _cache_get(key):
    hit = _RULEBOOK_CACHE.get(key)
    if hit is not None:
        _RULEBOOK_CACHE.move_to_end(key)
    return hit


def _cache_put(key, value):
    _RULEBOOK_CACHE[key] = value
    if len(_RULEBOOK_CACHE) > _RULEBOOK_CACHE_MAX:
        _RULEBOOK_CACHE.popitem(last=False)


def _src_map(out_indices, in_indices, shape, kernel, stride, padding):
    """(N_out, volume) rows into the input, or N_in where the source is absent."""
    n_in = in_indices.shape[0]
    in_keys = _ravel(in_indices, shape)
    offs = _offsets(kernel)
    vol = offs.shape[0]
    n_out = out_indices.shape[0]
    src = np.full((n_out, vol), n_in, dtype=np.int64)
    stride = np.asarray(stride)
    padding = np.asarray(padding)
    shape_arr = np.asarray(shape)
    for j in range(vol):
        s = out_indices * stride - padding + offs[j]
        valid = ((s >= 0) & (s < shape_arr)).all(axis=1)
        if not valid.any():
            continue
        rows = _lookup(in_keys, _ravel(s[valid], shape))
        hit = rows >= 0
        tgt = np.nonzero(valid)[0][hit]
        src[tgt, j] = rows[hit]
    return src


def _strided_out_indices(in_indices, shape, kernel, stride, padding):
    """Active output sites of a strided conv plus the output spatial shape."""
    out_shape = tuple((n + 2 * p - k) // s + 1
                      for n, k, s, p in zip(shape, kernel, stride, padding))
    offs = _offsets(kernel)
    stride_arr = np.asarray(stride)
    pad_arr = np.asarray(padding)
    outs = []
    for j in range(offs.shape[0]):
        num = in_indices + pad_arr - offs[j]
        ok = (num % stride_arr == 0).all(axis=1)
        o = num[ok] // stride_arr
        ok2 = ((o >= 0) & (o < np.asarray(out_shape))).all(axis=1)
        outs.append(o[ok2])
    if outs:
        cand = np.concatenate(outs, axis=0)
    else:
        cand = np.zeros((0, len(shape)), dtype=np.int64)
    if cand.shape[0]:
        keys = _ravel(cand, out_shape)
        uniq = np.unique(keys)
        out_indices = np.stack(np.unravel_index(uniq, out_shape), axis=1)
    else:
        out_indices = cand
    return out_indices.astype(np.int64), out_shape


def _apply_rulebook(features: Var, src: np.ndarray, weights: Var,
                    bias: Var | None, spec: ConvSpec) -> Var:
    """im2col evaluation: one gather, one matmul, optional bias."""
    n_out, vol = src.shape
    ext = ad.concat([features,
                     Var(np.zeros((1, spec.in_channels),
                                  dtype=features.value.dtype))], axis=0)
    cols = ad.gather(ext, src.reshape(-1))
    cols = ad.reshape(cols, (n_out, vol * spec.in_channels))
    w2 = ad.reshape(weights, (vol * spec.in_channels, spec.out_channels))
    out = ad.matmul(cols, w2)
    if bias is not None:
        out = ad.add(out, bias)
    return out


def _check_channels(t: SparseTensor, spec: ConvSpec, weights: Var):
    if t.num_channels != spec.in_channels:
        raise SparseError(f"input has {t.num_channels} channels, spec wants "
                          f"{spec.in_channels}")
    expected = (spec.volume, spec.in_channels, spec.out_channels)
    if tuple(weights.value.shape) != expected:
        raise SparseError(f"weights must have shape {expected}")


def submanifold_conv(t: SparseTensor, spec: ConvSpec, weights, bias=None) -> SparseTensor:
    """Convolution whose output active set equals the input active set."""
    if spec.kind != "submanifold":
        raise SparseError("spec.kind must be submanifold")
    weights = weights if isinstance(weights, Var) else Var(weights)
    _check_channels(t, spec, weights)
    key = _cache_key("subm", t.indices, t.shape, (spec.kernel, spec.stride,
                                                  spec.padding))
    src = _cache_get(key)
    if src is None:
        src = _src_map(t.indices, t.indices, t.shape, spec.kernel,
                       spec.stride, spec.padding)
        _cache_put(key, src)
    out = _apply_rulebook(t.features, src, weights, bias, spec)
    return type(t)(t.indices, out, t.shape, assume_sorted=True)


def strided_sparse_conv(t: SparseTensor, spec: ConvSpec, weights, bias=None) -> SparseTensor:
    """Downsampling conv; output sites are all whose receptive field touches input."""
    if spec.kind != "strided":
        raise SparseError("spec.kind must be strided")
    weights = weights if isinstance(weights, Var) else Var(weights)
    _check_channels(t, spec, weights)
    key = _cache_key("strided", t.indices, t.shape,
                     (spec.kernel, spec.stride, spec.padding))
    hit = _cache_get(key)
    if hit is None:
        out_indices, out_shape = _strided_out_indices(
            t.indices, t.shape, spec.kernel, spec.stride, spec.padding)
        src = _src_map(out_indices, t.indices, t.shape, spec.kernel,
                       spec.stride, spec.padding)
        _cache_put(key, (out_indices, out_shape, src))
    else:
        out_indices, out_shape, src = hit
    out = _apply_rulebook(t.features, src, weights, bias, spec)
    return type(t)(out_indices, out, out_shape, assume_sorted=True)


def focal_conv(t: SparseTensor, spec: ConvSpec, weights, bias, w_importance,
               tau: float = 0.5) -> tuple:
    """Submanifold conv with importance-gated dilation.

    Per-site importance is `logistic(features @ w_importance)`.  Sites above
    `tau` spill into their full kernel neighborhood; contributions landing on
    sites that were not previously active are scaled by the source importance,
    keeping the dilation pathway differentiable.  Returns (tensor, importance).
    """
    if spec.kind != "focal":
        raise SparseError("spec.kind must be focal")
    weights = weights if isinstance(weights, Var) else Var(weights)
    w_importance = w_importance if isinstance(w_importance, Var) else Var(w_importance)
    _check_channels(t, spec, weights)

    importance = ad.sigmoid(ad.matmul(t.features, w_importance))   # (N, 1)
    gate = importance.value[:, 0] > tau

    key = _cache_key("subm", t.indices, t.shape, (spec.kernel, spec.stride,
                                                  spec.padding))
    base_src = _cache_get(key)
    if base_src is None:
        base_src = _src_map(t.indices, t.indices, t.shape, spec.kernel,
                            spec.stride, spec.padding)
        _cache_put(key, base_src)

    n_in = t.num_active
    in_keys = _ravel(t.indices, t.shape)
    new_indices = np.zeros((0, t.ndim), dtype=np.int64)
    if gate.any():
        offs = _offsets(spec.kernel)
        pad = np.asarray(spec.padding)
        cand = (t.indices[gate][:, None, :] - pad + offs[None, :, :]).reshape(-1, t.ndim)
        ok = ((cand >= 0) & (cand < np.asarray(t.shape))).all(axis=1)
        cand = cand[ok]
        if cand.shape[0]:
            keys = np.unique(_ravel(cand, t.shape))
            keys = keys[_lookup(in_keys, keys) < 0]
            new_indices = np.stack(np.unravel_index(keys, t.shape), axis=1)

    out_indices = np.concatenate([t.indices, new_indices], axis=0)
    order = np.lexsort(out_indices.T[::-1])
    out_indices = out_indices[order]
    n_out = out_indices.shape[0]
    inv = np.empty(n_out, dtype=np.int64)
    inv[order] = np.arange(n_out)
    pos_of_old = inv[:n_in]
    pos_of_new = inv[n_in:]

    base_out = _apply_rulebook(t.features, base_src, weights, None, spec)
    parts = ad.scatter_add(base_out, pos_of_old, n_out)

    if new_indices.shape[0]:
        gated_scaled = ad.mul(t.features,
                              ad.mul(importance, Var(gate[:, None].astype(
                                  t.features.value.dtype))))
        new_src = _src_map(new_indices, t.indices, t.shape, spec.kernel,
                           spec.stride, spec.padding)
        extra = _apply_rulebook(gated_scaled, new_src, weights, None, spec)
        parts = ad.add(parts, ad.scatter_add(extra, pos_of_new, n_out))
    if bias is not None:
        bias = bias if isinstance(bias, Var) else Var(bias)
        parts = ad.add(parts, bias)
    out = type(t)(out_indices, parts, t.shape, assume_sorted=True)
    return out, importance


def to_dense(t: SparseTensor, *spatial) -> Var:
    """Dense (spatial..., C) map with zeros at inactive sites."""
    shape = tuple(int(s) for s in spatial) if spatial else t.shape
    if len(shape) != t.ndim:
        raise SparseError("dense shape rank mismatch")
    if t.num_active and ((t.indices >= np.asarray(shape)).any() or
                         (t.indices < 0).any()):
        raise SparseError("indices exceed the requested dense shape")
    flat = _ravel(t.indices, shape)
    total = int(np.prod(shape))
    dense = ad.scatter_add(t.features, flat, total)
    return ad.reshape(dense, shape + (t.num_channels,))
