"""Small shared building blocks: parameter init and dense 2D convolution."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Var


def kaiming_uniform(rng, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def add_linear(store: ParamStore, rng, prefix: str, in_dim: int, out_dim: int,
               bias: bool = True) -> None:
    store.add(f"{prefix}.weight", kaiming_uniform(rng, (in_dim, out_dim), in_dim))
    if bias:
        store.add(f"{prefix}.bias", np.zeros(out_dim, dtype=np.float32))


def linear(leaves: dict, prefix: str, x: Var) -> Var:
    out = ad.matmul(x, leaves[f"{prefix}.weight"])
    bias = leaves.get(f"{prefix}.bias")
    if bias is not None:
        out = ad.add(out, bias)
    return out


def add_conv(store: ParamStore, rng, prefix: str, volume: int, in_ch: int,
             out_ch: int) -> None:
    store.add(f"{prefix}.weight",
              kaiming_uniform(rng, (volume, in_ch, out_ch), volume * in_ch))
    store.add(f"{prefix}.bias", np.zeros(out_ch, dtype=np.float32))


def dense_conv2d(leaves: dict, prefix: str, x: Var, kernel: int = 3) -> Var:
    """3x3 (stride 1, zero pad) conv on a dense (H, W, C) map via im2col."""
    h, w, c = x.value.shape
    pad = kernel // 2
    flat = ad.reshape(x, (h * w, c))
    ext = ad.concat([flat, Var(np.zeros((1, c), dtype=x.value.dtype))], axis=0)
    src = _patch_rows(h, w, kernel)
    cols = ad.gather(ext, src.reshape(-1))
    cols = ad.reshape(cols, (h * w, kernel * kernel * c))
    weight = leaves[f"{prefix}.weight"]          # (k*k, C, C_out)
    k2, _, c_out = weight.value.shape
    w2 = ad.reshape(weight, (k2 * c, c_out))
    out = ad.add(ad.matmul(cols, w2), leaves[f"{prefix}.bias"])
    return ad.reshape(out, (h, w, c_out))


_PATCH_CACHE: dict = {}


def _patch_rows(h: int, w: int, kernel: int) -> np.ndarray:
    """(H*W, k*k) flat source rows into an (H*W + 1)-row array; the extra
    row is the zero-pad sentinel."""
    key = (h, w, kernel)
    hit = _PATCH_CACHE.get(key)
    if hit is not None:
        return hit
    pad = kernel // 2
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    rows = np.empty((h * w, kernel * kernel), dtype=np.int64)
    j = 0
    for dy in range(-pad, pad + 1):
        for dx in range(-pad, pad + 1):
            ny = ys + dy
            nx = xs + dx
            ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
            flat = np.where(ok, ny * w + nx, h * w)
            rows[:, j] = flat.ravel()
            j += 1
    _PATCH_CACHE[key] = rows
    return rows
