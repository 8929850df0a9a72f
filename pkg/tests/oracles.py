"""Independent reference implementations used as test oracles.

Everything here is written straight-line, favoring obviousness over
speed, and stays independent of the library code paths it checks.
"""

import numpy as np


def dense_conv(dense, weights, stride, padding, bias=None):
    """Plain dense cross-correlation on a (spatial..., C_in) array.

    weights: (kernel_volume, C_in, C_out) with offsets enumerated in
    row-major order over the kernel extents.
    """
    spatial = dense.shape[:-1]
    d = len(spatial)
    vol, c_in, c_out = weights.shape
    kernel = _infer_kernel(vol, d)
    out_shape = tuple((n + 2 * p - k) // s + 1
                      for n, k, s, p in zip(spatial, kernel, stride, padding))
    out = np.zeros(out_shape + (c_out,), dtype=np.float64)
    offsets = list(np.ndindex(*kernel))
    for o in np.ndindex(*out_shape):
        acc = np.zeros(c_out)
        for j, off in enumerate(offsets):
            src = tuple(oo * s - p + d_
                        for oo, s, p, d_ in zip(o, stride, padding, off))
            if all(0 <= si < ni for si, ni in zip(src, spatial)):
                acc += dense[src] @ weights[j]
        out[o] = acc
    if bias is not None:
        out += bias
    return out


def _infer_kernel(volume, d):
    k = round(volume ** (1.0 / d))
    for cand in (k - 1, k, k + 1):
        if cand > 0 and cand ** d == volume:
            return (cand,) * d
    raise ValueError(f"cannot infer cubic kernel from volume {volume}")


def sparse_to_dense(indices, features, shape):
    out = np.zeros(tuple(shape) + (features.shape[1],), dtype=np.float64)
    for idx, f in zip(indices, features):
        out[tuple(idx)] += f
    return out


def dense_to_sparse(dense):
    """Active sites = rows with any non-zero value, in lexicographic order."""
    spatial = dense.shape[:-1]
    idx, feats = [], []
    for o in np.ndindex(*spatial):
        row = dense[o]
        if np.any(row != 0):
            idx.append(o)
            feats.append(row)
    if not idx:
        return (np.zeros((0, len(spatial)), dtype=np.int64),
                np.zeros((0, dense.shape[-1])))
    return np.asarray(idx, dtype=np.int64), np.asarray(feats)


def nearest_cell_bruteforce(raster_origin, cell, grid_hw, xy):
    """Exhaustive nearest raster cell center with (row, col) tie-break."""
    h, w = grid_hw
    out = np.empty((len(xy), 2), dtype=np.int64)
    for i, (x, y) in enumerate(xy):
        best = None
        for r in range(h):
            for c in range(w):
                cx = raster_origin[0] + (c + 0.5) * cell
                cy = raster_origin[1] + (r + 0.5) * cell
                d = (x - cx) ** 2 + (y - cy) ** 2
                key = (d, r, c)
                if best is None or key < best:
                    best = key
                    out[i] = (r, c)
    return out


def iou_bev_montecarlo(box_a, box_b, n=10_000_000, seed=0):
    """Monte-Carlo rotated BEV IoU over the union's bounding rectangle."""
    rng = np.random.default_rng(seed)
    ca = _corners(box_a)
    cb = _corners(box_b)
    lo = np.minimum(ca.min(axis=0), cb.min(axis=0))
    hi = np.maximum(ca.max(axis=0), cb.max(axis=0))
    pts = rng.uniform(lo, hi, size=(n, 2))
    in_a = _inside(box_a, pts)
    in_b = _inside(box_b, pts)
    area = np.prod(hi - lo)
    inter = in_a & in_b
    union = in_a | in_b
    u = union.mean() * area
    if u == 0:
        return 0.0
    return float(inter.mean() * area / u)


def _corners(box):
    cx, cy, _, dx, dy, _, yaw = box[:7]
    c, s = np.cos(yaw), np.sin(yaw)
    local = np.array([[dx, dy], [-dx, dy], [-dx, -dy], [dx, -dy]]) * 0.5
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + (cx, cy)


def _inside(box, pts):
    cx, cy, _, dx, dy, _, yaw = box[:7]
    c, s = np.cos(yaw), np.sin(yaw)
    px = pts[:, 0] - cx
    py = pts[:, 1] - cy
    lx = c * px + s * py
    ly = -s * px + c * py
    return (np.abs(lx) <= dx / 2) & (np.abs(ly) <= dy / 2)


def iou_3d_voxelized(box_a, box_b, cell=0.01):
    """Volume IoU by counting cells of a fine grid inside both boxes."""
    ca, cb = _corners(box_a), _corners(box_b)
    lo = np.minimum(ca.min(axis=0), cb.min(axis=0))
    hi = np.maximum(ca.max(axis=0), cb.max(axis=0))
    z0 = min(box_a[2] - box_a[5] / 2, box_b[2] - box_b[5] / 2)
    z1 = max(box_a[2] + box_a[5] / 2, box_b[2] + box_b[5] / 2)
    xs = np.arange(lo[0] + cell / 2, hi[0], cell)
    ys = np.arange(lo[1] + cell / 2, hi[1], cell)
    zs = np.arange(z0 + cell / 2, z1, cell)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    in_a2 = _inside(box_a, pts)
    in_b2 = _inside(box_b, pts)
    za = (zs >= box_a[2] - box_a[5] / 2) & (zs <= box_a[2] + box_a[5] / 2)
    zb = (zs >= box_b[2] - box_b[5] / 2) & (zs <= box_b[2] + box_b[5] / 2)
    inter = np.outer(in_a2 & in_b2, za & zb).sum()
    union = np.outer(in_a2, za).sum() + np.outer(in_b2, zb).sum() - inter
    return inter / union if union else 0.0
