"""Single-stage BEV anchor head: anchor grid, box codec, target assignment,
region-proposal losses and rotated NMS."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Var
from .metrics import rotated_iou_bev
from .nn import add_conv, dense_conv2d
from .scene.types import Box3D, normalize_yaw


class NumericError(RuntimeError):
    """Raised when losses or gradients go non-finite."""


@dataclass
class AnchorGrid:
    """One anchor per yaw in {0, pi/2} per class per BEV cell."""

    boxes: np.ndarray        # (A, 7)
    class_ids: np.ndarray    # (A,)
    grid_hw: tuple           # BEV (H, W)
    num_classes: int

    @property
    def num_anchors(self) -> int:
        return self.boxes.shape[0]

    @property
    def per_cell(self) -> int:
        return self.num_classes * 2


def build_anchors(grid_hw, x_min, y_min, cell, class_sizes, class_z) -> AnchorGrid:
    """Anchor centers sit at BEV cell centers; yaw set {0, pi/2}."""
    h, w = grid_hw
    num_classes = len(class_sizes)
    yaws = (0.0, np.pi / 2)
    boxes = np.zeros((h, w, num_classes, len(yaws), 7), dtype=np.float64)
    class_ids = np.zeros((h, w, num_classes, len(yaws)), dtype=np.int64)
    for i in range(h):
        for j in range(w):
            cx = x_min + (i + 0.5) * cell
            cy = y_min + (j + 0.5) * cell
            for c, (size, zc) in enumerate(zip(class_sizes, class_z)):
                for k, yaw in enumerate(yaws):
                    boxes[i, j, c, k] = (cx, cy, zc, size[0], size[1],
                                         size[2], yaw)
                    class_ids[i, j, c, k] = c
    return AnchorGrid(boxes=boxes.reshape(-1, 7),
                      class_ids=class_ids.reshape(-1),
                      grid_hw=(h, w), num_classes=num_classes)


# ------------------------------------------------------------------- codec

def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """7 regression targets: center offsets over the BEV diagonal, z offset
    over height, log size ratios, sin of the yaw offset."""
    gt = np.atleast_2d(gt)
    anchors = np.atleast_2d(anchors)
    diag = np.sqrt(anchors[:, 3] ** 2 + anchors[:, 4] ** 2)
    out = np.empty_like(gt)
    out[:, 0] = (gt[:, 0] - anchors[:, 0]) / diag
    out[:, 1] = (gt[:, 1] - anchors[:, 1]) / diag
    out[:, 2] = (gt[:, 2] - anchors[:, 2]) / anchors[:, 5]
    out[:, 3] = np.log(gt[:, 3] / anchors[:, 3])
    out[:, 4] = np.log(gt[:, 4] / anchors[:, 4])
    out[:, 5] = np.log(gt[:, 5] / anchors[:, 5])
    out[:, 6] = np.sin(gt[:, 6] - anchors[:, 6])
    return out


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray,
                 dir_class: np.ndarray | None = None) -> np.ndarray:
    """Invert encode_boxes; the direction class flips yaw by pi when the
    decoded angle lands in the wrong half-circle."""
    deltas = np.atleast_2d(deltas)
    anchors = np.atleast_2d(anchors)
    diag = np.sqrt(anchors[:, 3] ** 2 + anchors[:, 4] ** 2)
    out = np.empty_like(deltas)
    out[:, 0] = deltas[:, 0] * diag + anchors[:, 0]
    out[:, 1] = deltas[:, 1] * diag + anchors[:, 1]
    out[:, 2] = deltas[:, 2] * anchors[:, 5] + anchors[:, 2]
    # log-size residuals are clamped so half-trained heads cannot overflow
    size = np.clip(deltas[:, 3:6], -10.0, 10.0)
    out[:, 3] = np.exp(size[:, 0]) * anchors[:, 3]
    out[:, 4] = np.exp(size[:, 1]) * anchors[:, 4]
    out[:, 5] = np.exp(size[:, 2]) * anchors[:, 5]
    yaw = anchors[:, 6] + np.arcsin(np.clip(deltas[:, 6], -1.0, 1.0))
    yaw = normalize_yaw(yaw)
    if dir_class is not None:
        want_upper = dir_class.astype(bool)
        is_upper = yaw >= 0
        flip = want_upper != is_upper
        yaw = normalize_yaw(yaw + np.pi * flip)
    out[:, 6] = yaw
    return out


def direction_target(yaw) -> np.ndarray:
    """1 when the yaw lies in [0, pi), else 0."""
    return (normalize_yaw(yaw) >= 0).astype(np.int64)


# ------------------------------------------------------------- assignment

@dataclass
class TargetAssignment:
    cls_onehot: np.ndarray    # (A, num_classes)
    cls_mask: np.ndarray      # (A,) 1 for counted anchors (pos + neg)
    pos_mask: np.ndarray      # (A,)
    reg_targets: np.ndarray   # (A, 7)
    dir_targets: np.ndarray   # (A,)
    num_pos: int


def assign_targets(anchors: AnchorGrid, labels, pos_thr=None,
                   neg_thr=None) -> TargetAssignment:
    """Rotated-BEV IoU assignment with per-class thresholds.

    Positive above pos_thr(class), negative below neg_thr(class), otherwise
    ignored; every label additionally forces its best-IoU anchor positive.
    """
    if pos_thr is None:
        pos_thr = [0.6] * anchors.num_classes
    if neg_thr is None:
        neg_thr = [0.45] * anchors.num_classes
    n = anchors.num_anchors
    num_cls = anchors.num_classes
    cls_onehot = np.zeros((n, num_cls), dtype=np.float64)
    cls_mask = np.ones(n, dtype=np.float64)
    pos_mask = np.zeros(n, dtype=np.float64)
    reg_targets = np.zeros((n, 7), dtype=np.float64)
    dir_targets = np.zeros(n, dtype=np.int64)

    real = [b for b in labels if not getattr(b, "is_fake", False)]
    if real:
        best_gt = np.full(n, -1, dtype=np.int64)
        best_iou = np.zeros(n, dtype=np.float64)
        gt_best_anchor = np.full(len(real), -1, dtype=np.int64)
        gt_best_iou = np.full(len(real), -1.0, dtype=np.float64)
        for gi, g in enumerate(real):
            garr = g.as_array()
            cand = np.nonzero(anchors.class_ids == g.class_id)[0]
            if len(cand) == 0:
                continue
            # cheap prefilter: anchors whose center is near the label
            reach = 0.5 * np.hypot(garr[3], garr[4]) + \
                0.5 * np.hypot(anchors.boxes[cand, 3],
                               anchors.boxes[cand, 4]).max()
            near = cand[np.hypot(anchors.boxes[cand, 0] - garr[0],
                                 anchors.boxes[cand, 1] - garr[1]) <= reach]
            for ai in near:
                iou = rotated_iou_bev(anchors.boxes[ai], garr)
                if iou > best_iou[ai]:
                    best_iou[ai] = iou
                    best_gt[ai] = gi
                if iou > gt_best_iou[gi]:
                    gt_best_iou[gi] = iou
                    gt_best_anchor[gi] = ai

        pos_t = np.array([pos_thr[c] for c in anchors.class_ids])
        neg_t = np.array([neg_thr[c] for c in anchors.class_ids])
        positive = (best_iou >= pos_t) & (best_gt >= 0)
        for gi, ai in enumerate(gt_best_anchor):
            if ai >= 0:
                positive[ai] = True
                best_gt[ai] = gi
        ignored = (~positive) & (best_iou > neg_t)
        cls_mask = np.where(ignored, 0.0, 1.0)
        pos_mask = positive.astype(np.float64)

        pos_rows = np.nonzero(positive)[0]
        if len(pos_rows):
            gt_arr = np.stack([real[best_gt[ai]].as_array() for ai in pos_rows])
            reg_targets[pos_rows] = encode_boxes(gt_arr,
                                                 anchors.boxes[pos_rows])
            dir_targets[pos_rows] = direction_target(gt_arr[:, 6])
            for ai in pos_rows:
                cls_onehot[ai, real[best_gt[ai]].class_id] = 1.0

    return TargetAssignment(cls_onehot=cls_onehot, cls_mask=cls_mask,
                            pos_mask=pos_mask, reg_targets=reg_targets,
                            dir_targets=dir_targets,
                            num_pos=int(pos_mask.sum()))


# ------------------------------------------------------------ head network

def init_head(store: ParamStore, rng, in_channels: int, mid_channels: int,
              num_classes: int, prefix: str = "head",
              prior_probability: float = 0.01) -> None:
    per_cell = num_classes * 2
    add_conv(store, rng, f"{prefix}.conv0", 9, in_channels, mid_channels)
    add_conv(store, rng, f"{prefix}.conv1", 9, mid_channels, mid_channels)
    add_conv(store, rng, f"{prefix}.cls", 1, mid_channels,
             per_cell * num_classes)
    add_conv(store, rng, f"{prefix}.box", 1, mid_channels, per_cell * 7)
    add_conv(store, rng, f"{prefix}.dir", 1, mid_channels, per_cell * 2)
    # classification bias starts at the background prior so the focal loss
    # is not swamped by thousands of half-confident negatives
    bias = np.full(per_cell * num_classes,
                   -np.log((1.0 - prior_probability) / prior_probability),
                   dtype=np.float32)
    store.set(f"{prefix}.cls.bias", bias)


def head_forward(leaves: dict, bev_map: Var, num_classes: int,
                 prefix: str = "head"):
    """Two 3x3 convs then 1x1 heads; flat per-anchor outputs.

    Returns (cls_logits (A, num_classes), box_deltas (A, 7),
    dir_logits (A, 2)) with anchors enumerated cell-major then class, yaw.
    """
    h, w, _ = bev_map.value.shape
    per_cell = num_classes * 2
    x = ad.relu(dense_conv2d(leaves, f"{prefix}.conv0", bev_map))
    x = ad.relu(dense_conv2d(leaves, f"{prefix}.conv1", x))
    cls = dense_conv2d(leaves, f"{prefix}.cls", x, kernel=1)
    box = dense_conv2d(leaves, f"{prefix}.box", x, kernel=1)
    direction = dense_conv2d(leaves, f"{prefix}.dir", x, kernel=1)
    n = h * w * per_cell
    return (ad.reshape(cls, (n, num_classes)),
            ad.reshape(box, (n, 7)),
            ad.reshape(direction, (n, 2)))


# ------------------------------------------------------------------ losses

@dataclass
class LossWeights:
    cls: float = 1.0
    reg: float = 2.0
    direction: float = 0.2
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0 / 9.0


def focal_binary_loss(logits: Var, targets: np.ndarray, alpha: float) -> Var:
    """Per-entry focal term with gamma = 2: -alpha_t (1 - p_t)^2 log(p_t)."""
    p = ad.sigmoid(logits)
    t = Var(targets)
    one = Var(np.asarray(1.0))
    eps = Var(np.asarray(1e-12))
    pos = ad.mul(t, ad.mul(ad.mul(ad.sub(one, p), ad.sub(one, p)),
                           ad.log(ad.add(p, eps))))
    neg = ad.mul(ad.sub(one, t), ad.mul(ad.mul(p, p),
                                        ad.log(ad.add(ad.sub(one, p), eps))))
    return ad.neg(ad.add(ad.mul(Var(np.asarray(alpha)), pos),
                         ad.mul(Var(np.asarray(1.0 - alpha)), neg)))


def rpn_losses(cls_logits: Var, box_deltas: Var, dir_logits: Var,
               targets: TargetAssignment, weights: LossWeights = LossWeights()):
    """Focal classification + smooth-L1 regression + direction CE, each
    normalized by max(1, num positives)."""
    for v in (cls_logits, box_deltas, dir_logits):
        if not np.isfinite(v.value).all():
            raise NumericError("non-finite head predictions")
    norm = Var(np.asarray(1.0 / max(1, targets.num_pos)))

    focal = focal_binary_loss(cls_logits, targets.cls_onehot,
                              weights.focal_alpha)
    cls_loss = ad.mul(ad.reduce_sum(ad.mul(focal,
                                           Var(targets.cls_mask[:, None]))),
                      norm)

    diff = ad.sub(box_deltas, Var(targets.reg_targets))
    reg_mat = ad.smooth_l1(diff, weights.smooth_l1_beta)
    reg_loss = ad.mul(ad.reduce_sum(ad.mul(reg_mat,
                                           Var(targets.pos_mask[:, None]))),
                      norm)

    probs = ad.softmax(dir_logits, axis=-1)
    onehot = np.zeros(dir_logits.value.shape)
    onehot[np.arange(len(targets.dir_targets)), targets.dir_targets] = 1.0
    ce = ad.neg(ad.reduce_sum(
        ad.mul(ad.mul(Var(onehot), ad.log(ad.add(probs, Var(np.asarray(1e-12))))),
               Var(targets.pos_mask[:, None]))))
    dir_loss = ad.mul(ce, norm)

    total = ad.add(ad.mul(Var(np.asarray(weights.cls)), cls_loss),
                   ad.add(ad.mul(Var(np.asarray(weights.reg)), reg_loss),
                          ad.mul(Var(np.asarray(weights.direction)), dir_loss)))
    if not np.isfinite(total.value):
        raise NumericError("loss went non-finite")
    return {"cls": cls_loss, "reg": reg_loss, "dir": dir_loss, "total": total}


# --------------------------------------------------------------- inference

@dataclass
class DetectionSet:
    boxes: list = field(default_factory=list)          # Box3D
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    class_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __len__(self):
        return len(self.boxes)


def rotated_nms(boxes7: np.ndarray, scores: np.ndarray, iou_thr: float,
                max_out: int) -> list:
    """Greedy suppression by descending score using rotated BEV IoU."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    for i in order:
        if len(keep) >= max_out:
            break
        ok = True
        for j in keep:
            if rotated_iou_bev(boxes7[i], boxes7[j]) > iou_thr:
                ok = False
                break
        if ok:
            keep.append(int(i))
    return keep


def decode_and_nms(cls_logits: np.ndarray, box_deltas: np.ndarray,
                   dir_logits: np.ndarray, anchors: AnchorGrid,
                   score_thr: float = 0.1, nms_iou: float = 0.1,
                   max_out: int = 100) -> DetectionSet:
    probs = 1.0 / (1.0 + np.exp(-cls_logits))
    cls = probs.argmax(axis=1)
    score = probs[np.arange(len(cls)), cls]
    keep = score >= score_thr
    if not keep.any():
        return DetectionSet()
    rows = np.nonzero(keep)[0]
    dir_cls = dir_logits[rows].argmax(axis=1)
    decoded = decode_boxes(box_deltas[rows], anchors.boxes[rows], dir_cls)
    score = score[rows]
    cls = cls[rows]

    out_boxes, out_scores, out_cls = [], [], []
    for c in np.unique(cls):
        sel = np.nonzero(cls == c)[0]
        kept = rotated_nms(decoded[sel], score[sel], nms_iou, max_out)
        for k in kept:
            r = sel[k]
            out_boxes.append(Box3D.from_array(decoded[r], class_id=int(c)))
            out_scores.append(score[r])
            out_cls.append(int(c))
    order = np.argsort(-np.asarray(out_scores), kind="stable")
    return DetectionSet(boxes=[out_boxes[i] for i in order],
                        scores=np.asarray(out_scores)[order],
                        class_ids=np.asarray(out_cls, dtype=np.int64)[order])
