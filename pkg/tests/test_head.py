import numpy as np
import pytest

from pivdet.autodiff import ParamStore, Var, grad_check
from pivdet.head import (AnchorGrid, DetectionSet, LossWeights, NumericError,
                         assign_targets, build_anchors, decode_and_nms,
                         decode_boxes, direction_target, encode_boxes,
                         head_forward, init_head, rotated_nms, rpn_losses)
from pivdet.metrics import rotated_iou_bev
from pivdet.scene import Box3D, normalize_yaw


def small_anchors():
    return build_anchors((4, 4), x_min=0.0, y_min=0.0, cell=2.0,
                         class_sizes=[(3.0, 1.5, 1.2), (1.0, 1.0, 1.0)],
                         class_z=[0.6, 0.5])


def test_anchor_count_invariant():
    anchors = small_anchors()
    assert anchors.num_anchors == 4 * 4 * 2 * 2


# -------------------------------------------------------------------- codec

def test_encode_decode_roundtrip_random():
    rng = np.random.default_rng(0)
    anchors = np.column_stack([
        rng.uniform(-10, 10, 50), rng.uniform(-10, 10, 50),
        rng.uniform(0, 2, 50), rng.uniform(1, 4, 50),
        rng.uniform(1, 4, 50), rng.uniform(1, 3, 50),
        rng.choice([0.0, np.pi / 2], 50)])
    delta_yaw = rng.uniform(-np.pi / 4 + 1e-3, np.pi / 4 - 1e-3, 50)
    gt = anchors.copy()
    gt[:, :3] += rng.uniform(-1, 1, (50, 3))
    gt[:, 3:6] *= rng.uniform(0.8, 1.25, (50, 3))
    gt[:, 6] = anchors[:, 6] + delta_yaw
    enc = encode_boxes(gt, anchors)
    dec = decode_boxes(enc, anchors, direction_target(gt[:, 6]))
    gt_norm = gt.copy()
    gt_norm[:, 6] = normalize_yaw(gt[:, 6])
    assert np.abs(dec - gt_norm).max() <= 1e-5


def test_direction_target_convention():
    assert direction_target(0.1) == 1
    assert direction_target(np.pi - 0.01) == 1
    assert direction_target(-0.1) == 0
    assert direction_target(-np.pi) == 0


# -------------------------------------------------------------- assignment

def test_anchor_identical_to_label_positive_zero_residual():
    anchors = small_anchors()
    label = Box3D.from_array(anchors.boxes[37], class_id=int(anchors.class_ids[37]))
    t = assign_targets(anchors, [label], pos_thr=[0.6, 0.5],
                       neg_thr=[0.45, 0.35])
    assert t.pos_mask[37] == 1.0
    assert np.allclose(t.reg_targets[37], 0.0, atol=1e-9)
    assert t.cls_onehot[37, anchors.class_ids[37]] == 1.0


def test_no_labels_all_negative():
    anchors = small_anchors()
    t = assign_targets(anchors, [])
    assert t.num_pos == 0
    assert np.all(t.cls_mask == 1.0)
    assert np.all(t.cls_onehot == 0.0)


def assign_targets_bruteforce(anchors, labels, pos_thr, neg_thr):
    n = anchors.num_anchors
    best_iou = np.zeros(n)
    best_gt = np.full(n, -1)
    real = [b for b in labels if not b.is_fake]
    for ai in range(n):
        for gi, g in enumerate(real):
            if g.class_id != anchors.class_ids[ai]:
                continue
            iou = rotated_iou_bev(anchors.boxes[ai], g.as_array())
            if iou > best_iou[ai]:
                best_iou[ai] = iou
                best_gt[ai] = gi
    positive = np.array([best_iou[a] >= pos_thr[anchors.class_ids[a]] and
                         best_gt[a] >= 0 for a in range(n)])
    for gi, g in enumerate(real):
        cand = [(rotated_iou_bev(anchors.boxes[a], g.as_array()), a)
                for a in range(n) if anchors.class_ids[a] == g.class_id]
        best = max(cand, key=lambda t: t[0])
        if best[0] > 0 or True:
            positive[best[1]] = True
            best_gt[best[1]] = gi
    ignored = ~positive & np.array(
        [best_iou[a] > neg_thr[anchors.class_ids[a]] for a in range(n)])
    return positive, ignored, best_gt


def test_assignment_matches_bruteforce():
    rng = np.random.default_rng(1)
    anchors = small_anchors()
    pos_thr, neg_thr = [0.6, 0.5], [0.45, 0.35]
    for _ in range(5):
        labels = [Box3D(rng.uniform(1, 7), rng.uniform(1, 7), 0.6,
                        *np.array([3.0, 1.5, 1.2]) * rng.uniform(0.9, 1.1),
                        rng.uniform(-0.3, 0.3), class_id=int(rng.integers(0, 2)))
                  for _ in range(3)]
        t = assign_targets(anchors, labels, pos_thr, neg_thr)
        pos_ref, ign_ref, _ = assign_targets_bruteforce(anchors, labels,
                                                        pos_thr, neg_thr)
        assert np.array_equal(t.pos_mask.astype(bool), pos_ref)
        assert np.array_equal(t.cls_mask == 0.0, ign_ref)


def test_fake_labels_are_not_targets():
    anchors = small_anchors()
    fake = Box3D.from_array(anchors.boxes[10],
                            class_id=int(anchors.class_ids[10]), is_fake=True)
    t = assign_targets(anchors, [fake])
    assert t.num_pos == 0


# ------------------------------------------------------------------ losses

def zeroed_assignment(n, num_cls):
    from pivdet.head import TargetAssignment
    return TargetAssignment(cls_onehot=np.zeros((n, num_cls)),
                            cls_mask=np.ones(n), pos_mask=np.zeros(n),
                            reg_targets=np.zeros((n, 7)),
                            dir_targets=np.zeros(n, dtype=np.int64),
                            num_pos=0)


def test_focal_loss_scalar_worked_example():
    # p = 0.5 on a single positive anchor: 0.25 * 0.25 * ln 2
    t = zeroed_assignment(1, 1)
    t.cls_onehot[0, 0] = 1.0
    t.pos_mask[0] = 1.0
    t.num_pos = 1
    losses = rpn_losses(Var(np.zeros((1, 1))), Var(np.zeros((1, 7))),
                        Var(np.zeros((1, 2))), t)
    expected = 0.25 * 0.25 * np.log(2.0)
    assert abs(losses["cls"].value - expected) <= 1e-9


def test_perfect_predictions_near_zero_loss():
    anchors = small_anchors()
    label = Box3D.from_array(anchors.boxes[5], class_id=int(anchors.class_ids[5]))
    t = assign_targets(anchors, [label], [0.6, 0.5], [0.45, 0.35])
    n = anchors.num_anchors
    logits = np.where(t.cls_onehot > 0, 12.0, -12.0)
    dirs = np.full((n, 2), -12.0)
    dirs[np.arange(n), t.dir_targets] = 12.0
    losses = rpn_losses(Var(logits), Var(t.reg_targets.copy()), Var(dirs), t)
    assert losses["reg"].value == 0.0
    assert losses["cls"].value <= 1e-3
    assert losses["dir"].value <= 1e-3
    assert losses["total"].value >= 0.0


def test_loss_total_composition_and_nan_rejection():
    t = zeroed_assignment(4, 2)
    rng = np.random.default_rng(2)
    cls = Var(rng.standard_normal((4, 2)))
    box = Var(rng.standard_normal((4, 7)))
    d = Var(rng.standard_normal((4, 2)))
    losses = rpn_losses(cls, box, d, t)
    expected = losses["cls"].value + 2 * losses["reg"].value + \
        0.2 * losses["dir"].value
    assert abs(losses["total"].value - expected) <= 1e-12
    with pytest.raises(NumericError):
        rpn_losses(Var(np.array([[np.nan]])), Var(np.zeros((1, 7))),
                   Var(np.zeros((1, 2))), zeroed_assignment(1, 1))


def test_loss_grad_check():
    rng = np.random.default_rng(3)
    n, num_cls = 6, 2
    t = zeroed_assignment(n, num_cls)
    t.cls_onehot[1, 0] = 1.0
    t.cls_onehot[4, 1] = 1.0
    t.pos_mask[[1, 4]] = 1.0
    t.dir_targets[[1, 4]] = [0, 1]
    t.reg_targets = rng.standard_normal((n, 7)) * 0.2
    t.cls_mask[2] = 0.0
    t.num_pos = 2

    def closure(v):
        return rpn_losses(v["cls"], v["box"], v["dir"], t)["total"]

    inputs = {"cls": rng.standard_normal((n, num_cls)),
              "box": rng.standard_normal((n, 7)),
              "dir": rng.standard_normal((n, 2))}
    report = grad_check(closure, inputs)
    assert report["max_rel_err"] <= 1e-4


# ------------------------------------------------------------ head network

def test_head_zero_weights_gives_half_scores():
    store = ParamStore()
    rng = np.random.default_rng(4)
    init_head(store, rng, in_channels=4, mid_channels=8, num_classes=2)
    for name in store.names():
        if name.startswith("head.cls") or name.startswith("head.box") or \
                name.startswith("head.dir"):
            store.set(name, np.zeros_like(store.get(name)))
    leaves = store.leaves(np.float64)
    fbev = Var(rng.standard_normal((4, 4, 4)))
    cls, box, d = head_forward(leaves, fbev, num_classes=2)
    assert np.allclose(cls.value, 0.0)
    assert np.allclose(1 / (1 + np.exp(-cls.value)), 0.5)
    assert cls.value.shape == (4 * 4 * 4, 2)
    assert box.value.shape == (4 * 4 * 4, 7)
    assert d.value.shape == (4 * 4 * 4, 2)


def test_head_output_shapes_structural():
    store = ParamStore()
    rng = np.random.default_rng(5)
    init_head(store, rng, in_channels=6, mid_channels=8, num_classes=3)
    leaves = store.leaves(np.float64)
    fbev = Var(rng.standard_normal((2, 2, 6)))
    cls, box, d = head_forward(leaves, fbev, num_classes=3)
    a = 2 * 2 * 3 * 2
    assert cls.value.shape == (a, 3)
    assert box.value.shape == (a, 7)
    assert d.value.shape == (a, 2)


def test_head_grad_check():
    store = ParamStore()
    rng = np.random.default_rng(6)
    init_head(store, rng, in_channels=2, mid_channels=3, num_classes=1)
    inputs = {n: store.get(n).astype(np.float64) for n in store.names()}
    inputs["fbev"] = rng.standard_normal((2, 2, 2))

    def closure(v):
        leaves = {k: vv for k, vv in v.items() if k != "fbev"}
        cls, box, d = head_forward(leaves, v["fbev"], num_classes=1)
        import pivdet.autodiff as ad
        return ad.concat([cls, box, d], axis=1)

    report = grad_check(closure, inputs, max_entries=6)
    assert report["max_rel_err"] <= 1e-4


# --------------------------------------------------------------------- NMS

def test_nms_duplicate_suppression():
    boxes = np.array([[0, 0, 0.5, 2, 1, 1, 0.0]] * 2, dtype=np.float64)
    keep = rotated_nms(boxes, np.array([0.9, 0.8]), iou_thr=0.5, max_out=10)
    assert keep == [0]


def test_nms_disjoint_kept():
    boxes = np.array([[0, 0, 0.5, 2, 1, 1, 0.0],
                      [10, 10, 0.5, 2, 1, 1, 0.3]])
    keep = rotated_nms(boxes, np.array([0.7, 0.9]), iou_thr=0.5, max_out=10)
    assert sorted(keep) == [0, 1]


def nms_bruteforce(boxes, scores, thr):
    order = np.argsort(-scores)
    kept = []
    for i in order:
        if all(rotated_iou_bev(boxes[i], boxes[j]) <= thr for j in kept):
            kept.append(int(i))
    return kept


def test_nms_matches_bruteforce_random():
    rng = np.random.default_rng(7)
    for _ in range(20):
        n = rng.integers(2, 15)
        boxes = np.column_stack([rng.uniform(0, 10, n), rng.uniform(0, 10, n),
                                 np.full(n, 0.5), rng.uniform(1, 3, n),
                                 rng.uniform(1, 3, n), np.ones(n),
                                 rng.uniform(-np.pi, np.pi, n)])
        scores = rng.uniform(0.1, 1.0, n)
        assert rotated_nms(boxes, scores, 0.3, 100) == \
            nms_bruteforce(boxes, scores, 0.3)


def test_nms_order_independent_distinct_scores():
    rng = np.random.default_rng(8)
    n = 10
    boxes = np.column_stack([rng.uniform(0, 6, n), rng.uniform(0, 6, n),
                             np.full(n, 0.5), rng.uniform(1, 3, n),
                             rng.uniform(1, 3, n), np.ones(n),
                             rng.uniform(-np.pi, np.pi, n)])
    scores = rng.permutation(np.linspace(0.1, 0.9, n))
    base = {tuple(boxes[i]) for i in rotated_nms(boxes, scores, 0.3, 100)}
    perm = rng.permutation(n)
    other = {tuple(boxes[perm][i])
             for i in rotated_nms(boxes[perm], scores[perm], 0.3, 100)}
    assert base == other


def test_decode_and_nms_end_to_end():
    anchors = small_anchors()
    n = anchors.num_anchors
    cls_logits = np.full((n, 2), -8.0)
    box_deltas = np.zeros((n, 7))
    dir_logits = np.zeros((n, 2))
    dir_logits[:, 1] = 5.0
    cls_logits[3, 0] = 6.0    # one confident detection
    dets = decode_and_nms(cls_logits, box_deltas, dir_logits, anchors)
    assert len(dets) == 1
    assert dets.class_ids[0] == 0
    assert np.allclose(dets.boxes[0].as_array()[:6], anchors.boxes[3][:6])
    empty = decode_and_nms(np.full((n, 2), -9.0), box_deltas, dir_logits,
                           anchors)
    assert len(empty) == 0
