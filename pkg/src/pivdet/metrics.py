"""Evaluation protocol: rotated IoU, AP with 40 recall points, orientation
similarity, difficulty and occlusion binning, and report assembly.

Matching follows the KITTI convention: detections are greedily matched in
descending score order, one-to-one, within each scene; precision/recall
curves are pooled globally across scenes.  Ground truths excluded from the
current slice (harder difficulty, other occlusion level) are "ignored":
detections matched to them count neither as hits nor as false positives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene.types import Box3D, normalize_yaw


# ------------------------------------------------------------ box geometry

def _box7(b) -> np.ndarray:
    if isinstance(b, Box3D):
        return b.as_array()
    return np.asarray(b, dtype=np.float64)


def _corners_bev(b7: np.ndarray) -> np.ndarray:
    cx, cy, _, dx, dy, _, yaw = b7
    c, s = np.cos(yaw), np.sin(yaw)
    local = np.array([[dx, dy], [-dx, dy], [-dx, -dy], [dx, -dy]]) * 0.5
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + (cx, cy)


def _polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip_polygon(subject, edge_a, edge_b):
    """Keep the part of `subject` left of the directed line edge_a->edge_b."""
    ex, ey = edge_b[0] - edge_a[0], edge_b[1] - edge_a[1]

    def inside(p):
        return ex * (p[1] - edge_a[1]) - ey * (p[0] - edge_a[0]) >= 0

    def intersect(p, q):
        dx, dy = q[0] - p[0], q[1] - p[1]
        denom = ex * dy - ey * dx
        t = (ex * (edge_a[1] - p[1]) - ey * (edge_a[0] - p[0])) / denom
        return (p[0] + t * dx, p[1] + t * dy)

    out = []
    n = len(subject)
    for i in range(n):
        cur, prev = subject[i], subject[i - 1]
        cur_in, prev_in = inside(cur), inside(prev)
        if cur_in:
            if not prev_in:
                out.append(intersect(prev, cur))
            out.append(tuple(cur))
        elif prev_in:
            out.append(intersect(prev, cur))
    return out


def intersection_area_bev(a7: np.ndarray, b7: np.ndarray) -> float:
    """Convex polygon intersection of the two BEV rectangles."""
    poly = [tuple(p) for p in _corners_bev(a7)]
    clip = _corners_bev(b7)
    for i in range(4):
        poly = _clip_polygon(poly, clip[i], clip[(i + 1) % 4])
        if not poly:
            return 0.0
    return _polygon_area(poly)


def rotated_iou_bev(a, b) -> float:
    a7, b7 = _box7(a), _box7(b)
    area_a = a7[3] * a7[4]
    area_b = b7[3] * b7[4]
    if area_a <= 0 or area_b <= 0:
        return 0.0
    inter = intersection_area_bev(a7, b7)
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def iou_3d(a, b) -> float:
    a7, b7 = _box7(a), _box7(b)
    vol_a = a7[3] * a7[4] * a7[5]
    vol_b = b7[3] * b7[4] * b7[5]
    if vol_a <= 0 or vol_b <= 0:
        return 0.0
    zi = min(a7[2] + a7[5] / 2, b7[2] + b7[5] / 2) - \
        max(a7[2] - a7[5] / 2, b7[2] - b7[5] / 2)
    if zi <= 0:
        return 0.0
    inter = intersection_area_bev(a7, b7) * zi
    union = vol_a + vol_b - inter
    return inter / union if union > 0 else 0.0


# -------------------------------------------------------- matching and AP

def orientation_similarity(delta_theta: float, relaxed: bool) -> float:
    mult = 4.0 if relaxed else 1.0
    return (1.0 + np.cos(mult * delta_theta)) / 2.0


@dataclass
class MatchResult:
    """Pooled per-detection match outcomes for one (class, slice) sweep."""

    scores: np.ndarray        # descending
    is_tp: np.ndarray         # bool
    is_ignored: np.ndarray    # matched an out-of-slice gt
    similarity: np.ndarray    # orientation similarity of TPs, else 0
    num_gt: int               # counted ground truths


def match_scene(det_boxes, det_scores, gt_boxes, gt_ignored, iou_fn, thr):
    """Greedy one-to-one matching by descending score inside one scene.

    Each detection takes the highest-IoU unmatched gt with IoU >= thr
    (ties broken toward the lower gt index).  Returns per-detection
    (score, tp, ignored_match, delta_theta) rows in descending score order.
    """
    order = np.argsort(-np.asarray(det_scores), kind="stable")
    taken = np.zeros(len(gt_boxes), dtype=bool)
    rows = []
    for di in order:
        best_iou, best_j = -1.0, -1
        for j, g in enumerate(gt_boxes):
            if taken[j]:
                continue
            iou = iou_fn(det_boxes[di], g)
            if iou >= thr and iou > best_iou:
                best_iou, best_j = iou, j
        if best_j < 0:
            rows.append((det_scores[di], False, False, 0.0))
            continue
        taken[best_j] = True
        d_theta = float(normalize_yaw(_box7(gt_boxes[best_j])[6] -
                                      _box7(det_boxes[di])[6]))
        if gt_ignored[best_j]:
            rows.append((det_scores[di], False, True, d_theta))
        else:
            rows.append((det_scores[di], True, False, d_theta))
    return rows


def _pool(rows_per_scene, num_gt, relaxed):
    scores, tp, ign, sim = [], [], [], []
    for rows in rows_per_scene:
        for score, is_tp, is_ign, d_theta in rows:
            scores.append(score)
            tp.append(is_tp)
            ign.append(is_ign)
            sim.append(orientation_similarity(d_theta, relaxed) if is_tp else 0.0)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    return MatchResult(scores=scores[order],
                       is_tp=np.asarray(tp, dtype=bool)[order],
                       is_ignored=np.asarray(ign, dtype=bool)[order],
                       similarity=np.asarray(sim, dtype=np.float64)[order],
                       num_gt=num_gt)


def _sweep(match: MatchResult, n_points: int):
    """(recall, precision, orientation) points after each counted detection."""
    recalls, precisions, orientations = [], [], []
    tp = fp = 0
    sim_sum = 0.0
    for i in range(len(match.scores)):
        if match.is_ignored[i]:
            continue
        if match.is_tp[i]:
            tp += 1
            sim_sum += match.similarity[i]
        else:
            fp += 1
        recalls.append(tp / match.num_gt)
        precisions.append(tp / (tp + fp))
        orientations.append(sim_sum / (tp + fp))
    return (np.asarray(recalls), np.asarray(precisions),
            np.asarray(orientations))


def _interp_mean(recalls, values, n_points: int) -> float:
    total = 0.0
    for i in range(1, n_points + 1):
        r = i / n_points
        mask = recalls >= r - 1e-12
        total += values[mask].max() if mask.any() else 0.0
    return total / n_points


def average_precision_from_match(match: MatchResult, n_points: int = 40):
    if match.num_gt == 0:
        return None
    recalls, precisions, _ = _sweep(match, n_points)
    if len(recalls) == 0:
        return 0.0
    return _interp_mean(recalls, precisions, n_points)


def aos_from_match(match: MatchResult, n_points: int = 40):
    if match.num_gt == 0:
        return None
    recalls, _, orientations = _sweep(match, n_points)
    if len(recalls) == 0:
        return 0.0
    return _interp_mean(recalls, orientations, n_points)


def average_precision(det_boxes, det_scores, gt_boxes, iou_fn, thr,
                      n_points: int = 40):
    """Single-class AP over one pooled scene list (no ignores)."""
    rows = match_scene(det_boxes, det_scores, gt_boxes,
                       np.zeros(len(gt_boxes), dtype=bool), iou_fn, thr)
    match = _pool([rows], len(gt_boxes), relaxed=False)
    return average_precision_from_match(match, n_points)


def aos(det_boxes, det_scores, gt_boxes, iou_fn, thr, relaxed: bool = False,
        n_points: int = 40):
    rows = match_scene(det_boxes, det_scores, gt_boxes,
                       np.zeros(len(gt_boxes), dtype=bool), iou_fn, thr)
    match = _pool([rows], len(gt_boxes), relaxed=relaxed)
    return aos_from_match(match, n_points)


# --------------------------------------------------- difficulty / occlusion

def count_points_in_box(points: np.ndarray, box: Box3D) -> int:
    b = box.as_array()
    c, s = np.cos(b[6]), np.sin(b[6])
    px = points[:, 0] - b[0]
    py = points[:, 1] - b[1]
    lx = c * px + s * py
    ly = -s * px + c * py
    inside = ((np.abs(lx) <= b[3] / 2) & (np.abs(ly) <= b[4] / 2) &
              (np.abs(points[:, 2] - b[2]) <= b[5] / 2))
    return int(inside.sum())


def bin_difficulty(point_count: int, thresholds=(100, 40)) -> int:
    """0 easy for >= thresholds[0] points, 1 moderate for >= thresholds[1],
    else 2 hard."""
    if point_count >= thresholds[0]:
        return 0
    if point_count >= thresholds[1]:
        return 1
    return 2


def occlusion_score(points: np.ndarray, box: Box3D, dilation: float = 0.5,
                    height_margin: float = 0.5, cell: float = 0.25) -> float:
    """Fraction of the dilated BEV footprint covered by points above the box
    top plus a margin (the canopy-range score)."""
    b = box.as_array()
    c, s = np.cos(b[6]), np.sin(b[6])
    hx = b[3] / 2 + dilation
    hy = b[4] / 2 + dilation
    z_top = b[2] + b[5] / 2 + height_margin
    above = points[points[:, 2] > z_top]
    nx = max(1, int(np.ceil(2 * hx / cell)))
    ny = max(1, int(np.ceil(2 * hy / cell)))
    if len(above) == 0:
        return 0.0
    px = above[:, 0] - b[0]
    py = above[:, 1] - b[1]
    lx = c * px + s * py
    ly = -s * px + c * py
    in_fp = (np.abs(lx) <= hx) & (np.abs(ly) <= hy)
    if not in_fp.any():
        return 0.0
    gx = np.clip(((lx[in_fp] + hx) / (2 * hx) * nx).astype(int), 0, nx - 1)
    gy = np.clip(((ly[in_fp] + hy) / (2 * hy) * ny).astype(int), 0, ny - 1)
    covered = len(set(zip(gx.tolist(), gy.tolist())))
    return covered / (nx * ny)


def bin_occlusion(score: float, edges=(0.0, 0.5)) -> int:
    """0 occlusion-free (score == lower edge), then bins at the upper edges."""
    if score <= edges[0]:
        return 0
    if score <= edges[1]:
        return 1
    return 2


# ------------------------------------------------------------------ report

@dataclass
class EvalConfig:
    class_names: list = field(default_factory=lambda: ["vehicle"])
    iou_thresholds: dict = field(default_factory=lambda: {"vehicle": 0.7})
    relaxed_aos: dict = field(default_factory=dict)   # class -> bool
    recall_points: int = 40
    difficulty_thresholds: tuple = (100, 40)
    occlusion_edges: tuple = (0.0, 0.5)

    def threshold(self, name: str) -> float:
        return self.iou_thresholds.get(name, 0.5)

    def relaxed(self, name: str) -> bool:
        return bool(self.relaxed_aos.get(name, False))


DIFFICULTY_NAMES = ["easy", "moderate", "hard"]
OCCLUSION_NAMES = ["free", "part", "high"]


@dataclass
class EvalReport:
    rows: list                        # dicts: class, difficulty, occlusion, metric, value

    def value(self, cls, difficulty, occlusion, metric):
        for r in self.rows:
            if (r["class"], r["difficulty"], r["occlusion"], r["metric"]) == \
                    (cls, difficulty, occlusion, metric):
                return r["value"]
        return None

    def to_csv(self) -> str:
        lines = ["class,difficulty,occlusion,metric,value"]
        for r in self.rows:
            val = "" if r["value"] is None else f"{r['value']:.6f}"
            lines.append(f"{r['class']},{r['difficulty']},{r['occlusion']},"
                         f"{r['metric']},{val}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        width = max((len(r["class"]) for r in self.rows), default=8) + 2
        lines = [f"{'class':<{width}}{'difficulty':<12}{'occlusion':<11}"
                 f"{'metric':<8}{'value':>8}"]
        for r in self.rows:
            val = "  n/a" if r["value"] is None else f"{r['value']:8.4f}"
            lines.append(f"{r['class']:<{width}}{r['difficulty']:<12}"
                         f"{r['occlusion']:<11}{r['metric']:<8}{val}")
        return "\n".join(lines)


def evaluate(dets_per_scene, gts_per_scene, config: EvalConfig,
             gt_aux=None) -> EvalReport:
    """Full protocol: per class x difficulty x {AP_BEV, AP_3D, AOS} plus
    occlusion slices and mAP rows.

    dets_per_scene: per scene an object with .boxes, .scores, .class_ids.
    gts_per_scene: per scene a list of Box3D (real objects only).
    gt_aux: optional per-scene dicts with "difficulty" and "occlusion"
    integer arrays; when absent every gt lands in difficulty 0/occlusion 0.
    """
    num_scenes = len(gts_per_scene)
    if gt_aux is None:
        gt_aux = [{"difficulty": np.zeros(len(g), dtype=int),
                   "occlusion": np.zeros(len(g), dtype=int)}
                  for g in gts_per_scene]

    rows = []
    map_acc: dict = {}

    for ci, cname in enumerate(config.class_names):
        thr = config.threshold(cname)
        relaxed = config.relaxed(cname)

        def slice_metrics(include_fn):
            """AP/AOS for the gts selected by include_fn(difficulty, occlusion)."""
            per_metric = {}
            for metric, iou_fn in (("AP_BEV", rotated_iou_bev),
                                   ("AP_3D", iou_3d)):
                rows_scenes = []
                num_gt = 0
                for si in range(num_scenes):
                    gt_items = [(g, gt_aux[si]["difficulty"][j],
                                 gt_aux[si]["occlusion"][j])
                                for j, g in enumerate(gts_per_scene[si])
                                if g.class_id == ci]
                    gt_boxes = [g for g, _, _ in gt_items]
                    ignored = np.array([not include_fn(d, o)
                                        for _, d, o in gt_items], dtype=bool)
                    num_gt += int((~ignored).sum()) if len(gt_items) else 0
                    det = dets_per_scene[si]
                    sel = [k for k in range(len(det.boxes))
                           if det.class_ids[k] == ci]
                    rows_scenes.append(match_scene(
                        [det.boxes[k] for k in sel],
                        [det.scores[k] for k in sel],
                        gt_boxes, ignored, iou_fn, thr))
                match = _pool(rows_scenes, num_gt, relaxed)
                per_metric[metric] = average_precision_from_match(
                    match, config.recall_points)
                if metric == "AP_BEV":
                    per_metric["AOS"] = aos_from_match(match,
                                                       config.recall_points)
            return per_metric

        for level, dname in enumerate(DIFFICULTY_NAMES):
            vals = slice_metrics(lambda d, o, L=level: d <= L)
            for metric in ("AP_BEV", "AP_3D", "AOS"):
                rows.append({"class": cname, "difficulty": dname,
                             "occlusion": "all", "metric": metric,
                             "value": vals[metric]})
                map_acc.setdefault((dname, metric), []).append(vals[metric])

        for occ, oname in enumerate(OCCLUSION_NAMES):
            vals = slice_metrics(lambda d, o, O=occ: o == O)
            for metric in ("AP_BEV", "AP_3D", "AOS"):
                rows.append({"class": cname, "difficulty": "all",
                             "occlusion": oname, "metric": metric,
                             "value": vals[metric]})

    for (dname, metric), vals in map_acc.items():
        present = [v for v in vals if v is not None]
        rows.append({"class": "mAP", "difficulty": dname, "occlusion": "all",
                     "metric": metric,
                     "value": (sum(present) / len(present)) if present else None})
    return EvalReport(rows=rows)
