"""Flat key-value configuration files with sections.

Grammar (documented in docs/config.md): `[section]` headers, `key = value`
pairs, `#` comments.  Values parse as bool, int, float, comma lists, or
strings.  Every training hyperparameter of the published setup appears
under its own key with the published default.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

from .model import ClassConfig, DetectorConfig, desk_config
from .preprocess import ConfigError, GridRange
from .scene.synth import ObjectClassSpec, SynthConfig
from .metrics import EvalConfig
from .trainer import TrainConfig


def parse_value(raw: str):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if "," in raw:
        return [parse_value(part) for part in raw.split(",") if part.strip()]
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def parse_config(text: str) -> dict:
    sections: dict = {}
    current = sections.setdefault("", {})
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = sections.setdefault(line[1:-1].strip(), {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, val = line.split("=", 1)
        current[key.strip()] = parse_value(val)
    return sections


def load_config(path) -> dict:
    return parse_config(Path(path).read_text())


def _as_list(v):
    if v is None:
        return []
    return v if isinstance(v, list) else [v]


DEFAULT_CLASS_SIZES = {
    "vehicle": (4.0, 2.0, 1.6),
    "crate": (2.0, 2.0, 1.2),
    "tent": (4.0, 4.0, 2.2),
    "box": (2.0, 2.0, 1.2),
    "kiosk": (2.5, 2.5, 2.0),
}


def synth_config_from(sections: dict) -> SynthConfig:
    s = sections.get("synth", {})
    names = [str(n) for n in _as_list(s.get("classes", ["vehicle", "crate"]))]
    counts = [int(c) for c in _as_list(s.get("class_counts", [3] * len(names)))]
    protos = [int(p) for p in _as_list(s.get("class_prototypes",
                                             list(range(2, 2 + len(names)))))]
    yaw_mode = str(s.get("yaw_mode", "axis"))
    classes = []
    for i, name in enumerate(names):
        size = DEFAULT_CLASS_SIZES.get(name, (3.0, 2.0, 1.5))
        classes.append(ObjectClassSpec(
            name=name, size=size, count=counts[i % len(counts)],
            prototype=protos[i % len(protos)], yaw_mode=yaw_mode))
    return SynthConfig(
        extent=float(s.get("extent", 25.6)),
        num_bands=int(s.get("num_bands", 12)),
        classes=classes,
        ground_density=float(s.get("ground_density", 3.0)),
        object_density=float(s.get("object_density", 20.0)),
        side_density=float(s.get("side_density", 5.0)),
        canopy_count=int(s.get("canopy_count", 2)),
        canopy_density=float(s.get("canopy_density", 8.0)),
        fake_ratio=float(s.get("fake_ratio", 0.0)),
        noise_sigma=float(s.get("noise_sigma", 0.01)),
        registration_offset=float(s.get("registration_offset", 0.4)),
    )


def detector_config_from(sections: dict) -> DetectorConfig:
    m = sections.get("model", {})
    base = desk_config(num_classes=len(_as_list(m.get("classes",
                                                      ["vehicle", "crate"]))))
    grid = base.grid
    if "range" in m:
        r = [float(v) for v in _as_list(m["range"])]
        grid = GridRange(r[0], r[1], r[2], r[3], r[4], r[5],
                         float(m.get("cell_xy", grid.cell_xy)),
                         float(m.get("cell_z", grid.cell_z)))
    elif "cell_xy" in m or "cell_z" in m:
        grid = GridRange(grid.x_min, grid.x_max, grid.y_min, grid.y_max,
                         grid.z_min, grid.z_max,
                         float(m.get("cell_xy", grid.cell_xy)),
                         float(m.get("cell_z", grid.cell_z)))
    names = [str(n) for n in _as_list(m.get("classes", ["vehicle", "crate"]))]
    classes = []
    for name in names:
        size = DEFAULT_CLASS_SIZES.get(name, (3.0, 2.0, 1.5))
        classes.append(ClassConfig(name=name, anchor_size=size,
                                   anchor_z=size[2] / 2,
                                   pos_iou=float(m.get("pos_iou", 0.5)),
                                   neg_iou=float(m.get("neg_iou", 0.35)),
                                   eval_iou=float(m.get("eval_iou", 0.5))))
    channels = tuple(int(c) for c in _as_list(m.get("channels",
                                                    list(base.channels))))
    return replace(
        base, grid=grid, classes=classes, channels=channels,
        num_bands=int(m.get("num_bands", 12)),
        pca_components=int(m.get("pca_components", 6)),
        max_points_per_pillar=int(m.get("max_points_per_pillar", 32)),
        attention_patch=int(m.get("attention_patch", 3)),
        attention_heads=int(m.get("attention_heads", 4)),
        focal_tau=float(m.get("focal_tau", 0.5)),
        head_mid_channels=int(m.get("head_mid_channels",
                                    base.head_mid_channels)),
        score_threshold=float(m.get("score_threshold", 0.1)),
        nms_iou=float(m.get("nms_iou", 0.1)),
        seed=int(m.get("seed", 0)),
        use_pillar_branch=bool(m.get("pillar_branch", True)),
        use_sff=bool(m.get("sff", True)),
        use_patchwise=bool(m.get("patchwise_fusion", True)),
        use_multiscale=bool(m.get("multiscale", True)),
        use_weighted_compression=bool(m.get("weighted_compression", True)),
        use_concat_compression=bool(m.get("concat_compression", False)),
    )


def train_config_from(sections: dict) -> TrainConfig:
    t = sections.get("train", {})
    clip = t.get("grad_clip", 10.0)
    return TrainConfig(
        lr=float(t.get("lr", 0.005)),
        weight_decay=float(t.get("weight_decay", 0.01)),
        onecycle_peak=float(t.get("onecycle_peak", 0.05)),
        momentum_range=tuple(float(v) for v in
                             _as_list(t.get("momentum_range", [0.85, 0.95]))),
        epochs=int(t.get("epochs", 30)),
        batch_size=int(t.get("batch_size", 2)),
        seed=int(t.get("seed", 0)),
        steps=int(t["steps"]) if "steps" in t else None,
        deterministic=bool(t.get("deterministic", True)),
        initial_div=float(t.get("initial_div", 10.0)),
        final_div=float(t.get("final_div", 1000.0)),
        grad_clip=None if clip in ("", "none", None) else float(clip),
    )


def eval_config_from(sections: dict, class_names=None) -> EvalConfig:
    e = sections.get("eval", {})
    names = class_names or [str(n) for n in
                            _as_list(e.get("classes", ["vehicle", "crate"]))]
    thr = [float(v) for v in _as_list(e.get("iou_thresholds",
                                            [0.5] * len(names)))]
    relaxed = [bool(v) for v in _as_list(e.get("relaxed_aos",
                                               [False] * len(names)))]
    return EvalConfig(
        class_names=names,
        iou_thresholds={n: thr[i % len(thr)] for i, n in enumerate(names)},
        relaxed_aos={n: relaxed[i % len(relaxed)] for i, n in enumerate(names)},
        recall_points=int(e.get("recall_points", 40)),
        difficulty_thresholds=tuple(
            int(v) for v in _as_list(e.get("difficulty_thresholds", [100, 40]))),
        occlusion_edges=tuple(
            float(v) for v in _as_list(e.get("occlusion_edges", [0.0, 0.5]))),
    )
