"""Command-line entry point wiring all modules into file-to-file pipelines.

Subcommands: synth, pca, tile, train, infer, eval, gradcheck, plot.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every command writes a run manifest (command, config, seed, input/output
hashes) next to its outputs.  `PIV_LOG` selects the log level.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("pivdet")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5)
        return out.stdout.strip() or "unknown"
    except Exception:
        return "unknown"


def write_manifest(out_dir: Path, command: str, config_path, seed,
                   inputs, outputs) -> None:
    manifest = {
        "command": command,
        "config": str(config_path) if config_path else None,
        "seed": seed,
        "git": _git_describe(),
        "inputs": {str(p): _sha256(Path(p)) for p in inputs if Path(p).is_file()},
        "outputs": {str(p): _sha256(Path(p)) for p in outputs
                    if Path(p).is_file()},
    }
    path = out_dir / "manifest.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def _load_sections(args):
    from .config import load_config
    if getattr(args, "config", None):
        return load_config(args.config)
    return {}


def _scene_files(path) -> list:
    p = Path(path)
    if p.is_dir():
        return sorted(p.glob("*.hpcs"))
    if p.is_file():
        return [p]
    raise FileNotFoundError(f"no scene input at {path}")


# ------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    from .config import synth_config_from
    from .scene import synth_scene, write_scene

    sections = _load_sections(args)
    cfg = synth_config_from(sections)
    count = args.count or int(sections.get("synth", {}).get("num_scenes", 8))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for i in range(count):
        scene = synth_scene(cfg, args.seed + i)
        path = out / f"scene_{i:04d}.hpcs"
        write_scene(scene, path)
        outputs.append(path)
    log.info("wrote %d scenes to %s", count, out)
    write_manifest(out, "synth", args.config, args.seed, [], outputs)
    return EXIT_OK


def cmd_pca(args) -> int:
    from .model import fit_pca_on_scenes
    from .scene import read_scene
    from .trainer import save_pca

    files = _scene_files(args.input)
    scenes = [read_scene(f) for f in files]
    pca = fit_pca_on_scenes(scenes, args.components, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_pca(pca, out)
    log.info("fit %d-component reduction on %d scenes", args.components,
             len(scenes))
    write_manifest(out.parent, "pca", args.config, args.seed, files, [out])
    return EXIT_OK


def cmd_tile(args) -> int:
    from .scene import read_scene, tile_scene, write_scene

    files = _scene_files(args.input)
    rotations = [float(r) for r in args.rotations.split(",")] if args.rotations \
        else [0.0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    n = 0
    for f in files:
        scene = read_scene(f)
        for tile in tile_scene(scene, args.window, args.step, rotations):
            path = out / f"{f.stem}_tile_{n:04d}.hpcs"
            write_scene(tile, path)
            outputs.append(path)
            n += 1
    log.info("wrote %d tiles", n)
    write_manifest(out, "tile", args.config, args.seed, files, outputs)
    return EXIT_OK


def cmd_train(args) -> int:
    from .config import detector_config_from, train_config_from
    from .model import Detector, fit_pca_on_scenes
    from .scene import read_scene
    from .trainer import train

    sections = _load_sections(args)
    det_cfg = detector_config_from(sections)
    if args.seed is not None:
        from dataclasses import replace
        det_cfg = replace(det_cfg, seed=args.seed)
    train_cfg = train_config_from(sections)
    if args.seed is not None:
        train_cfg.seed = args.seed

    files = _scene_files(args.data)
    scenes = [read_scene(f) for f in files]
    pca = fit_pca_on_scenes(scenes, det_cfg.pca_components, seed=train_cfg.seed)
    detector = Detector(det_cfg)
    samples = [detector.preprocess_scene(s, pca, name=f.stem)
               for s, f in zip(scenes, files)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.ntar"
    log_path = out / "train_log.csv"
    result = train(detector, samples, train_cfg, pca=pca,
                   checkpoint_path=ckpt, log_path=log_path,
                   resume_from=args.resume)
    log.info("trained %d steps; final loss %.4f", result.steps,
             result.log_rows[-1][-1] if result.log_rows else float("nan"))
    write_manifest(out, "train", args.config, train_cfg.seed, files,
                   [ckpt, log_path])
    return EXIT_OK


def cmd_infer(args) -> int:
    from .config import detector_config_from
    from .model import Detector
    from .scene import read_scene, write_labels
    from .trainer import load_archive, restore_checkpoint

    sections = _load_sections(args)
    det_cfg = detector_config_from(sections)
    detector = Detector(det_cfg)
    tensors, _, _ = load_archive(args.ckpt)
    pca = restore_checkpoint(tensors, detector.store)
    if pca is None:
        raise ValueError("checkpoint carries no spectral-reduction tensors")

    files = _scene_files(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for f in files:
        scene = read_scene(f)
        sample = detector.preprocess_scene(scene, pca, with_targets=False,
                                           name=f.stem)
        dets = detector.infer(sample)
        path = out / f"{f.stem}.txt"
        write_labels(dets.boxes, path, scores=dets.scores)
        outputs.append(path)
    log.info("wrote predictions for %d scenes", len(files))
    write_manifest(out, "infer", args.config, args.seed, files, outputs)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .config import eval_config_from
    from .head import DetectionSet
    from .metrics import (bin_difficulty, bin_occlusion, count_points_in_box,
                          evaluate, occlusion_score)
    from .report import plot_scene_bev, write_report_csv
    from .scene import read_labels, read_scene

    sections = _load_sections(args)
    gt_files = _scene_files(args.gt)
    config = eval_config_from(sections)

    dets_per_scene, gts_per_scene, aux, scenes = [], [], [], []
    for f in gt_files:
        scene = read_scene(f)
        scenes.append((f.stem, scene))
        real = scene.real_labels()
        gts_per_scene.append(real)
        diff = [bin_difficulty(count_points_in_box(scene.points, g),
                               config.difficulty_thresholds) for g in real]
        occ = [bin_occlusion(occlusion_score(scene.points, g),
                             config.occlusion_edges) for g in real]
        aux.append({"difficulty": np.asarray(diff, dtype=int),
                    "occlusion": np.asarray(occ, dtype=int)})
        pred_path = Path(args.pred) / f"{f.stem}.txt"
        if pred_path.is_file():
            boxes, scores = read_labels(pred_path)
            if scores is None:
                scores = np.ones(len(boxes))
            dets_per_scene.append(DetectionSet(
                boxes=boxes, scores=np.asarray(scores),
                class_ids=np.asarray([b.class_id for b in boxes], np.int64)))
        else:
            dets_per_scene.append(DetectionSet())

    report = evaluate(dets_per_scene, gts_per_scene, config, gt_aux=aux)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(report, out)
    print(report.table())
    outputs = [out]
    if args.plots:
        plots = Path(args.plots)
        plots.mkdir(parents=True, exist_ok=True)
        for (stem, scene), dets in zip(scenes, dets_per_scene):
            fig_path = plots / f"{stem}.svg"
            plot_scene_bev(scene, dets, fig_path, title=stem)
            outputs.append(fig_path)
    write_manifest(out.parent, "eval", args.config, args.seed, gt_files,
                   outputs)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import REGISTRY, run_all

    if args.block:
        if args.block not in REGISTRY:
            log.error("unknown block %r; choices: %s", args.block,
                      ", ".join(REGISTRY))
            return EXIT_USAGE
        err = REGISTRY[args.block]()["max_rel_err"]
        print(f"{args.block}: max rel err {err:.3e}")
        return EXIT_OK if err <= args.tolerance else EXIT_NUMERIC
    ok, results = run_all(args.tolerance)
    for name, err in results.items():
        status = "ok" if err <= args.tolerance else "FAIL"
        print(f"{name:24s} {err:.3e}  {status}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_plot(args) -> int:
    from .head import DetectionSet
    from .report import plot_scene_bev
    from .scene import read_labels, read_scene

    scene = read_scene(args.scene)
    dets = None
    if args.pred:
        boxes, scores = read_labels(args.pred)
        if scores is None:
            scores = np.ones(len(boxes))
        dets = DetectionSet(boxes=boxes, scores=np.asarray(scores),
                            class_ids=np.asarray([b.class_id for b in boxes],
                                                 np.int64))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    plot_scene_bev(scene, dets, out, title=Path(args.scene).stem)
    write_manifest(out.parent, "plot", args.config, args.seed,
                   [args.scene], [out])
    return EXIT_OK


# ------------------------------------------------------------------ driver

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pivdet",
        description="Pillar-voxel detector for hyperspectral point clouds")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="config file path")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel scenes (ignored with --deterministic)")
        p.add_argument("--deterministic", action="store_true",
                       help="force single-order reductions")

    p = sub.add_parser("synth", help="generate synthetic scenes")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=None)
    p.set_defaults(fn=cmd_synth, default_seed=0)

    p = sub.add_parser("pca", help="fit the spectral reduction")
    common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--components", type=int, default=21)
    p.set_defaults(fn=cmd_pca, default_seed=0)

    p = sub.add_parser("tile", help="sliding-window scene tiling")
    common(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=float, default=30.0)
    p.add_argument("--step", type=float, default=15.0)
    p.add_argument("--rotations", default=None,
                   help="comma-separated radians")
    p.set_defaults(fn=cmd_tile, default_seed=0)

    p = sub.add_parser("train", help="train the detector")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.set_defaults(fn=cmd_train, default_seed=None)

    p = sub.add_parser("infer", help="run detection on scenes")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_infer, default_seed=0)

    p = sub.add_parser("eval", help="evaluate predictions against scenes")
    common(p)
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plots", default=None,
                   help="directory for BEV figures (SVG)")
    p.set_defaults(fn=cmd_eval, default_seed=0)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p)
    p.add_argument("--all", action="store_true")
    p.add_argument("--block", default=None)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck, default_seed=0)

    p = sub.add_parser("plot", help="render a BEV detection figure")
    common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--pred", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plot, default_seed=0)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("PIV_LOG", "INFO").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    if args.seed is None:
        args.seed = getattr(args, "default_seed", 0)
    try:
        return args.fn(args)
    except (FileNotFoundError,) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except Exception as exc:
        from .head import NumericError
        from .preprocess import ConfigError
        from .scene import SceneError, SceneFormatError
        from .trainer import ArchiveError
        if isinstance(exc, NumericError):
            log.error("numeric failure: %s", exc)
            return EXIT_NUMERIC
        if isinstance(exc, (SceneError, SceneFormatError, ArchiveError,
                            ConfigError, ValueError)):
            log.error("%s", exc)
            return EXIT_DATA
        raise


if __name__ == "__main__":
    sys.exit(main())
