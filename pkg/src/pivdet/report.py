"""Report emission: CSV tables plus BEV detection figures rendered to SVG."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Polygon as MplPolygon

from .metrics import EvalReport, _corners_bev
from .scene.types import HpcScene


def write_report_csv(report: EvalReport, path) -> None:
    Path(path).write_text(report.to_csv())


def _draw_box(ax, box7, color, label=None, lw=1.4, ls="-"):
    corners = _corners_bev(np.asarray(box7, dtype=np.float64))
    ax.add_patch(MplPolygon(corners, closed=True, fill=False,
                            edgecolor=color, linewidth=lw, linestyle=ls,
                            label=label))
    # heading tick from the center to the +x face midpoint
    cx, cy = box7[0], box7[1]
    mid = 0.5 * (corners[0] + corners[3])
    ax.plot([cx, mid[0]], [cy, mid[1]], color=color, linewidth=lw * 0.8)


def plot_scene_bev(scene: HpcScene, detections=None, out_path=None,
                   title=None, cell: float = 0.4):
    """BEV point-density raster with ground-truth and predicted boxes.

    Ground truth draws green (fakes dashed gray), predictions red with the
    score printed at the box center.  Saves SVG (or whatever the extension
    asks for) when out_path is given.
    """
    x0, x1, y0, y1 = scene.bounds[:4]
    nx = max(1, int(np.ceil((x1 - x0) / cell)))
    ny = max(1, int(np.ceil((y1 - y0) / cell)))
    density, _, _ = np.histogram2d(
        scene.points[:, 0], scene.points[:, 1],
        bins=(nx, ny), range=((x0, x1), (y0, y1)))

    fig, ax = plt.subplots(figsize=(7, 7))
    ax.imshow(np.log1p(density).T, origin="lower", cmap="Greys",
              extent=(x0, x1, y0, y1), interpolation="nearest")
    for box in scene.labels:
        if box.is_fake:
            _draw_box(ax, box.as_array(), "dimgray", ls="--")
        else:
            _draw_box(ax, box.as_array(), "tab:green")
    if detections is not None:
        for i, box in enumerate(detections.boxes):
            arr = box.as_array()
            _draw_box(ax, arr, "tab:red")
            ax.annotate(f"{detections.scores[i]:.2f}", (arr[0], arr[1]),
                        color="tab:red", fontsize=7, ha="center")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(title or "BEV detections (green: truth, red: predicted)")
    ax.set_aspect("equal")
    fig.tight_layout()
    if out_path is not None:
        fig.savefig(out_path)
        plt.close(fig)
        return None
    return fig, ax


def plot_training_log(rows, out_path=None):
    """Loss curves from (step, lr, cls, reg, dir, total) log rows."""
    rows = np.asarray(rows, dtype=np.float64)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for col, name in ((2, "cls"), (3, "reg"), (4, "dir"), (5, "total")):
        ax1.plot(rows[:, 0], rows[:, col], label=name)
    ax1.set_xlabel("step")
    ax1.set_ylabel("loss")
    ax1.set_yscale("log")
    ax1.legend()
    ax2.plot(rows[:, 0], rows[:, 1])
    ax2.set_xlabel("step")
    ax2.set_ylabel("learning rate")
    fig.tight_layout()
    if out_path is not None:
        fig.savefig(out_path)
        plt.close(fig)
        return None
    return fig, (ax1, ax2)
