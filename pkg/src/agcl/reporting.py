"""Delimited reports and the figures rendered alongside them.

Every report path writes a CSV first and then a PNG next to it. Output
bytes must be reproducible for a fixed config and seed, so floats are
formatted with repr-faithful precision and wall-clock readings are only
recorded when AGCL_TIMING=1 (timings are inherently non-reproducible;
they always go to the log).
"""

from __future__ import annotations

import csv
import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

import numpy as np  # noqa: E402


def _fmt(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def timing_enabled() -> bool:
    return os.environ.get("AGCL_TIMING", "0") == "1"


def wall_clock_field(seconds: float) -> float:
    return seconds if timing_enabled() else 0.0


def metrics_header(n_objects: int) -> list:
    per_object = [f"dice_obj{o + 1}" for o in range(n_objects)]
    return (["run_id", "stage", "epoch", "loss", "dice_mean"] + per_object
            + ["miou", "silhouette", "wall_clock_s"])


def history_rows(run_id: str, history, n_objects: int) -> list:
    rows = []
    blank = [""] * (n_objects + 3)  # dice_mean, per-object, miou, silhouette
    for epoch, loss in enumerate(history.epoch_losses, start=1):
        rows.append([run_id, history.stage, epoch, loss] + blank + [""])
    if rows:
        rows[-1][-1] = wall_clock_field(history.wall_clock_s)
    return rows


def eval_row(run_id: str, dice_per_object: np.ndarray, miou_value: float,
             silhouette: float, wall_clock_s: float) -> list:
    dice = [float(v) for v in dice_per_object]
    return ([run_id, "eval", "", "", float(np.mean(dice))] + dice
            + [miou_value, silhouette, wall_clock_field(wall_clock_s)])


def write_csv(path, header: list, rows: list) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


# ---------------------------------------------------------------------------
# figures

def _save(fig, path) -> None:
    fig.savefig(path, dpi=120, metadata={"Software": "agcl"})
    plt.close(fig)


def render_dice_figure(path, dice_per_object: np.ndarray, title: str) -> None:
    dice = np.asarray(dice_per_object, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(np.arange(dice.size) + 1, dice, color="#4878cf")
    ax.axhline(dice.mean(), color="#d65f5f", ls="--", lw=1,
               label=f"mean {dice.mean():.3f}")
    ax.set_xlabel("object")
    ax.set_ylabel("Dice")
    ax.set_ylim(0, 1.05)
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def render_embedding_figure(path, coords: np.ndarray, labels: np.ndarray,
                            silhouette: float) -> None:
    coords = np.asarray(coords)
    labels = np.asarray(labels)
    fig, ax = plt.subplots(figsize=(4.6, 4.2))
    keys = sorted({(int(m), int(o)) for m, o in labels})
    cmap = plt.get_cmap("tab10")
    for i, (m, o) in enumerate(keys):
        sel = (labels[:, 0] == m) & (labels[:, 1] == o)
        ax.scatter(coords[sel, 0], coords[sel, 1], s=9,
                   color=cmap(i % 10), label=f"m{m} o{o}")
    ax.set_xlabel("pc 1")
    ax.set_ylabel("pc 2")
    ax.set_title(f"projection space (silhouette {silhouette:.3f})")
    ax.legend(fontsize=7, markerscale=1.4, loc="best")
    fig.tight_layout()
    _save(fig, path)


def render_sweep_figure(path, values: list, dice_means: list,
                        axis_name: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    xs = np.arange(len(values))
    ax.plot(xs, dice_means, marker="o", color="#4878cf")
    ax.set_xticks(xs)
    ax.set_xticklabels([str(v) for v in values])
    ax.set_xlabel(axis_name)
    ax.set_ylabel("mean Dice")
    ax.set_title(f"sweep over {axis_name}")
    fig.tight_layout()
    _save(fig, path)
