"""Static figures rendered from the CSV outputs."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["loss_curve", "error_histogram", "center_scatter", "iou_bars"]


def _read(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def loss_curve(metrics_csv, path, window: int = 20) -> Path:
    rows = _read(metrics_csv)
    step = np.array([int(r["step"]) for r in rows])
    fig, ax = plt.subplots(figsize=(6, 4))
    for col in ("loss", "loss_dist", "loss_equiv"):
        vals = np.array([float(r[col]) if r[col] else np.nan for r in rows])
        if np.all(np.isnan(vals)):
            continue
        if len(vals) < window:
            ax.plot(step, vals, label=col)
            continue
        ax.plot(step, vals, alpha=0.25)
        smooth = np.convolve(vals, np.ones(window) / window, mode="valid")
        ax.plot(step[window - 1:], smooth, label=f"{col} ({window}-step mean)")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    return _save(fig, path)


def error_histogram(results_csv, path, bins: int = 40) -> Path:
    rows = _read(results_csv)
    fig, ax = plt.subplots(figsize=(6, 4))
    for kind in sorted({r["kind"] for r in rows}):
        err = [float(r["radial_error_mm"]) for r in rows if r["kind"] == kind]
        ax.hist(err, bins=bins, alpha=0.6, label=f"{kind} (MRE {np.mean(err):.1f} mm)")
    ax.set_xlabel("radial error (mm)")
    ax.set_ylabel("count")
    ax.legend(fontsize=8)
    return _save(fig, path)


def center_scatter(centers_csv, path) -> Path:
    """Organ-center embeddings: a 3D scatter next to its three axis-pair projections."""
    rows = _read(centers_csv)
    organs = sorted({r["organ"] for r in rows})
    e = {o: np.array([[float(r[c]) for c in ("e1", "e2", "e3")] for r in rows if r["organ"] == o]) for o in organs}
    fig = plt.figure(figsize=(12, 3.5))
    ax3 = fig.add_subplot(1, 4, 1, projection="3d")
    for o in organs:
        ax3.scatter(*e[o].T, s=8, label=o)
    for i, (a, b) in enumerate(((0, 1), (0, 2), (1, 2))):
        ax = fig.add_subplot(1, 4, i + 2)
        for o in organs:
            ax.scatter(e[o][:, a], e[o][:, b], s=8)
        ax.set_xlabel(f"e{a + 1}")
        ax.set_ylabel(f"e{b + 1}")
    fig.legend(*ax3.get_legend_handles_labels(), loc="lower center", ncol=len(organs), fontsize=7)
    fig.subplots_adjust(bottom=0.2)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def iou_bars(report_csv, path) -> Path:
    rows = _read(report_csv)
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(len(rows))
    ax.bar(x, [float(r["iou_mean"]) for r in rows], yerr=[float(r["iou_std"]) for r in rows], capsize=3)
    ax.set_xticks(x, [r["organ"] for r in rows], rotation=45, ha="right")
    ax.set_ylabel("IoU")
    ax.set_ylim(0, 1)
    return _save(fig, path)
