"""Report rendering: delimited plot data plus matplotlib figures.

Every figure has a CSV twin carrying the same numbers, so downstream
tooling never needs a graphics stack to consume results.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .concepts import MODALITIES


def write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def forecast_series(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Collapse (windows, regions, channels) to one line per series."""
    return truth.mean(axis=(1, 2)), pred.mean(axis=(1, 2))


def write_forecast_outputs(out_dir: str, preds: dict[str, np.ndarray],
                           truths: dict[str, np.ndarray], tag: str) -> list[str]:
    """One CSV and one PNG per modality: region-mean truth vs prediction."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for m in MODALITIES:
        truth_line, pred_line = forecast_series(preds[m], truths[m])
        steps = np.arange(len(truth_line))
        csv_path = os.path.join(out_dir, f"forecast_{m}_{tag}.csv")
        write_csv(csv_path, ["step", "truth", "prediction"],
                  zip(steps.tolist(), truth_line.tolist(), pred_line.tolist()))
        fig, ax = plt.subplots(figsize=(9, 3.2))
        ax.plot(steps, truth_line, label="truth", lw=1.0, color="#333333")
        ax.plot(steps, pred_line, label="prediction", lw=1.0, color="#d62728", alpha=0.85)
        ax.set_xlabel("test window")
        ax.set_ylabel(m)
        ax.set_title(f"{m}: one-step forecast ({tag})")
        ax.legend(loc="upper right", fontsize=8)
        fig.tight_layout()
        png_path = os.path.join(out_dir, f"forecast_{m}_{tag}.png")
        fig.savefig(png_path, dpi=130)
        plt.close(fig)
        written += [csv_path, png_path]
    return written


def write_graph_outputs(out_dir: str, matrix: np.ndarray, labels: list[str],
                        name: str = "causal_graph",
                        reference: np.ndarray | None = None) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{name}.csv")
    rows = [[labels[i]] + [repr(float(v)) for v in matrix[i]] for i in range(len(labels))]
    write_csv(csv_path, ["from\\to"] + list(labels), rows)

    n_panels = 2 if reference is not None else 1
    fig, axes = plt.subplots(1, n_panels, figsize=(4.2 * n_panels, 3.6))
    axes = np.atleast_1d(axes)
    panels = [(matrix, "learned")] + ([(reference, "ground truth")] if reference is not None else [])
    for ax, (mat, title) in zip(axes, panels):
        im = ax.imshow(mat, cmap="viridis", vmin=0.0, vmax=max(1.0, mat.max()))
        ax.set_xticks(range(len(labels)), labels)
        ax.set_yticks(range(len(labels)), labels)
        ax.set_title(title)
        for i in range(len(labels)):
            for j in range(len(labels)):
                ax.text(j, i, f"{mat[i, j]:.2f}", ha="center", va="center",
                        color="white", fontsize=7)
        fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    png_path = os.path.join(out_dir, f"{name}.png")
    fig.savefig(png_path, dpi=130)
    plt.close(fig)
    return [csv_path, png_path]


def write_loss_curves(out_dir: str, history: list[dict]) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    keys = ("total", "recon_nll", "kl_eps", "kl_z", "pred_l2", "mae")
    fig, axes = plt.subplots(2, 3, figsize=(12, 6))
    for ax, key in zip(axes.ravel(), keys):
        for split, color in (("train", "#1f77b4"), ("val", "#ff7f0e")):
            xs = [r["epoch"] for r in history if r["split"] == split and r.get(key) is not None]
            ys = [r[key] for r in history if r["split"] == split and r.get(key) is not None]
            if xs:
                ax.plot(xs, ys, label=split, color=color, lw=1.2)
        ax.set_title(key)
        ax.set_xlabel("epoch")
        ax.legend(fontsize=8)
    fig.tight_layout()
    png_path = os.path.join(out_dir, "loss_curves.png")
    fig.savefig(png_path, dpi=130)
    plt.close(fig)
    return [png_path]
