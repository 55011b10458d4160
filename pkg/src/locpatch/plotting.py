"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_training_log(log, path):
    """Detection loss and the two regularizers per epoch."""
    epochs = log.column("epoch")
    fig, axes = plt.subplots(1, 3, figsize=(11, 3))
    for ax, name, title in zip(axes, ("det_loss", "tv_loss", "nps_loss"),
                               ("detection", "total variation", "non-printability")):
        ax.plot(epochs, log.column(name), lw=1.2)
        ax.set_title(title)
        ax.set_xlabel("epoch")
    axes[1].set_yscale("log")
    axes[2].set_yscale("log")
    fig.tight_layout()
    return _save(fig, path)


def plot_transfer_matrix(rows, cols, matrix, path, title="attack success rate"):
    matrix = np.asarray(matrix)
    fig, ax = plt.subplots(figsize=(1.2 * len(cols) + 2, 1.0 * len(rows) + 1.5))
    im = ax.imshow(matrix, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(len(cols)), cols)
    ax.set_yticks(range(len(rows)), rows)
    ax.set_xlabel("target detector")
    ax.set_ylabel("patch source")
    for r in range(len(rows)):
        for c in range(len(cols)):
            val = matrix[r, c]
            ax.text(c, r, f"{100 * val:.1f}", ha="center", va="center",
                    color="white" if val < 0.6 else "black", fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_title(title)
    return _save(fig, path)


def _draw_boxes(ax, boxes, color, lw=1.0):
    for b in boxes:
        ax.add_patch(Rectangle((b.x_min, b.y_min), b.width, b.height, fill=False, ec=color, lw=lw))


def plot_detection_pairs(clean_images, attacked_images, clean_dets, attacked_dets, gts, path, max_images=4):
    """Clean (top row) vs patched (bottom row) frames with ground truth and detections."""
    n = min(max_images, len(clean_images))
    fig, axes = plt.subplots(2, n, figsize=(2.6 * n, 5.4), squeeze=False)
    for k in range(n):
        for row, imgs, dets in ((0, clean_images, clean_dets), (1, attacked_images, attacked_dets)):
            ax = axes[row, k]
            ax.imshow(np.clip(imgs[k].detach().cpu().numpy(), 0, 1))
            _draw_boxes(ax, gts[k], "yellow", 0.8)
            _draw_boxes(ax, [d.box for d in dets[k]], "red", 1.2)
            ax.set_axis_off()
    axes[0, 0].set_title("clean", loc="left", fontsize=9)
    axes[1, 0].set_title("patched", loc="left", fontsize=9)
    return _save(fig, path)
