"""Figure rendering for the CLI report paths.

Renders PNGs next to the delimited text outputs: a training curve beside
train.log and a per-utterance CER histogram beside the eval report.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams.update({
    "figure.figsize": (7.0, 4.2),
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
})


def render_training_curves(records, path):
    """Loss curves per epoch with the learning rate on a twin axis."""
    path = Path(path)
    epochs = [r.epoch for r in records]
    fig, ax = plt.subplots()
    ax.plot(epochs, [r.train_mtl for r in records], marker="o", label="train")
    ax.plot(epochs, [r.dev_mtl for r in records], marker="s", label="dev")
    ax.set_xlabel("epoch")
    ax.set_ylabel("multi-task loss")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r.lr for r in records], color="gray", alpha=0.6, label="lr")
    ax2.set_ylabel("learning rate")
    ax2.grid(False)
    lines, labels = ax.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax.legend(lines + lines2, labels + labels2, loc="upper right")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def render_cer_histogram(per_utt_cers, overall: float, path):
    """Distribution of per-utterance CER with the corpus aggregate marked."""
    path = Path(path)
    fig, ax = plt.subplots()
    ax.hist(per_utt_cers, bins=20, color="steelblue", edgecolor="black", alpha=0.8)
    ax.axvline(overall, color="crimson", linestyle="--",
               label=f"corpus CER {overall:.4f}")
    ax.set_xlabel("per-utterance CER")
    ax.set_ylabel("utterances")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
