"""Figure rendering for run reports. All figures go to files (Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def loss_curve(epoch_losses, path, title="training loss"):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(range(1, len(epoch_losses) + 1), epoch_losses, marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean cross-entropy")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cca_layers(reports, path, title="mean canonical correlation per LM layer"):
    """One line per report dict (as produced by alignment_report)."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for rep in reports:
        xs = [row["layer"] for row in rep["layers"]]
        ys = [row["mean_corr"] for row in rep["layers"]]
        label = ("fused" if rep.get("fused") else "base")
        label += f" (I={rep.get('injection')}, {rep.get('mode')})"
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel("LM layer")
    ax.set_ylabel("mean correlation")
    ax.set_ylim(0.0, 1.05)
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def wer_hist(per_sample_wer, path, title="per-utterance WER"):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.hist(per_sample_wer, bins=20, range=(0.0, max(1.0, max(per_sample_wer, default=1.0))))
    ax.set_xlabel("WER")
    ax.set_ylabel("utterances")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
