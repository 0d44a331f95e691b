"""Figures written next to the CLI's JSON reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
})


def loss_curve(losses, path, title="training loss"):
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(range(len(losses)), losses, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy")
    ax.set_yscale("log")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def scale_figure(rows, path, mode):
    pairs = [r["total_pairs"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
    ax1.plot(pairs, [r["report_tokens"] for r in rows], "o-")
    ax1.set_xscale("log", base=2)
    ax1.set_xlabel("pairs per report")
    ax1.set_ylabel("report-side LM tokens")
    ax2.plot(pairs, [r["knowledge_f1"] for r in rows], "s-", color="C1")
    ax2.set_xscale("log", base=2)
    ax2.set_ylim(0, 1.02)
    ax2.set_xlabel("pairs per report")
    ax2.set_ylabel("Knowledge F1")
    fig.suptitle(f"input-length scaling ({mode})")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def rc_histogram(rcs, path):
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.hist(rcs, bins=20, range=(0, 1))
    ax.set_xlabel("relative change")
    ax.set_ylabel("samples")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
