"""SVG charts for sweep curves and angular-deviation histograms."""
from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed ids and no timestamp so identical inputs give identical files
matplotlib.rcParams["svg.hashsalt"] = "madpoison"
SVG_META = {"Date": None, "Creator": None}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata=SVG_META)
    plt.close(fig)


def curve_chart(points, path, floor=None):
    """Attacker accuracy against defender accuracy, one line per defense kind and attack."""
    lines = defaultdict(list)
    for p in points:
        if p.status == "ok":
            lines[(p.defense_kind, p.attack_tag)].append((p.acc_defender, p.acc_attacker))
    fig, ax = plt.subplots(figsize=(5.5, 4.2))
    for (kind, attack), xy in sorted(lines.items()):
        xy.sort()
        ax.plot([a for a, _ in xy], [b for _, b in xy], marker="o", ms=3, label=f"{kind} / {attack}")
    if floor is not None:
        ax.axhline(floor, color="grey", ls=":", lw=1, label="chance")
    ax.set_xlabel("defender test accuracy")
    ax.set_ylabel("attacker test accuracy")
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def histogram_chart(histograms, path):
    """Stacked panels: deviation histogram per run, and test-loss traces."""
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(5.5, 6))
    for h in histograms:
        label = f"{h.mode} eps={h.epsilon:g}"
        centers = [(a + b) / 2 for a, b in zip(h.bin_edges[:-1], h.bin_edges[1:])]
        ax1.step(centers, h.counts, where="mid", label=f"{label} (mean {h.mean_theta:.1f})")
        ax2.plot(h.trace_steps, h.test_loss_trace, marker=".", label=label)
    ax1.set_xlabel("angular deviation (degrees)")
    ax1.set_ylabel("count")
    ax1.set_xlim(0, 180)
    ax1.legend(fontsize=7)
    ax2.set_xlabel("step")
    ax2.set_ylabel("attacker test loss")
    ax2.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)
