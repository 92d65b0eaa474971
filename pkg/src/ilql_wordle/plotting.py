"""Figures written next to the CSV reports. The CSVs remain the contract."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}

COLORS = {"ilql": "#1b6ca8", "single_step": "#e07b39", "filtered_bc": "#5b9e4d", "bc": "#8c8c8c"}


def _label(beta) -> str:
    return "∞" if beta is not None and math.isinf(beta) else f"{beta:g}"


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_results(cells: Sequence, path: str | Path) -> Path | None:
    """Horizontal bars of mean return with stderr whiskers, one per evaluated cell."""
    done = [c for c in cells if c.report is not None]
    if not done:
        return None
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 0.28 * len(done) + 1.0))
        names = []
        for i, c in enumerate(done):
            bits = [c.algo]
            if c.algo == "ilql":
                bits.append(f"τ={c.tau:g}")
            if c.beta is not None:
                bits.append(f"β={_label(c.beta)}")
            if c.pct is not None:
                bits.append(f"{c.pct:g}%")
            names.append(" ".join(bits))
            ax.barh(i, c.report.mean_return, xerr=c.report.stderr, color=COLORS.get(c.algo, "#444444"),
                    edgecolor="black" if c.best else "none", linewidth=1.2, capsize=2)
        ax.set_yticks(range(len(done)), names)
        ax.invert_yaxis()
        ax.set_xlim(-6, 0)
        ax.set_xlabel("mean return (higher is better)")
        return _save(fig, path)


def plot_tradeoff(rows: Sequence, path: str | Path) -> Path:
    """Return and per-token entropy against beta."""
    with plt.rc_context(STYLE):
        fig, (left, right) = plt.subplots(1, 2, figsize=(6.0, 2.4))
        xs = list(range(len(rows)))
        left.errorbar(xs, [r.mean_return for r in rows], yerr=[r.stderr for r in rows], marker="o", color=COLORS["ilql"], capsize=2)
        left.set_ylabel("mean return")
        right.plot(xs, [r.entropy_nats for r in rows], marker="s", color=COLORS["single_step"])
        right.set_ylabel("entropy (nats / token)")
        for ax in (left, right):
            ax.set_xticks(xs, [_label(r.beta) for r in rows])
            ax.set_xlabel("β")
        fig.tight_layout()
        return _save(fig, path)
