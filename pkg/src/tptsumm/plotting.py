"""Figures written next to the JSON/TSV reports of the CLI."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def pretty_figure(width: float = 6.0, height: float | None = None):
    golden = (math.sqrt(5) - 1.0) / 2.0
    fig, ax = plt.subplots(figsize=(width, height or width * golden))
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.tick_params(labelsize=9)
    return fig, ax


def _save(fig, path) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return str(path)


def plot_loss_curve(losses: Sequence[float], path, title: str = "training loss") -> str:
    fig, ax = pretty_figure()
    ax.plot(range(1, len(losses) + 1), losses, lw=1.2, color="#1f4e79")
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy")
    if losses and min(losses) > 0:
        ax.set_yscale("log")
    ax.set_title(title, fontsize=10)
    return _save(fig, path)


def plot_role_histogram(report, path) -> str:
    fig, ax = pretty_figure()
    edges = report.bin_edges
    widths = [b - a for a, b in zip(edges[:-1], edges[1:])]
    ax.bar(edges[:-1], report.histogram, width=widths, align="edge", color="#7a9cc6", edgecolor="white")
    ax.axvline(report.threshold, color="#a33", ls="--", lw=1)
    ax.set_xlabel("max role-attention score per (token, head)")
    ax.set_ylabel("count")
    ax.set_title(f"{100 * report.fraction_above:.1f}% above {report.threshold:g}; "
                 f"{report.distinct_codes} distinct codes", fontsize=10)
    return _save(fig, path)


def plot_rouge(mean: dict, path) -> str:
    fig, ax = pretty_figure(5.0)
    names = list(mean)
    vals = [mean[m]["f"] for m in names]
    ax.bar(names, vals, color="#5b8c5a")
    ax.set_ylim(0, 1)
    ax.set_ylabel("F1")
    for i, v in enumerate(vals):
        ax.text(i, v + 0.02, f"{v:.3f}", ha="center", fontsize=8)
    return _save(fig, path)


def plot_probe_f1(rows: Sequence[dict], path) -> str:
    """One line per site over layers; rows carry ``layer``, ``site`` and ``dev_f1``."""
    fig, ax = pretty_figure()
    for site in sorted({r["site"] for r in rows}):
        pts = sorted((r["layer"], r["dev_f1"]) for r in rows if r["site"] == site)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=site)
    ax.set_xlabel("layer")
    ax.set_ylabel("dev micro-F1")
    ax.set_ylim(0, 1.02)
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)
