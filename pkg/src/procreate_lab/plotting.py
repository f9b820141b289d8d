"""SVG figures for runs, ablations and reports (best effort, not byte-stable)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

SVG_META = {"Date": None}


def _save(fig, path) -> None:
    with plt.rc_context({"svg.hashsalt": "procreate-lab"}):
        fig.savefig(path, format="svg", metadata=SVG_META, bbox_inches="tight")
    plt.close(fig)


def scatter_plot(path, references, baseline, guided, means=None) -> None:
    """2D scatter of references, baseline and guided samples in distinct marker classes."""
    fig, ax = plt.subplots(figsize=(5.5, 5.5))
    if means is not None:
        ax.scatter(*np.asarray(means).T, marker="+", s=80, c="0.6", label="mixture means")
    ax.scatter(*np.asarray(baseline).T, marker="o", s=22, facecolors="none", edgecolors="tab:blue", label="baseline")
    ax.scatter(*np.asarray(guided).T, marker="^", s=22, c="tab:orange", label="guided")
    if len(references):
        ax.scatter(*np.asarray(references).T, marker="x", s=60, c="k", label="references")
    ax.set_aspect("equal")
    ax.legend(loc="upper right", fontsize=8, frameon=False)
    ax.set_title("samples and references")
    _save(fig, path)


def ablation_plot(path, axis: str, rows: list, metrics=("vendi", "mss", "fid", "top1@0.6")) -> None:
    """One panel per metric against the ablated setting."""
    labels = [str(r[axis]) for r in rows]
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3.0))
    for ax, name in zip(np.atleast_1d(axes), metrics):
        vals = [np.nan if r.get(name) is None else r[name] for r in rows]
        ax.plot(range(len(rows)), vals, marker="o")
        ax.set_xticks(range(len(rows)), labels)
        ax.set_xlabel(axis)
        ax.set_title(name)
    fig.tight_layout()
    _save(fig, path)


def report_plot(path, rows: list) -> None:
    """Paired bars of baseline vs guided for each scalar metric."""
    rows = [r for r in rows if r[1] is not None and r[2] is not None]
    fig, ax = plt.subplots(figsize=(1.1 * max(len(rows), 1) + 2, 3.2))
    idx = np.arange(len(rows))
    ax.bar(idx - 0.2, [r[1] for r in rows], width=0.4, label="baseline")
    ax.bar(idx + 0.2, [r[2] for r in rows], width=0.4, label="guided")
    ax.set_xticks(idx, [r[0] for r in rows], rotation=30, ha="right")
    ax.set_yscale("symlog", linthresh=1e-2)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    _save(fig, path)
