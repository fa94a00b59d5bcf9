"""Report figures written beside the CSV/JSON outputs.

Agg backend, fixed DPI and no metadata so PNG bytes depend only on data.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DPI = 100
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=DPI, metadata=_META)
    plt.close(fig)
    return path


def null_histogram(null, T, path, title="Bootstrap null of the triad statistic") -> Path:
    null = np.asarray(null, float)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(null, bins=40, color="0.7", edgecolor="0.4")
    p95 = np.percentile(null, 95)
    ax.axvline(p95, color="k", ls="--", lw=1, label="null 95th pct")
    ax.axvline(T, color="C3", lw=2, label="data")
    ax.set_xlabel("T")
    ax.set_ylabel("replicates")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def degree_histogram(out_deg, in_deg, path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
    for ax, d, lab in zip(axes, (out_deg, in_deg), ("seller outdegree", "buyer indegree")):
        d = np.asarray(d)
        ax.hist(d, bins=np.arange(d.max(initial=0) + 2) - 0.5, color="0.6")
        ax.set_xlabel(lab)
        ax.set_ylabel("nodes")
    fig.tight_layout()
    return _save(fig, path)


def decile_bars(table_c1, table_c2, path, value="change", title="") -> Path:
    """Side-by-side C1/C2 bars per baseline decile."""
    x = np.asarray(table_c1["decile"])
    fig, ax = plt.subplots(figsize=(7, 4))
    w = 0.4
    ax.bar(x - w / 2, table_c1[value], w, yerr=table_c1.get(f"{value}_se"), label="C1 (with transitivity)", color="C0")
    ax.bar(x + w / 2, table_c2[value], w, yerr=table_c2.get(f"{value}_se"), label="C2 (support frozen)", color="0.6")
    ax.set_xticks(x)
    ax.set_xlabel("baseline decile")
    ax.set_ylabel("relative change" if value.startswith("rel") else "expected change in links")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def contribution_plot(frame, path, x="group", y="contribution") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(frame[x], frame[y], marker="o", ms=3, color="C0")
    ax.axhline(0, color="0.5", lw=0.8)
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    fig.tight_layout()
    return _save(fig, path)


def mc_distances(frame, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(frame["dist95"], bins=30, color="0.6", edgecolor="0.3")
    ax.axvline(0, color="k", ls="--", lw=1)
    ax.set_xlabel("(T - null 95th pct) / null sd")
    ax.set_ylabel("runs")
    fig.tight_layout()
    return _save(fig, path)


def moment_bars(frame, path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.arange(len(frame))
    obs = np.asarray(frame["observed"], float)
    sim = np.asarray(frame["simulated"], float)
    scale = np.where(obs != 0, np.abs(obs), 1.0)
    ax.bar(x - 0.2, obs / scale, 0.4, label="observed", color="0.6")
    ax.bar(x + 0.2, sim / scale, 0.4, label="simulated", color="C0")
    ax.set_xticks(x)
    ax.set_xticklabels(frame["moment"], rotation=45, ha="right")
    ax.set_ylabel("relative to observed")
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)
