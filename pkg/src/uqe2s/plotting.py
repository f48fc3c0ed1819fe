"""Static PNG figures for CLI reports (effect profiles, bounds, Monte Carlo summaries)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

__all__ = ["effect_profile_figure", "bounds_figure", "mc_figure"]


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig)
    # fixed metadata keeps reruns byte-identical
    fig.savefig(path, dpi=120, metadata={"Software": None})
    return path


def effect_profile_figure(rows, path, title: str = "Unconditional quantile effect") -> Path:
    """Point estimates against ``tau`` with 95% bands, one panel per shift kind.

    ``rows`` is an iterable of mappings with keys ``tau, kind, point, ci_lo, ci_hi``.
    """
    rows = list(rows)
    kinds = sorted({r["kind"] for r in rows})
    fig = Figure(figsize=(4.0 * max(len(kinds), 1), 3.4))
    for i, kind in enumerate(kinds):
        ax = fig.add_subplot(1, len(kinds), i + 1)
        sub = sorted((r for r in rows if r["kind"] == kind), key=lambda r: r["tau"])
        tau = np.array([r["tau"] for r in sub])
        pt = np.array([r["point"] for r in sub])
        lo = np.array([r["ci_lo"] for r in sub])
        hi = np.array([r["ci_hi"] for r in sub])
        ax.fill_between(tau, lo, hi, color="0.85", label="95% CI")
        ax.plot(tau, pt, "o-", color="k", lw=1.2, ms=4, label="estimate")
        ax.axhline(0.0, color="0.5", lw=0.8, ls=":")
        ax.set_xlabel("quantile level")
        ax.set_title(kind)
        if i == 0:
            ax.set_ylabel("effect")
            ax.legend(frameon=False, fontsize=8)
    fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    return _save(fig, path)


def bounds_figure(rows, path, title: str = "Estimated identified intervals") -> Path:
    """Interval ``[lower, upper]`` against ``tau``; ``rows`` carry ``tau, lower, upper``."""
    rows = sorted(rows, key=lambda r: r["tau"])
    fig = Figure(figsize=(4.5, 3.4))
    ax = fig.add_subplot(1, 1, 1)
    tau = np.array([r["tau"] for r in rows])
    lo = np.array([r["lower"] for r in rows])
    hi = np.array([r["upper"] for r in rows])
    ax.vlines(tau, lo, hi, color="k", lw=2)
    ax.plot(tau, lo, "_", color="k", ms=10)
    ax.plot(tau, hi, "_", color="k", ms=10)
    ax.axhline(0.0, color="0.5", lw=0.8, ls=":")
    ax.set_xlabel("quantile level")
    ax.set_ylabel("effect")
    ax.set_title(title, fontsize=10)
    fig.tight_layout()
    return _save(fig, path)


def mc_figure(records, summary, path) -> Path:
    """Histograms of replicated point estimates with the oracle marked, one panel per cell."""
    cells = [(s["tau"], s["kind"]) for s in summary]
    ncol = max(len(cells), 1)
    fig = Figure(figsize=(3.6 * ncol, 3.2))
    for i, (tau, kind) in enumerate(cells):
        ax = fig.add_subplot(1, ncol, i + 1)
        pts = np.array([r["point"] for r in records if r["tau"] == tau and r["kind"] == kind])
        ax.hist(pts, bins=min(30, max(5, pts.size // 5)), color="0.7", edgecolor="0.3")
        s = summary[i]
        if "oracle" in s:
            ax.axvline(s["oracle"], color="k", lw=1.5, label="oracle")
            ax.legend(frameon=False, fontsize=8)
        ax.set_title(f"{kind}, tau={tau:g}", fontsize=9)
        ax.set_xlabel("point estimate")
    fig.tight_layout()
    return _save(fig, path)
