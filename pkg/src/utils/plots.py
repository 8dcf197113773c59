from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ..prism.bench import ScalingReport  # noqa: E402

STREAM_STYLE = {"baseline": "tab:blue", "ismr": "tab:green", "ablation": "tab:red"}


def plot_ismr_curves(rows: Sequence[Mapping[str, float]], path: Path, title: str = "ISMR") -> Path:
    """Средний BLEU на valid по потокам, с полосой min/max при нескольких сидах."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    steps = [row["step"] for row in rows]
    for label, color in STREAM_STYLE.items():
        ax.plot(steps, [row[label] for row in rows], marker="o", color=color, label=label)
        if rows and f"{label}_min" in rows[0]:
            lo = [row[f"{label}_min"] for row in rows]
            hi = [row[f"{label}_max"] for row in rows]
            ax.fill_between(steps, lo, hi, color=color, alpha=0.15)
    ax.set_xlabel("step")
    ax.set_ylabel("validation BLEU")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_scaling(report: ScalingReport, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for prim, timings in report.timings.items():
        ns = [t.n for t in timings]
        ax.errorbar(
            ns,
            [t.median_ns for t in timings],
            yerr=[[t.median_ns - t.q1_ns for t in timings], [t.q3_ns - t.median_ns for t in timings]],
            marker="o",
            capsize=3,
            label=f"{prim} (slope {report.fits[prim].slope:.2f})" if prim in report.fits else prim,
        )
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("sequence length N")
    ax.set_ylabel("median forward time (ns)")
    ax.set_title(f"forward cost, d={report.d}")
    ax.grid(alpha=0.3, which="both")
    ax.legend()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
