"""Matplotlib renderings of the CSV outputs, written next to them as PNGs.

The CSVs stay the canonical data boundary; these are convenience plots with
pinned metadata so reruns produce byte-identical files.
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import NctrCurve

_PNG_META = {"Software": "freqcap"}


def _save(fig, path: str) -> None:
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def save_nctr_figure(curve: NctrCurve, path: str, title: str = "Normalized CTR by frequency") -> None:
    fig, ax = plt.subplots(figsize=(7, 4.2))
    ax.plot(curve.v, curve.ctr_n, marker="o", markersize=3, label="CTR_n(v)")
    ax.set_xlabel("prior views v (last bin aggregates the tail)")
    ax.set_ylabel("CTR_n(v)")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax2 = ax.twinx()
    ax2.plot(curve.v, curve.cdf, color="tab:orange", linestyle="--", label="impression CDF")
    ax2.set_ylabel("impression CDF")
    ax2.set_ylim(0, 1.05)
    lines1, labels1 = ax.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax.legend(lines1 + lines2, labels1 + labels2, loc="center right")
    fig.tight_layout()
    _save(fig, path)


def save_segment_nctr_figure(curves: Mapping[str, NctrCurve], path: str, segment_key: str) -> None:
    fig, ax = plt.subplots(figsize=(7, 4.2))
    for name in sorted(curves):
        curve = curves[name]
        ax.plot(curve.v, curve.ctr_n, marker="o", markersize=2.5, label=name)
    ax.set_xlabel("prior views v")
    ax.set_ylabel("CTR_n(v)")
    ax.set_title(f"Normalized CTR by frequency per {segment_key}")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def save_progress_figure(rows: Sequence, path: str, label: str = "model") -> None:
    """Progressive LogLoss and sAUC over the stream from TrainReport intervals."""
    xs = [r.end_event for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    ax1.plot(xs, [r.logloss for r in rows], marker="o", markersize=3)
    ax1.set_xlabel("events")
    ax1.set_ylabel("interval LogLoss")
    ax1.grid(True, alpha=0.3)
    ax2.plot(xs, [r.sauc for r in rows], marker="o", markersize=3, color="tab:green")
    ax2.set_xlabel("events")
    ax2.set_ylabel("interval sAUC")
    ax2.grid(True, alpha=0.3)
    fig.suptitle(f"Progressive validation ({label})")
    fig.tight_layout()
    _save(fig, path)


def save_weights_figure(weights: np.ndarray, path: str, key: str = "global") -> None:
    fig, ax = plt.subplots(figsize=(7, 4.2))
    ax.plot(range(len(weights)), weights, marker="o", markersize=3)
    ax.set_xlabel("frequency bin (last bin aggregates the tail)")
    ax.set_ylabel("score offset")
    ax.set_title(f"Learned frequency weight vector ({key})")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def save_cpm_figure(rows: Sequence[Mapping], path: str, baseline: str) -> None:
    """Daily CPM lift per bucket from bucket_report rows."""
    by_bucket: dict[str, list[tuple[int, float]]] = {}
    for row in rows:
        if row["day"] == "all" or row["bucket"] == baseline:
            continue
        lift = row["lift_pct"]
        if isinstance(lift, float) and math.isnan(lift):
            continue
        by_bucket.setdefault(row["bucket"], []).append((int(row["day"]), float(lift)))
    fig, ax = plt.subplots(figsize=(7, 4.2))
    for name in sorted(by_bucket):
        pts = sorted(by_bucket[name])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", markersize=3, label=name)
    ax.axhline(0.0, color="gray", linewidth=0.8)
    ax.set_xlabel("day")
    ax.set_ylabel(f"CPM lift vs {baseline} (%)")
    ax.set_title("Daily CPM lifts")
    ax.grid(True, alpha=0.3)
    if by_bucket:
        ax.legend()
    fig.tight_layout()
    _save(fig, path)


def save_lifts_figure(rows: Sequence[Mapping], path: str) -> None:
    """Bar chart of lift percentages from report rows."""
    labels = [f"{r['candidate']}:{r['metric']}" for r in rows]
    values = [float(r["lift_pct"]) for r in rows]
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(labels)), 4))
    ax.bar(range(len(values)), values, color="tab:blue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.axhline(0.0, color="gray", linewidth=0.8)
    ax.set_ylabel("lift (%)")
    ax.set_title("Lifts vs baseline")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    _save(fig, path)
