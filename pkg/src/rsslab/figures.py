"""Figure rendering for suite reports (PNG files next to the CSV)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _row_label(row: dict) -> str:
    label = row["run"]
    if str(row.get("robust_probe", "0")) in ("1", "True"):
        label += " (r-LE)"
    return label


def accuracy_vs_epsilon(rows: list[dict], eps_grid: list[tuple[int, int]],
                        path: Path):
    """One line per (run, probe): robust top-1 over the epsilon grid."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    xs = [0.0] + [num / den for num, den in eps_grid]
    for row in rows:
        ys = [float(row["clean_acc"])]
        ys += [float(row[f"robust_{num}_{den}"]) for num, den in eps_grid]
        ax.plot(xs, ys, marker="o", label=_row_label(row))
    ax.set_xlabel("attack budget (l-inf, pixel scale)")
    ax.set_ylabel("top-1 accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def wall_clock_bars(rows: list[dict], path: Path):
    """Pretraining wall-clock per run (one bar per unique run)."""
    seen: dict[str, float] = {}
    for row in rows:
        seen.setdefault(row["run"], float(row["wall_clock_s"]))
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    names = list(seen)
    ax.bar(range(len(names)), [seen[n] for n in names], color="#4878a8")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("pretraining wall clock (s)")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def effective_rank_curves(metric_files: dict[str, Path], path: Path):
    """Held-out effective rank per outer epoch, from each run's metrics.csv."""
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    for name, metrics_path in metric_files.items():
        with open(metrics_path, newline="") as f:
            reader = csv.DictReader(f)
            ranks = [float(r["effective_rank"]) for r in reader]
        ax.plot(range(len(ranks)), ranks, marker=".", label=name)
    ax.set_xlabel("outer epoch")
    ax.set_ylabel("held-out effective rank")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
