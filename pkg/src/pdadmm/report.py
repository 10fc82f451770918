"""Figure rendering for recorded runs.

Reads the metrics JSONL and speedup CSV emitted by training and
benchmarking and writes PNG figures next to them. Kept separate from the
training path, which only ever emits machine-readable data.
"""

import csv
import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def _save(fig, out_dir, name):
    path = os.path.join(out_dir, name)
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return path


def render_metrics_figures(records, out_dir):
    """Objective, residual, accuracy, rate, and phase-time figures."""
    os.makedirs(out_dir, exist_ok=True)
    epochs = [r["epoch"] for r in records]
    written = []

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, [r["F"] for r in records], label="objective")
    ax.plot(epochs, [r["lagrangian"] for r in records], "--", label="augmented Lagrangian")
    ax.set_xlabel("epoch")
    ax.set_ylabel("value")
    ax.legend()
    written.append(_save(fig, out_dir, "objective.png"))

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.semilogy(
        epochs,
        [max(r["residual_norm_sq_total"], 1e-300) for r in records],
    )
    ax.set_xlabel("epoch")
    ax.set_ylabel("total squared residual")
    written.append(_save(fig, out_dir, "residual.png"))

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, [r["train_accuracy"] for r in records])
    ax.set_xlabel("epoch")
    ax.set_ylabel("training accuracy")
    ax.set_ylim(0.0, 1.0)
    written.append(_save(fig, out_dir, "accuracy.png"))

    if all(r.get("c_k") is not None for r in records):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.semilogy(
            epochs, [max(e * r["c_k"], 1e-300) for e, r in zip(epochs, records)]
        )
        ax.set_xlabel("epoch k")
        ax.set_ylabel("k * c_k")
        written.append(_save(fig, out_dir, "rate.png"))

    timings = [r.get("phase_times_ns") for r in records]
    if all(t for t in timings):
        phases = list(timings[0])
        fig, ax = plt.subplots(figsize=(5, 3.2))
        bottom = [0.0] * len(records)
        for phase in phases:
            values = [t[phase] / 1e6 for t in timings]
            ax.bar(epochs, values, bottom=bottom, label=phase, width=1.0)
            bottom = [b + v for b, v in zip(bottom, values)]
        ax.set_xlabel("epoch")
        ax.set_ylabel("phase time (ms)")
        ax.legend(ncol=3, fontsize=8)
        written.append(_save(fig, out_dir, "phase_times.png"))
    return written


def render_benchmark_figure(csv_path, out_dir):
    """Speedup vs hidden-layer count, one line per (width, workers)."""
    os.makedirs(out_dir, exist_ok=True)
    series = defaultdict(list)
    with open(csv_path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            key = (int(row["width"]), int(row["workers"]))
            series[key].append((int(row["layers"]), float(row["speedup"])))
    if not series:
        raise ValueError(f"{csv_path}: no benchmark rows")

    fig, ax = plt.subplots(figsize=(5, 3.2))
    for (width, workers), points in sorted(series.items()):
        points.sort()
        ax.plot(
            [p[0] for p in points],
            [p[1] for p in points],
            marker="o",
            label=f"width {width}, {workers} workers",
        )
    ax.axhline(1.0, color="gray", lw=0.8, ls=":")
    ax.set_xlabel("hidden layers")
    ax.set_ylabel("speedup over serial")
    ax.legend(fontsize=8)
    return [_save(fig, out_dir, "speedup.png")]
