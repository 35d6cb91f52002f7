"""Figure rendering for experiment reports and benchmark ladders.

Renders with the Agg backend so headless runs work. Each figure has a
*_data companion returning the rows behind it; the CLI writes those rows as
CSV next to the image when plot data is requested, so the numbers feeding a
figure are always inspectable.
"""

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .core import EmptyDataError

METRIC_BARS_COLUMNS = ("loss", "thc", "tha")
BENCH_CURVES_COLUMNS = ("n_users", "strategy", "objective_ratio", "runtime_ms")


def metric_bars_data(rows):
    """One row per loss kind with its THC/THA, in order of first appearance.

    THC/THA depend only on the predicted matrix, so strategies sharing a loss
    repeat the same pair; the first row of each loss is taken.
    """
    if not rows:
        raise EmptyDataError("no report rows to plot")
    seen = {}
    for row in rows:
        if row.loss not in seen:
            seen[row.loss] = {"loss": row.loss, "thc": row.thc, "tha": row.tha}
    return list(seen.values())


def save_metric_bars(rows, path):
    """Bar chart of THC and THA per loss kind; returns the data rows."""
    data = metric_bars_data(rows)
    losses = [d["loss"] for d in data]
    fig, axes = plt.subplots(1, 2, figsize=(8.0, 3.6))
    for ax, key, label in ((axes[0], "thc", "total hit conversions"),
                           (axes[1], "tha", "total hit amount")):
        ax.bar(range(len(data)), [d[key] for d in data], width=0.6,
               color=plt.rcParams["axes.prop_cycle"].by_key()["color"][:len(data)])
        ax.set_xticks(range(len(data)))
        ax.set_xticklabels(losses)
        ax.set_ylabel(label)
        ax.grid(axis="y", alpha=0.3)
    fig.suptitle("argmax assignment scored on simulated outcomes")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return data


def bench_curves_data(cells):
    if not cells:
        raise EmptyDataError("no benchmark cells to plot")
    return [
        {
            "n_users": c.n_users,
            "strategy": c.strategy,
            "objective_ratio": c.objective_ratio,
            "runtime_ms": c.runtime_ms,
        }
        for c in cells
    ]


def save_bench_curves(cells, path):
    """Objective ratio and runtime against instance size; returns data rows."""
    data = bench_curves_data(cells)
    strategies = []
    for d in data:
        if d["strategy"] not in strategies:
            strategies.append(d["strategy"])
    fig, (ax_ratio, ax_time) = plt.subplots(1, 2, figsize=(8.0, 3.6))
    for name in strategies:
        pts = [d for d in data if d["strategy"] == name]
        sizes = [d["n_users"] for d in pts]
        ratios = [(d["n_users"], d["objective_ratio"]) for d in pts
                  if d["objective_ratio"] is not None]
        if ratios:
            ax_ratio.plot([r[0] for r in ratios], [r[1] for r in ratios],
                          marker="o", label=name)
        ax_time.plot(sizes, [d["runtime_ms"] / 1000.0 for d in pts],
                     marker="o", label=name)
    ax_ratio.set_xlabel("users")
    ax_ratio.set_ylabel("objective / exact objective")
    ax_ratio.set_xscale("log")
    ax_ratio.grid(alpha=0.3)
    ax_ratio.legend()
    ax_time.set_xlabel("users")
    ax_time.set_ylabel("wall time (s)")
    ax_time.set_xscale("log")
    ax_time.set_yscale("log")
    ax_time.grid(alpha=0.3, which="both")
    ax_time.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return data


def write_plot_data(data, columns, path) -> None:
    """CSV dump of a figure's data rows; None renders as an empty field."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in data:
            w.writerow(["" if row[c] is None else row[c] for c in columns])
