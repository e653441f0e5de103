"""Figure rendering for the report path.

Consumes the CSVs produced by ``harness.export_plot_data`` and writes
PNGs next to them, so the delimited output stays the source of truth
and the figures are a view over it.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  backend must be set first


def _read_table(path: Path):
    lines = path.read_text(encoding="utf-8").strip().split("\n")
    header = lines[0].split(",")
    rows = [line.split(",") for line in lines[1:]]
    return header, rows


def render_task_step_figure(task_csv, out_path) -> Path:
    """Per-task-step NLL curves, one line per model label."""
    header, rows = _read_table(Path(task_csv))
    steps = [int(r[0]) for r in rows]
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for col, label in enumerate(header[1:], 1):
        ax.plot(steps, [float(r[col]) for r in rows], marker="o", label=label)
    ax.set_xlabel("task step")
    ax.set_ylabel("target NLL")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def render_wall_clock_figure(wall_csv, out_path) -> Path:
    """Mean NLL against training wall-clock, one line per label."""
    _, rows = _read_table(Path(wall_csv))
    series = {}
    for label, _, clock, nll in rows:
        series.setdefault(label, ([], []))
        series[label][0].append(float(clock))
        series[label][1].append(float(nll))
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for label, (clocks, nlls) in series.items():
        ax.plot(clocks, nlls, label=label)
    ax.set_xlabel("wall clock (s)")
    ax.set_ylabel("mean target NLL")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def render_report(task_csv, wall_csv) -> list:
    """Render both figures next to the task-step CSV; returns PNG paths."""
    task_csv = Path(task_csv)
    base = task_csv.with_suffix("")
    return [
        render_task_step_figure(task_csv, Path(f"{base}_vs_task_step.png")),
        render_wall_clock_figure(wall_csv, Path(f"{base}_vs_wall_clock.png")),
    ]
