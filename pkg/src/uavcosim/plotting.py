"""Figures for a results directory (written as PNG next to the CSV files)."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .dse import RunResult  # noqa: E402
from .world import load_scenarios  # noqa: E402

BATTERY_ORDER = ("stock", "ufx", "cyclone", "lipol")


def _battery_rank(name: str) -> tuple:
    return (BATTERY_ORDER.index(name), name) if name in BATTERY_ORDER else (len(BATTERY_ORDER), name)


def plot_consumed_soc(results: list[RunResult], path: Path, scenario: str = "easy") -> Path | None:
    """Grouped bars per speed; equal-weight runs drawn as wider pale bars behind."""
    runs = [r for r in results if not r.error and r.scenario == scenario and r.policy == "constant"]
    if not runs:
        return None
    speeds = sorted({r.v_kmh for r in runs})
    batteries = sorted({r.battery for r in runs}, key=_battery_rank)
    width = 0.8 / len(batteries)
    fig, ax = plt.subplots(figsize=(7, 4))
    for k, b in enumerate(batteries):
        color = f"C{k}"
        for override, alpha, grow, label in ((True, 0.3, 1.3, None), (False, 1.0, 1.0, b)):
            xs, ys = [], []
            for i, v in enumerate(speeds):
                hit = [
                    r for r in runs
                    if r.battery == b and r.v_kmh == v and (r.weight_override_g is not None) == override
                ]
                if hit:
                    xs.append(i - 0.4 + width * (k + 0.5))
                    ys.append(100 * hit[0].consumed_soc)
            if xs:
                ax.bar(xs, ys, width * grow, color=color, alpha=alpha, label=label)
    ax.set_xticks(range(len(speeds)), [f"{v:g} km/h" for v in speeds])
    ax.set_ylabel("consumed SoC [%]")
    ax.set_title(f"{scenario}: consumed SoC (pale: equal weight)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _read_trajectory(path: str) -> tuple[list[float], list[float], list[tuple[float, float, str]]]:
    xs, ys, events = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            x, y = float(row["x"]), float(row["y"])
            xs.append(x)
            ys.append(y)
            if row["event"] in ("collision", "traversed", "missed"):
                events.append((x, y, row["event"]))
    return xs, ys, events


def plot_trajectories(results: list[RunResult], path: Path, scenario: str = "hard") -> Path | None:
    """Top-down paths, one panel per run, with the gate frame drawn in."""
    runs = [
        r for r in results
        if not r.error and r.scenario == scenario and r.trajectory_file and Path(r.trajectory_file).exists()
    ]
    if not runs:
        return None
    runs.sort(key=lambda r: (r.policy == "adaptive", r.v_kmh))
    gates = load_scenarios()[scenario].gates if scenario in load_scenarios() else []
    cols = min(3, len(runs))
    rows = math.ceil(len(runs) / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 4 * rows), squeeze=False)
    marker = {"collision": ("x", "red"), "traversed": ("o", "green"), "missed": ("s", "orange")}
    for ax, r in zip(axes.flat, runs):
        xs, ys, events = _read_trajectory(r.trajectory_file)
        # top-down, x forward (up the page), y to the right
        ax.plot(ys, xs, lw=1.2)
        for x, y, e in events:
            m, c = marker[e]
            ax.plot(y, x, m, color=c)
        for g in gates:
            for half, style in ((g.frame_outer_m / 2, "k-"), (g.opening_m / 2, "w-")):
                a = [g.center[k] - half * g.lateral[k] for k in (0, 1)]
                b = [g.center[k] + half * g.lateral[k] for k in (0, 1)]
                ax.plot([a[1], b[1]], [a[0], b[0]], style, lw=3)
        speed = "adaptive" if r.policy == "adaptive" else f"{r.v_kmh:g} km/h"
        ax.set_title(f"{speed}: {'traversed' if r.traversed else 'no traversal'}")
        ax.set_xlabel("y [m]")
        ax.set_ylabel("x [m]")
        ax.set_aspect("equal", adjustable="datalim")
    for ax in list(axes.flat)[len(runs):]:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_figures(results: list[RunResult], out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    made = [
        plot_consumed_soc(results, out_dir / "consumed_soc.png"),
        plot_trajectories(results, out_dir / "trajectories_hard.png"),
    ]
    return [p for p in made if p is not None]
