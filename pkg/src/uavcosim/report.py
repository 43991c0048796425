"""Derived metrics over a results table: savings, extensions, speed trade-offs."""
from __future__ import annotations

import json
import math
import os
from pathlib import Path

from .dse import RunResult, read_results_csv
from .energy import load_battery_catalog

BASELINE_BATTERY = "stock"
KMH = 1 / 3.6


class ReportError(ValueError):
    pass


def _pct(num: float, den: float) -> float | None:
    if den == 0 or den is None or num is None:
        return None
    return 100.0 * num / den


def _speed(r: RunResult):
    return "adaptive" if r.policy == "adaptive" else round(float(r.v_kmh), 6)


def _key(r: RunResult, **changes) -> tuple:
    d = dict(
        scenario=r.scenario,
        battery=r.battery,
        policy=r.policy,
        speed=_speed(r),
        override=r.weight_override_g,
    )
    d.update(changes)
    return tuple(sorted(d.items()))


def _describe(key: tuple) -> str:
    return " ".join(f"{k}={v}" for k, v in key if v is not None)


def compare(baseline: RunResult, candidate: RunResult) -> dict:
    """Relative deltas of ``candidate`` against ``baseline`` (percent)."""
    b, c = baseline, candidate
    ttg = None
    if b.time_to_gate_s and c.time_to_gate_s is not None:
        ttg = _pct(b.time_to_gate_s - c.time_to_gate_s, b.time_to_gate_s)
    return {
        "baseline": b.name,
        "candidate": c.name,
        "soc_saving_pct": _pct(b.consumed_soc - c.consumed_soc, b.consumed_soc),
        "flight_time_extension_pct": _pct(c.flight_time_s - b.flight_time_s, b.flight_time_s),
        "extra_flight_time_s": c.flight_time_s - b.flight_time_s,
        "extra_distance_m": c.distance_m - b.distance_m,
        "distance_delta_pct": _pct(c.distance_m - b.distance_m, b.distance_m),
        "time_to_gate_improvement_pct": ttg,
        "remaining_soc_delta_pct": _pct(c.remaining_soc - b.remaining_soc, b.remaining_soc),
    }


def _battery_pairs(runs: list[RunResult], index: dict) -> list[dict]:
    out = []
    for r in runs:
        if r.battery == BASELINE_BATTERY:
            continue
        want = _key(r, battery=BASELINE_BATTERY)
        base = index.get(want)
        if base is None:
            raise ReportError(f"missing baseline run: {_describe(want)} (needed for {r.name})")
        row = compare(base, r)
        row.update(scenario=r.scenario, battery=r.battery, speed=_speed(r), weight_override_g=r.weight_override_g)
        out.append(row)
    return out


def _speed_pairs(runs: list[RunResult]) -> list[dict]:
    out = []
    for a in runs:
        if a.policy != "adaptive":
            continue
        constants = [
            r for r in runs
            if r.policy == "constant"
            and (r.scenario, r.battery, r.weight_override_g) == (a.scenario, a.battery, a.weight_override_g)
        ]
        if not constants:
            raise ReportError(
                f"missing baseline run: constant-speed runs for scenario={a.scenario} "
                f"battery={a.battery} (needed for {a.name})"
            )
        for c in sorted(constants, key=lambda r: r.v_kmh):
            row = compare(c, a)
            row.update(scenario=a.scenario, battery=a.battery, baseline_speed=_speed(c), baseline_traversed=c.traversed)
            out.append(row)
    return out


def _capacity_order(runs: list[RunResult], capacities: dict[str, float]) -> list[dict]:
    """Equal-weight groups: consumed SoC must fall as capacity rises."""
    groups: dict[tuple, list[RunResult]] = {}
    for r in runs:
        if r.weight_override_g is None:
            continue
        groups.setdefault((r.scenario, r.policy, _speed(r), r.weight_override_g), []).append(r)
    out = []
    for (scenario, policy, speed, w), members in sorted(groups.items(), key=lambda kv: str(kv[0])):
        known = [m for m in members if m.battery in capacities]
        violations = [
            f"{a.battery}>{b.battery}"
            for a in known for b in known
            if capacities[a.battery] < capacities[b.battery] and not a.consumed_soc > b.consumed_soc
        ]
        out.append(
            {
                "scenario": scenario,
                "speed": speed,
                "weight_override_g": w,
                "consumed_soc": {m.battery: m.consumed_soc for m in known},
                "inverse_to_capacity": not violations,
                "violations": violations,
            }
        )
    return out


def report(results: list[RunResult], catalog: dict | None = None) -> dict:
    """Summary dict; raises :class:`ReportError` naming any missing baseline."""
    runs = [r for r in results if not r.error]
    if not runs:
        raise ReportError("no successful runs to report on")
    catalog = catalog if catalog is not None else load_battery_catalog()
    index = {}
    for r in runs:
        index.setdefault(_key(r), r)
    return {
        "runs": len(results),
        "errored": [r.name for r in results if r.error],
        "battery_comparisons": _battery_pairs(runs, index),
        "speed_comparisons": _speed_pairs(runs),
        "equal_weight_order": _capacity_order(runs, {k: b.capacity_mAh for k, b in catalog.items()}),
        "per_run": {
            r.name: {
                "consumed_soc": r.consumed_soc,
                "remaining_soc": r.remaining_soc,
                "flight_time_s": r.flight_time_s,
                "time_to_gate_s": r.time_to_gate_s,
                "distance_m": r.distance_m,
                "traversed": r.traversed,
                "collisions": r.collisions,
                "motor_share": r.motor_share,
            }
            for r in runs
        },
    }


def _fmt(x, unit="%", digits=2) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "n/a"
    return f"{x:+.{digits}f}{unit}"


def render_summary(summary: dict) -> str:
    lines = [f"runs: {summary['runs']}  errored: {len(summary['errored'])}"]
    for name in summary["errored"]:
        lines.append(f"  error: {name}")
    if summary["battery_comparisons"]:
        lines.append("")
        lines.append("battery vs stock")
        for c in summary["battery_comparisons"]:
            w = f" @{c['weight_override_g']:g}g" if c["weight_override_g"] is not None else ""
            lines.append(
                f"  {c['scenario']:<6} {str(c['speed']):>8} {c['battery']:<8}{w:<8} "
                f"soc saving {_fmt(c['soc_saving_pct'])}  "
                f"flight time {_fmt(c['flight_time_extension_pct'])} ({_fmt(c['extra_flight_time_s'], ' s', 1)})  "
                f"distance {_fmt(c['extra_distance_m'], ' m', 1)}"
            )
    if summary["speed_comparisons"]:
        lines.append("")
        lines.append("adaptive vs constant speed")
        for c in summary["speed_comparisons"]:
            lines.append(
                f"  {c['scenario']:<6} vs {c['baseline_speed']:g} km/h"
                f"{'' if c['baseline_traversed'] else ' (no traversal)'}: "
                f"time to gate {_fmt(c['time_to_gate_improvement_pct'])}  "
                f"remaining soc {_fmt(c['remaining_soc_delta_pct'])}  "
                f"distance {_fmt(c['distance_delta_pct'])}"
            )
    if summary["equal_weight_order"]:
        lines.append("")
        lines.append("equal-weight capacity ordering")
        for g in summary["equal_weight_order"]:
            state = "ok" if g["inverse_to_capacity"] else "VIOLATED " + ",".join(g["violations"])
            lines.append(f"  {g['scenario']:<6} {str(g['speed']):>8} @{g['weight_override_g']:g}g: {state}")
    return "\n".join(lines) + "\n"


def load_results_dir(path: str | os.PathLike) -> list[RunResult]:
    d = Path(path)
    files = sorted(d.glob("results*.csv"))
    if not files:
        raise ReportError(f"no results*.csv in {d}")
    results = []
    for f in files:
        results.extend(read_results_csv(f))
    return results


def write_report(results: list[RunResult], out_dir: str | os.PathLike, figures: bool = True) -> dict:
    """summary.json + summary.txt (+ figures) in ``out_dir``; returns the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = report(results)
    text = render_summary(summary)
    if figures:
        from .plotting import render_figures

        summary["figures"] = [str(p) for p in render_figures(results, out)]
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=str) + "\n")
    (out / "summary.txt").write_text(text)
    return summary
