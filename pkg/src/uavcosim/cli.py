"""Command line: run, sweep, report, serve, calibrate."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import dse
from .protocol import Endpoint, PacketServer, registry_from_config
from .world import World, load_scenarios


def _system(args) -> dict:
    return dse.load_system_config(args.config)


def _transport(args) -> tuple[str, str | None]:
    if getattr(args, "attach", False):
        return "attach", str(Endpoint.parse(args.endpoint))
    return args.transport, args.endpoint


def cmd_run(args) -> int:
    system = _system(args)
    exp = dse.ExperimentConfig(
        scenario=args.scenario,
        battery=args.battery,
        weight_override_g=args.weight_override,
        policy="adaptive" if args.adaptive else "constant",
        v_kmh=args.speed,
        seed=args.seed,
        max_sim_time_s=args.max_sim_time,
    )
    transport, endpoint = _transport(args)
    result = dse.run_experiment(exp, system, transport, endpoint, args.out)
    if args.out:
        dse.write_results_csv([result], Path(args.out) / "results.csv")
    writer = csv.DictWriter(sys.stdout, fieldnames=dse.RESULT_FIELDS)
    writer.writeheader()
    writer.writerow(result.row())
    return 0 if result.completed else 2


def cmd_sweep(args) -> int:
    system = _system(args)
    configs = dse.load_campaign(args.campaign)
    if not configs:
        print(f"campaign {args.campaign} has no runs", file=sys.stderr)
        return 64
    transport, endpoint = _transport(args)
    out = Path(args.out)
    results = dse.sweep(configs, system, out, transport, endpoint, jobs=args.jobs)
    errored = [r for r in results if r.error]
    for r in errored:
        print(f"run {r.name} failed: {r.error}", file=sys.stderr)
    print(f"{len(results)} runs -> {out / 'results.csv'}")
    if not args.no_report and len(errored) < len(results):
        from .report import ReportError, render_summary, write_report

        try:
            summary = write_report(results, out)
        except ReportError as exc:
            print(f"report skipped: {exc}", file=sys.stderr)
        else:
            sys.stdout.write(render_summary(summary))
    return 1 if errored else 0


def cmd_report(args) -> int:
    from .report import ReportError, load_results_dir, render_summary, write_report

    try:
        summary = write_report(load_results_dir(args.inp), args.inp, figures=not args.no_figures)
    except ReportError as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(render_summary(summary))
    for p in summary.get("figures", []):
        print(f"figure: {p}")
    return 0


def cmd_serve(args) -> int:
    system = _system(args)
    registry = registry_from_config(system)
    scenario = load_scenarios(system.get("world", {}).get("scenarios"))[args.scenario]
    world = World(scenario, registry)
    server = PacketServer(args.endpoint, world.dispatch, registry).bind()
    logging.getLogger(__name__).info("world serving on %s", server.endpoint)
    print(f"listening on {server.endpoint}", file=sys.stderr, flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.stop()
    return 0


def cmd_calibrate(args) -> int:
    fm, t = dse.calibrate_figure_of_merit(args.target_s, args.battery, _system(args))
    print(f"figure_of_merit = {fm:.4f}  (hover endurance {t:.1f} s)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uavcosim", description="Drone/virtual-platform co-simulation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, transport_default="spawn"):
        sp.add_argument("--config", help="system config JSON (default: packaged)")
        sp.add_argument("--transport", choices=("spawn", "thread", "loopback"), default=transport_default,
                        help="how to reach the world (default: %(default)s)")
        sp.add_argument("--attach", action="store_true", help="connect to a running world server")
        sp.add_argument("--endpoint", default=None, help="unix:PATH or tcp:HOST:PORT (else $COSIM_ENDPOINT)")

    run = sub.add_parser("run", help="run one mission")
    common(run)
    run.add_argument("--scenario", default="easy")
    run.add_argument("--battery", default="stock")
    speed = run.add_mutually_exclusive_group()
    speed.add_argument("--speed", type=float, default=1.0, help="constant cruise speed, km/h")
    speed.add_argument("--adaptive", action="store_true", help="adaptive speed policy")
    run.add_argument("--weight-override", type=float, default=None, metavar="G")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--max-sim-time", type=float, default=dse.DEFAULT_MAX_SIM_TIME_S, metavar="S")
    run.add_argument("--out", default=None, metavar="DIR")
    run.set_defaults(func=cmd_run)

    sw = sub.add_parser("sweep", help="run a campaign file")
    common(sw)
    sw.add_argument("--campaign", required=True)
    sw.add_argument("--out", default="results", metavar="DIR")
    sw.add_argument("--jobs", type=int, default=1, help="parallel in-process runs")
    sw.add_argument("--no-report", action="store_true")
    sw.set_defaults(func=cmd_sweep)

    rp = sub.add_parser("report", help="derived metrics and figures for a results directory")
    rp.add_argument("--in", dest="inp", required=True, metavar="DIR")
    rp.add_argument("--no-figures", action="store_true")
    rp.set_defaults(func=cmd_report)

    sv = sub.add_parser("serve", help="run the world server in the foreground")
    sv.add_argument("--config")
    sv.add_argument("--endpoint", default=None)
    sv.add_argument("--scenario", default="easy")
    sv.set_defaults(func=cmd_serve)

    cal = sub.add_parser("calibrate", help="fit the rotor figure of merit to the hover endurance")
    cal.add_argument("--config")
    cal.add_argument("--battery", default="stock")
    cal.add_argument("--target-s", type=float, default=410.0)
    cal.set_defaults(func=cmd_calibrate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)
