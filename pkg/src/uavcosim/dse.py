"""Experiment runner, sweeps and derived-metric reports."""
from __future__ import annotations

import copy
import csv
import dataclasses
import itertools
import json
import logging
import os
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import energy
from .energy import ConverterModel, MotorPowerModel, load_battery_catalog
from .mission import Mission, MissionConfig, YawPredictor
from .protocol import (
    Endpoint,
    LoopbackConnection,
    Packet,
    Registry,
    registry_from_config,
    transport_connect,
)
from .sync import Connector, SimClock
from .vp import SocModel, VirtualPlatform
from .world import Scenario, World, load_scenarios, serve

log = logging.getLogger(__name__)

DEFAULT_MAX_SIM_TIME_S = 900.0


def load_system_config(path: str | os.PathLike | None = None) -> dict:
    if path is None:
        return json.loads(resources.files("uavcosim.data").joinpath("system.json").read_text())
    with open(path) as fh:
        return json.load(fh)


@dataclass
class ExperimentConfig:
    scenario: str = "easy"
    battery: str = "stock"
    weight_override_g: float | None = None
    policy: str = "constant"
    v_kmh: float = 1.0
    seed: int = 0
    max_sim_time_s: float = DEFAULT_MAX_SIM_TIME_S
    name: str | None = None

    def __post_init__(self):
        if self.policy not in ("constant", "adaptive"):
            raise ValueError(f"unknown policy {self.policy!r}")
        if self.weight_override_g is not None and self.weight_override_g <= 0:
            raise ValueError("weight override must be positive")
        if self.name is None:
            self.name = self.default_name()

    def default_name(self) -> str:
        speed = "adaptive" if self.policy == "adaptive" else f"{self.v_kmh:g}kmh"
        w = f"_w{self.weight_override_g:g}" if self.weight_override_g is not None else ""
        return f"{self.scenario}_{self.battery}{w}_{speed}"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {k: d[k] for k in (f.name for f in dataclasses.fields(cls)) if k in d}
        return cls(**known)


@dataclass
class RunResult:
    name: str
    scenario: str
    battery: str
    weight_g: float
    policy: str
    v_kmh: float
    seed: int
    flight_time_s: float = 0.0
    initial_soc: float = 1.0
    consumed_soc: float = 0.0
    remaining_soc: float = 1.0
    distance_m: float = 0.0
    traversed: bool = False
    collided: bool = False
    collisions: int = 0
    missed: bool = False
    time_to_gate_s: float | None = None
    energy_motors_J: float = 0.0
    energy_soc_J: float = 0.0
    energy_camera_J: float = 0.0
    energy_avionics_J: float = 0.0
    battery_output_J: float = 0.0
    motor_share: float = 0.0
    land_reason: str | None = None
    completed: bool = False
    world_steps: int = 0
    iterations: int = 0
    error: str | None = None
    trajectory_file: str | None = None
    weight_override_g: float | None = None

    def row(self) -> dict:
        return dataclasses.asdict(self)


RESULT_FIELDS = tuple(f.name for f in dataclasses.fields(RunResult))


# -- building blocks ------------------------------------------------------------


def _module(system: dict, kind: str) -> dict:
    for m in system.get("modules", []):
        if m.get("kind", m.get("name")) == kind:
            return m
    return {}


def build_scenario(system: dict, exp: ExperimentConfig) -> Scenario:
    world_cfg = system.get("world", {})
    scenarios = load_scenarios(world_cfg.get("scenarios"))
    scenario = copy.deepcopy(scenarios[exp.scenario])
    if "world_step_us" in world_cfg:
        scenario.world_step_us = int(world_cfg["world_step_us"])
    if "hfov_deg" in world_cfg:
        scenario.camera.hfov_deg = float(world_cfg["hfov_deg"])
    if scenario.noise_sigma > 0:
        scenario.noise_seed = exp.seed
    return scenario


def scenario_to_dict(s: Scenario) -> dict:
    import math

    return {
        "id": s.id,
        "gates": [
            {
                "center": list(g.center),
                "normal_yaw_deg": math.degrees(g.normal_yaw),
                "opening_m": g.opening_m,
                "frame_outer_m": g.frame_outer_m,
                "thickness_m": g.thickness_m,
            }
            for g in s.gates
        ],
        "start": {"x": s.start[0], "y": s.start[1], "z": s.start[2], "heading_deg": math.degrees(s.start[3])},
        "world_step_us": s.world_step_us,
        "camera": {"width": s.camera.width, "height": s.camera.height, "hfov_deg": s.camera.hfov_deg},
        "noise_sigma": s.noise_sigma,
        "noise_seed": s.noise_seed,
        "skid_m": s.skid_m,
        "body_margin_m": s.body_margin_m,
    }


def build_vp(system: dict, exp: ExperimentConfig, connector: Connector, figure_of_merit: float | None = None):
    catalog = load_battery_catalog(system.get("power", {}).get("battery_catalog"))
    if exp.battery not in catalog:
        raise KeyError(f"battery {exp.battery!r} not in catalog ({', '.join(catalog)})")
    battery = catalog[exp.battery].copy(soc=1.0)

    motors = _module(system, "motors").get("power", {})
    weight_g = exp.weight_override_g if exp.weight_override_g is not None else battery.weight_g
    motor_model = MotorPowerModel.for_battery(
        weight_g,
        body_mass_kg=motors.get("body_mass_g", energy.BODY_MASS_KG * 1000) / 1000.0,
        figure_of_merit=figure_of_merit or motors.get("figure_of_merit", energy.FIGURE_OF_MERIT),
        eta_propel=motors.get("eta_propel", energy.ETA_PROPEL),
    )

    soc_cfg = _module(system, "soc")
    soc_power = soc_cfg.get("power", {})
    soc = SocModel(
        clock_mhz=soc_cfg.get("clock_mhz", 100.0),
        tasks=dict(soc_cfg.get("tasks", {"cnn_inference": 1_000_000})),
        power_states=dict(soc_power.get("states_mA", {"active": 25.0, "idle": 1.0})),
        rail=soc_power.get("rail", "v1p8"),
        rail_volts=soc_power.get("rail_volts", 1.8),
    )

    cam_cfg = _module(system, "camera")
    cam_power = cam_cfg.get("power", {})
    camera_kwargs = dict(
        active_current_mA=cam_power.get("active_mA", 1.75),
        idle_current_mA=cam_power.get("idle_mA", 0.14),
        frame_rate_fps=cam_cfg.get("frame_rate_fps", 60.0),
        rail=cam_power.get("rail", "v2p8"),
        rail_volts=cam_power.get("rail_volts", 2.8),
    )

    static = {
        m["name"]: m.get("power", {})
        for m in system.get("modules", [])
        if m.get("kind") == "static"
    }
    converters = {
        rail: ConverterModel(eff)
        for rail, eff in system.get("power", {}).get("converters", {"v1p8": 0.9, "v2p8": 0.9, "v3p0": 0.9}).items()
    }
    bus = system.get("bus", {})
    return VirtualPlatform(
        connector,
        battery,
        motor_model=motor_model,
        soc=soc,
        converters=converters,
        bus_latency_us=bus.get("latency_us", 1),
        poll_interval_us=bus.get("poll_interval_us", 1000),
        camera_kwargs=camera_kwargs,
        static_loads=static,
    )


def mission_config(system: dict, exp: ExperimentConfig) -> MissionConfig:
    base = dict(system.get("mission", {}))
    base.update(policy=exp.policy, v_kmh=exp.v_kmh, scenario=exp.scenario)
    return MissionConfig.from_dict(base)


# -- world process management ---------------------------------------------------


class WorldProcess:
    """World server as a child process (``python -m uavcosim serve``)."""

    def __init__(self, endpoint: str | None = None, system: dict | None = None):
        self._tmpdir = tempfile.TemporaryDirectory(prefix="uavcosim-")
        if endpoint is None:
            endpoint = f"unix:{os.path.join(self._tmpdir.name, 'world.sock')}"
        self.endpoint = Endpoint.parse(endpoint)
        cmd = [sys.executable, "-m", "uavcosim", "serve", "--endpoint", str(self.endpoint)]
        if system is not None:
            config_path = os.path.join(self._tmpdir.name, "system.json")
            with open(config_path, "w") as fh:
                json.dump(system, fh)
            cmd += ["--config", config_path]
        self.proc = subprocess.Popen(cmd)

    def connect(self, registry: Registry, timeout: float = 20.0):
        deadline = time.monotonic() + timeout
        while True:
            if self.proc.poll() is not None:
                raise ConnectionError(f"world process exited with {self.proc.returncode}")
            try:
                return transport_connect("client", self.endpoint, registry, timeout=5.0)
            except ConnectionError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.05)

    def close(self) -> None:
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self.proc.terminate()
            self.proc.wait(timeout=5)
        self._tmpdir.cleanup()


# -- running ----------------------------------------------------------------------


def run_experiment(
    exp: ExperimentConfig,
    system: dict | None = None,
    transport: str = "loopback",
    endpoint: str | None = None,
    out_dir: str | os.PathLike | None = None,
    figure_of_merit: float | None = None,
    keep: dict | None = None,
) -> RunResult:
    """Run one mission to Done (or the time budget).

    ``transport``: ``loopback`` (in-process, still framed), ``thread``
    (socket server in a thread), ``spawn`` (child world process) or
    ``attach`` (an already running server at ``endpoint``).
    ``keep``, if given, receives the live world/vp/mission objects for
    inspection by tests.
    """
    system = system if system is not None else load_system_config()
    registry = registry_from_config(system)
    scenario = build_scenario(system, exp)

    world = None
    server = None
    child = None
    if transport == "loopback":
        world = World(scenario, registry)
        conn = LoopbackConnection(world.dispatch, registry)
    elif transport == "thread":
        world, server = serve(scenario, endpoint or "tcp:127.0.0.1:0", registry)
        conn = transport_connect("client", server.endpoint, registry)
    elif transport == "spawn":
        child = WorldProcess(endpoint, system)
        conn = child.connect(registry)
    elif transport == "attach":
        conn = transport_connect("client", endpoint, registry)
    else:
        raise ValueError(f"unknown transport {transport!r}")

    try:
        reset = conn.request(Packet("RESET", 0, {"scenario": scenario_to_dict(scenario)}))
        if reset.status != "ok":
            raise RuntimeError(f"world refused RESET: {reset.payload}")
        clock = SimClock(world_step_us=scenario.world_step_us)
        connector = Connector(conn, clock)
        vp = build_vp(system, exp, connector, figure_of_merit)
        mcfg = mission_config(system, exp)
        mission = Mission(vp, mcfg, YawPredictor(gain=mcfg.predictor_gain))
        completed = mission.run(int(exp.max_sim_time_s * 1e6))
        state = vp.read_state() if not mission.battery_exhausted else (mission.last_state or {})
        result = _collect(exp, vp, mission, state, completed, connector)
        if keep is not None:
            keep.update(world=world, vp=vp, mission=mission, connector=connector)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            traj = out / f"trajectory_{exp.name}.csv"
            if world is not None:
                world.write_trajectory(traj)
                result.trajectory_file = str(traj)
            elif "GET_TRAJECTORY" in registry:
                table = connector.call("GET_TRAJECTORY").payload
                with open(traj, "w", newline="") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(table["fields"])
                    writer.writerows(table["rows"])
                result.trajectory_file = str(traj)
        conn.request(Packet("SHUTDOWN", clock.vp_time_us)) if transport in ("spawn", "thread") else None
        return result
    finally:
        if hasattr(conn, "close"):
            conn.close()
        if server is not None:
            server.stop()
        if child is not None:
            child.close()


def _collect(exp, vp, mission, state, completed, connector) -> RunResult:
    battery = vp.power.battery
    ledger = vp.power.ledger
    parts = ledger.by_component_J
    done_at = mission.transitions[-1][0] if mission.done else vp.now_us
    tt = state.get("traversal_time_us")
    weight = exp.weight_override_g if exp.weight_override_g is not None else battery.weight_g
    total = ledger.total_J
    return RunResult(
        name=exp.name,
        scenario=exp.scenario,
        battery=exp.battery,
        weight_g=weight,
        policy=exp.policy,
        v_kmh=exp.v_kmh if exp.policy == "constant" else float("nan"),
        seed=exp.seed,
        flight_time_s=done_at / 1e6,
        initial_soc=1.0,
        consumed_soc=1.0 - battery.soc,
        remaining_soc=battery.soc,
        distance_m=float(state.get("distance_m", 0.0)),
        traversed=bool(state.get("traversed", False)),
        collided=int(state.get("collisions", 0)) > 0,
        collisions=int(state.get("collisions", 0)),
        missed=bool(state.get("missed", False)),
        time_to_gate_s=None if tt is None else tt / 1e6,
        energy_motors_J=parts.get("motors", 0.0),
        energy_soc_J=parts.get("soc", 0.0),
        energy_camera_J=parts.get("camera", 0.0),
        energy_avionics_J=parts.get("avionics", 0.0),
        battery_output_J=ledger.battery_output_J,
        motor_share=parts.get("motors", 0.0) / total if total else 0.0,
        land_reason=mission.land_reason,
        completed=completed,
        world_steps=connector.total_steps,
        iterations=len(mission.records),
        weight_override_g=exp.weight_override_g,
    )


def sweep(
    configs: list[ExperimentConfig],
    system: dict | None = None,
    out_dir: str | os.PathLike | None = None,
    transport: str = "loopback",
    endpoint: str | None = None,
    jobs: int = 1,
) -> list[RunResult]:
    if not configs:
        raise ValueError("sweep needs at least one experiment configuration")
    system = system if system is not None else load_system_config()

    def one(exp: ExperimentConfig) -> RunResult:
        try:
            return run_experiment(exp, system, transport, endpoint, out_dir)
        except Exception as exc:  # recorded per row; the sweep carries on
            log.exception("run %s failed", exp.name)
            weight = exp.weight_override_g or 0.0
            return RunResult(
                exp.name, exp.scenario, exp.battery, weight, exp.policy, exp.v_kmh, exp.seed,
                error=f"{type(exc).__name__}: {exc}", weight_override_g=exp.weight_override_g,
            )

    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_run_for_pool, [(e, system, out_dir) for e in configs]))
    else:
        results = [one(e) for e in configs]
    if out_dir is not None:
        write_results_csv(results, Path(out_dir) / "results.csv")
    return results


def _run_for_pool(args) -> RunResult:
    exp, system, out_dir = args
    try:
        return run_experiment(exp, system, "loopback", None, out_dir)
    except Exception as exc:
        return RunResult(exp.name, exp.scenario, exp.battery, exp.weight_override_g or 0.0,
                         exp.policy, exp.v_kmh, exp.seed, error=f"{type(exc).__name__}: {exc}",
                         weight_override_g=exp.weight_override_g)


def write_results_csv(results: list[RunResult], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        writer.writeheader()
        for r in results:
            writer.writerow(r.row())


def _parse_cell(name: str, text: str):
    if text == "":
        return None
    types = {f.name: f.type for f in dataclasses.fields(RunResult)}
    t = str(types[name])
    if "bool" in t:
        return text == "True"
    if "int" in t and "float" not in t:
        return int(text)
    if "float" in t:
        return float(text)
    return text


def read_results_csv(path: str | os.PathLike) -> list[RunResult]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [RunResult(**{k: _parse_cell(k, v) for k, v in row.items()}) for row in rows]


def load_campaign(path: str | os.PathLike) -> list[ExperimentConfig]:
    """Campaign JSON: ``{"runs": [...]}`` and/or ``{"grid": {...}}``.

    Grid values that are lists are expanded as a Cartesian product.
    """
    with open(path) as fh:
        spec = json.load(fh)
    return expand_campaign(spec)


def expand_campaign(spec: dict) -> list[ExperimentConfig]:
    configs = [ExperimentConfig.from_dict(r) for r in spec.get("runs", [])]
    grids = spec.get("grid")
    if isinstance(grids, dict):
        grids = [grids]
    for grid in grids or []:
        keys = list(grid)
        values = [v if isinstance(v, list) else [v] for v in grid.values()]
        for combo in itertools.product(*values):
            configs.append(ExperimentConfig.from_dict(dict(zip(keys, combo))))
    return configs


def calibrate_figure_of_merit(
    target_s: float = 410.0, battery: str = "stock", system: dict | None = None, tol_s: float = 0.5
) -> tuple[float, float]:
    """Secant search for the figure of merit giving ``target_s`` of hover endurance.

    Endurance is close to linear in the figure of merit, so this converges in a
    few full-mission runs.
    """
    system = system if system is not None else load_system_config()
    exp = ExperimentConfig(scenario="open", battery=battery, v_kmh=0.0)

    def endurance(fm: float) -> float:
        return run_experiment(exp, system, figure_of_merit=fm).flight_time_s

    fm0 = energy.FIGURE_OF_MERIT
    t0 = endurance(fm0)
    fm1 = fm0 * target_s / t0
    t1 = endurance(fm1)
    for _ in range(8):
        if abs(t1 - target_s) <= tol_s or t1 == t0:
            break
        fm0, t0, fm1 = fm1, t1, fm1 + (target_s - t1) * (fm1 - fm0) / (t1 - t0)
        t1 = endurance(fm1)
    return fm1, t1
