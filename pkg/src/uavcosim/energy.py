"""Motor, battery, converter and power-bus models.

Units: powers in watts unless a name says ``_mW``; currents on the battery
side in mA; time steps in microseconds.
"""
from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

G = 9.81
AIR_DENSITY = 1.225
# 4 x 45 mm propellers
ROTOR_DISK_AREA_M2 = 4 * math.pi * 0.0225**2
# drone body + camera deck, without battery
BODY_MASS_KG = 0.0314
# Calibrated once so the stock battery hovers 6 min 50 s down to 10 % SoC;
# regenerate with `uavcosim calibrate`.
FIGURE_OF_MERIT = 0.2735
ETA_PROPEL = 0.7
NOMINAL_CELL_V = 3.7

US_PER_HOUR = 3_600_000_000

DEFAULT_OCV_ANCHORS = ((0.0, 3.00), (0.2, 3.70), (0.5, 3.80), (0.8, 3.95), (1.0, 4.20))


class BatteryExhausted(RuntimeError):
    pass


class PowerBusError(ArithmeticError):
    pass


@dataclass
class MotorPowerModel:
    mass_total_kg: float
    air_density: float = AIR_DENSITY
    rotor_disk_area_m2: float = ROTOR_DISK_AREA_M2
    figure_of_merit: float = FIGURE_OF_MERIT
    eta_propel: float = ETA_PROPEL
    g: float = G

    def __post_init__(self):
        for name in ("mass_total_kg", "air_density", "rotor_disk_area_m2", "g"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.figure_of_merit <= 1:
            raise ValueError("figure_of_merit must be in (0, 1]")
        if not 0 < self.eta_propel <= 1:
            raise ValueError("eta_propel must be in (0, 1]")

    @classmethod
    def for_battery(cls, battery_weight_g: float, body_mass_kg: float = BODY_MASS_KG, **kw):
        return cls(mass_total_kg=body_mass_kg + battery_weight_g / 1000.0, **kw)


def p_hover(model: MotorPowerModel) -> float:
    """Momentum-theory induced power divided by the figure of merit (W)."""
    thrust = model.mass_total_kg * model.g
    return math.sqrt(thrust**3 / (2.0 * model.air_density * model.rotor_disk_area_m2)) / model.figure_of_merit


def p_propel(model: MotorPowerModel, v_mps: float) -> float:
    if v_mps < 0:
        raise ValueError("speed must be non-negative")
    return model.mass_total_kg * model.g * v_mps / model.eta_propel


def total_motor_power(model: MotorPowerModel, v_mps: float, airborne: bool = True) -> float:
    if not airborne:
        return 0.0
    return p_hover(model) + p_propel(model, v_mps)


@dataclass
class BatteryModel:
    name: str
    capacity_mAh: float
    weight_g: float
    r_int_ohm: float = 0.2
    self_discharge_mA: float = 0.05
    ocv_anchors: tuple = DEFAULT_OCV_ANCHORS
    soc: float = 1.0

    def __post_init__(self):
        if self.capacity_mAh <= 0 or self.weight_g <= 0:
            raise ValueError("capacity and weight must be positive")
        if self.r_int_ohm < 0 or self.self_discharge_mA < 0:
            raise ValueError("r_int and self-discharge must be non-negative")
        anchors = sorted((float(s), float(v)) for s, v in self.ocv_anchors)
        socs = np.array([a[0] for a in anchors])
        volts = np.array([a[1] for a in anchors])
        if socs[0] != 0.0 or socs[-1] != 1.0:
            raise ValueError("OCV anchors must cover SoC 0 and 1")
        if np.any(np.diff(volts) < 0):
            raise ValueError("OCV curve must be non-decreasing in SoC")
        self.ocv_anchors = tuple(anchors)
        self._socs = socs
        self._volts = volts
        self._soc_list = socs.tolist()
        if not 0.0 <= self.soc <= 1.0:
            raise ValueError("soc must be in [0, 1]")

    @property
    def charge_mAus(self) -> float:
        """Full capacity expressed in mA*us."""
        return self.capacity_mAh * US_PER_HOUR

    @property
    def nominal_energy_Wh(self) -> float:
        return self.capacity_mAh / 1000.0 * NOMINAL_CELL_V

    def copy(self, **changes) -> "BatteryModel":
        fields = dict(
            name=self.name,
            capacity_mAh=self.capacity_mAh,
            weight_g=self.weight_g,
            r_int_ohm=self.r_int_ohm,
            self_discharge_mA=self.self_discharge_mA,
            ocv_anchors=self.ocv_anchors,
            soc=self.soc,
        )
        fields.update(changes)
        return BatteryModel(**fields)


def ocv(batt: BatteryModel, soc: float) -> float:
    """Piecewise-linear open-circuit voltage."""
    if not 0.0 <= soc <= 1.0:
        raise ValueError(f"soc {soc} outside [0, 1]")
    anchors = batt.ocv_anchors
    k = bisect.bisect_right(batt._soc_list, soc)
    if k >= len(anchors):
        return anchors[-1][1]
    (s0, v0), (s1, v1) = anchors[k - 1], anchors[k]
    return v0 + (v1 - v0) * (soc - s0) / (s1 - s0)


def battery_step(batt: BatteryModel, i_load_mA: float, dt_us: float) -> tuple[float, float]:
    """Coulomb-count one interval; returns ``(new_soc, terminal_voltage)``."""
    if dt_us < 0:
        raise ValueError("dt must be non-negative")
    if batt.soc <= 0.0:
        raise BatteryExhausted(f"battery {batt.name} is empty")
    drawn = (i_load_mA + batt.self_discharge_mA) * dt_us
    batt.soc = max(0.0, batt.soc - drawn / batt.charge_mAus)
    v_term = ocv(batt, batt.soc) - i_load_mA / 1000.0 * batt.r_int_ohm
    return batt.soc, v_term


@dataclass(frozen=True)
class ConverterModel:
    efficiency: float = 0.9

    def __post_init__(self):
        if not 0 < self.efficiency <= 1:
            raise ValueError("efficiency must be in (0, 1]")

    def input_power(self, p_out: float) -> float:
        return p_out / self.efficiency


@dataclass
class Load:
    rail: str
    rail_volts: float
    power_W: float = 0.0

    def set_current_mA(self, current_mA: float) -> None:
        self.power_W = current_mA / 1000.0 * self.rail_volts


@dataclass
class EnergyLedger:
    """Battery-side energy per component plus what the battery delivered."""

    by_component_J: dict[str, float] = field(default_factory=dict)
    battery_output_J: float = 0.0
    charge_mAus: float = 0.0
    elapsed_us: int = 0

    @property
    def total_J(self) -> float:
        return sum(self.by_component_J.values())

    def share(self, component: str) -> float:
        total = self.total_J
        return self.by_component_J.get(component, 0.0) / total if total else 0.0


BATTERY_RAIL = "vbat"


class PowerBus:
    """Loads on named rails, fed from one battery through per-rail converters.

    The ``vbat`` rail connects straight to the battery (no converter).
    """

    max_iterations = 20
    tolerance_mA = 1e-6

    def __init__(self, battery: BatteryModel, converters: dict[str, ConverterModel] | None = None):
        self.battery = battery
        self.converters = dict(converters or {})
        self.loads: dict[str, Load] = {}
        self.ledger = EnergyLedger()
        self.last_v_term = ocv(battery, battery.soc)
        self.last_current_mA = 0.0

    def attach(self, component: str, rail: str, rail_volts: float) -> Load:
        if rail != BATTERY_RAIL and rail not in self.converters:
            raise KeyError(f"no converter for rail {rail!r}")
        load = Load(rail, rail_volts)
        self.loads[component] = load
        self.ledger.by_component_J.setdefault(component, 0.0)
        return load

    def efficiency(self, rail: str) -> float:
        if rail == BATTERY_RAIL:
            return 1.0
        return self.converters[rail].efficiency

    def battery_side_power(self) -> dict[str, float]:
        return {
            name: load.power_W / self.efficiency(load.rail) for name, load in self.loads.items()
        }

    def solve_current(self, p: float | None = None) -> tuple[float, float]:
        """Fixed-point solve of ``v_term(i) * i = P``; returns ``(i_load_mA, v_term)``."""
        if p is None:
            p = sum(self.battery_side_power().values())
        v_oc = ocv(self.battery, self.battery.soc)
        if p == 0.0:
            return 0.0, v_oc
        r = self.battery.r_int_ohm
        i = p / v_oc
        for _ in range(self.max_iterations):
            v = v_oc - i * r
            if v <= 0:
                raise PowerBusError(f"terminal voltage collapsed at {i:.3f} A")
            i_next = p / v
            if abs(i_next - i) * 1000.0 < self.tolerance_mA:
                i = i_next
                return i * 1000.0, v_oc - i * r
            i = i_next
        raise PowerBusError(f"power bus did not converge for P={p:.3f} W, r_int={r} ohm")


def power_bus_solve(bus: PowerBus, dt_us: int) -> float:
    """Solve the battery current for the present loads and discharge for ``dt_us``.

    Returns the total battery current in mA, self-discharge included.
    """
    batt = bus.battery
    if batt.soc <= 0.0:
        raise BatteryExhausted(f"battery {batt.name} is empty")
    powers = bus.battery_side_power()
    i_load, v_term = bus.solve_current(sum(powers.values()))
    if dt_us > 0:
        seconds = dt_us * 1e-6
        ledger = bus.ledger
        for name, p in powers.items():
            ledger.by_component_J[name] = ledger.by_component_J.get(name, 0.0) + p * seconds
        ledger.battery_output_J += v_term * i_load / 1000.0 * seconds
        ledger.charge_mAus += (i_load + batt.self_discharge_mA) * dt_us
        ledger.elapsed_us += dt_us
        battery_step(batt, i_load, dt_us)
    bus.last_v_term = v_term
    bus.last_current_mA = i_load + batt.self_discharge_mA
    return bus.last_current_mA


# -- battery catalog ----------------------------------------------------------


def _catalog_entries(path: str | Path | None):
    if path is None:
        text = resources.files("uavcosim.data").joinpath("batteries.json").read_text()
    else:
        text = Path(path).read_text()
    return json.loads(text)


def load_battery_catalog(path: str | Path | None = None) -> dict[str, BatteryModel]:
    catalog = {}
    for entry in _catalog_entries(path):
        kwargs = dict(
            name=entry["name"],
            capacity_mAh=entry["capacity_mAh"],
            weight_g=entry["weight_g"],
            r_int_ohm=entry.get("r_int_ohm", 0.2),
            self_discharge_mA=entry.get("self_discharge_mA", 0.05),
        )
        if entry.get("ocv_anchors"):
            kwargs["ocv_anchors"] = tuple(tuple(a) for a in entry["ocv_anchors"])
        if kwargs["name"] in catalog:
            raise ValueError(f"duplicate battery {kwargs['name']!r}")
        catalog[kwargs["name"]] = BatteryModel(**kwargs)
    return catalog
