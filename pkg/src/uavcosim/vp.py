"""Virtual platform: SoC task model, functional bus and memory-mapped peripherals.

Everything here runs in one sequential thread of control.  Time only moves
through :meth:`VirtualPlatform.advance`, which integrates the power bus over
the elapsed interval and fires scheduled peripheral events on the way.
"""
from __future__ import annotations

import heapq
import itertools
import struct
from dataclasses import dataclass, field
from typing import Callable

from .energy import (
    BATTERY_RAIL,
    BatteryModel,
    ConverterModel,
    MotorPowerModel,
    PowerBus,
    power_bus_solve,
    total_motor_power,
)
from .protocol import b64decode_str
from .sync import Connector, SimClock

CAMERA_BASE = 0x4000_0000
FRAME_OFFSET = 0x1000
MOTOR_BASE = 0x4002_0000
STATE_BASE = 0x4003_0000

CAM_STATUS, CAM_CTRL = 0x0, 0x4
IDLE, BUSY, READY = 0, 1, 2
STATUS_NAMES = {IDLE: "idle", BUSY: "busy", READY: "ready"}

MOTOR_CMD = struct.Struct("<3d")  # v_mps, yaw_rate, vz_mps at offset 0
MOTOR_ARM_OFFSET = MOTOR_CMD.size
STATE_STRUCT = struct.Struct("<5dq4i")
STATE_FIELDS = (
    "x", "y", "z", "heading", "distance_m", "traversal_time_us",
    "airborne", "traversed", "missed", "collisions",
)


class BusError(Exception):
    pass


class CaptureError(RuntimeError):
    pass


@dataclass
class FunctionalBusRequest:
    address: int
    access: str  # "read" | "write"
    data: bytes
    latency_us: int


class Peripheral:
    size = 0

    def read(self, offset: int, length: int) -> bytes:
        raise BusError(f"{type(self).__name__} is write-only at +{offset:#x}")

    def write(self, offset: int, data: bytes) -> None:
        raise BusError(f"{type(self).__name__} is read-only at +{offset:#x}")


class FunctionalBus:
    def __init__(self, vp: "VirtualPlatform", latency_us: int = 1):
        self.vp = vp
        self.latency_us = latency_us
        self.regions: list[tuple[int, int, Peripheral]] = []
        self.log: list[FunctionalBusRequest] | None = None

    def map(self, base: int, peripheral: Peripheral) -> None:
        end = base + peripheral.size
        for b, e, _ in self.regions:
            if base < e and b < end:
                raise BusError(f"region {base:#x}..{end:#x} overlaps {b:#x}..{e:#x}")
        self.regions.append((base, end, peripheral))

    def _route(self, addr: int, length: int) -> tuple[Peripheral, int]:
        for base, end, dev in self.regions:
            if base <= addr < end:
                if addr + length > end:
                    raise BusError(f"access {addr:#x}+{length} crosses the end of its region")
                return dev, addr - base
        raise BusError(f"unmapped address {addr:#x}")

    def read(self, addr: int, length: int) -> bytes:
        dev, off = self._route(addr, length)
        data = dev.read(off, length)
        self._charge(FunctionalBusRequest(addr, "read", data, self.latency_us))
        return data

    def write(self, addr: int, data: bytes) -> None:
        dev, off = self._route(addr, len(data))
        dev.write(off, bytes(data))
        self._charge(FunctionalBusRequest(addr, "write", bytes(data), self.latency_us))

    def _charge(self, req: FunctionalBusRequest) -> None:
        if self.log is not None:
            self.log.append(req)
        self.vp.advance(req.latency_us)


class CameraPeripheral(Peripheral):
    """Status/control registers plus a frame buffer at +0x1000."""

    def __init__(
        self,
        vp: "VirtualPlatform",
        width: int = 320,
        height: int = 320,
        active_current_mA: float = 1.75,
        idle_current_mA: float = 0.14,
        frame_rate_fps: float = 60.0,
        rail: str = "v2p8",
        rail_volts: float = 2.8,
        on_ready: Callable[[], None] | None = None,
    ):
        self.vp = vp
        self.width, self.height = width, height
        self.frame_bytes = width * height
        self.size = FRAME_OFFSET + self.frame_bytes
        self.active_current_mA = active_current_mA
        self.idle_current_mA = idle_current_mA
        self.frame_rate_fps = frame_rate_fps
        self.frame_period_us = round(1e6 / frame_rate_fps)
        self.status = IDLE
        self.frame_buffer = bytes(self.frame_bytes)
        self.on_ready = on_ready
        self._pending: bytes | None = None
        self.load = vp.power.attach("camera", rail, rail_volts)
        self._set_status(IDLE)

    def _set_status(self, status: int) -> None:
        self.status = status
        self.load.set_current_mA(self.active_current_mA if status == BUSY else self.idle_current_mA)

    @property
    def status_name(self) -> str:
        return STATUS_NAMES[self.status]

    def read(self, offset: int, length: int) -> bytes:
        if offset == CAM_STATUS and length == 4:
            return struct.pack("<I", self.status)
        if offset >= FRAME_OFFSET:
            if self.status != READY:
                raise BusError("frame buffer read while camera is not ready")
            start = offset - FRAME_OFFSET
            return self.frame_buffer[start : start + length]
        raise BusError(f"camera has no readable register at +{offset:#x}")

    def write(self, offset: int, data: bytes) -> None:
        if offset == CAM_CTRL and len(data) == 4:
            if struct.unpack("<I", data)[0] == 1:
                self.start_capture()
            return
        raise BusError(f"camera has no writable register at +{offset:#x}")

    def start_capture(self) -> None:
        if self.status == BUSY:
            raise BusError("capture requested while camera is busy")
        self._set_status(BUSY)
        try:
            resp = self.vp.connector.call("GET_DATA")
            frame = b64decode_str(resp.payload["image"])
        except Exception as exc:
            self._set_status(IDLE)
            raise CaptureError(f"capture aborted: {exc}") from exc
        if len(frame) != self.frame_bytes:
            self._set_status(IDLE)
            raise CaptureError(f"expected {self.frame_bytes} bytes, got {len(frame)}")
        self._pending = frame
        self.vp.schedule(self.vp.clock.vp_time_us + self.frame_period_us, self._frame_done)

    def _frame_done(self) -> None:
        self.frame_buffer = self._pending
        self._pending = None
        self._set_status(READY)
        if self.on_ready is not None:
            self.on_ready()


class MotorController(Peripheral):
    """Command registers (3 x f64) and an arm register (u32).

    The motors draw hover + propulsion power from the battery rail while
    armed.  A changed command is forwarded to the world once.
    """

    size = 0x100

    def __init__(self, vp: "VirtualPlatform", model: MotorPowerModel):
        self.vp = vp
        self.model = model
        self.commanded_speed_mps = 0.0
        self.commanded_yaw_rate = 0.0
        self.commanded_vz_mps = 0.0
        self.armed = False
        self.forwarded = 0
        self.load = vp.power.attach("motors", BATTERY_RAIL, 0.0)

    def _update_power(self) -> None:
        self.load.power_W = total_motor_power(self.model, self.commanded_speed_mps, self.armed)

    def read(self, offset: int, length: int) -> bytes:
        if offset == 0 and length == MOTOR_CMD.size:
            return MOTOR_CMD.pack(self.commanded_speed_mps, self.commanded_yaw_rate, self.commanded_vz_mps)
        if offset == MOTOR_ARM_OFFSET and length == 4:
            return struct.pack("<I", int(self.armed))
        raise BusError(f"motor controller has no register at +{offset:#x}")

    def write(self, offset: int, data: bytes) -> None:
        if offset == 0 and len(data) == MOTOR_CMD.size:
            v, yaw, vz = MOTOR_CMD.unpack(data)
            if v < 0 or not -1.0 <= yaw <= 1.0:
                raise BusError(f"motor command out of range: v={v}, yaw={yaw}")
            new = (v, yaw, vz)
            if new != (self.commanded_speed_mps, self.commanded_yaw_rate, self.commanded_vz_mps):
                self.vp.connector.call("SET_MOTOR", {"v_mps": v, "yaw_rate": yaw, "vz_mps": vz})
                self.forwarded += 1
                self.commanded_speed_mps, self.commanded_yaw_rate, self.commanded_vz_mps = new
                self._update_power()
            return
        if offset == MOTOR_ARM_OFFSET and len(data) == 4:
            self.armed = bool(struct.unpack("<I", data)[0])
            self._update_power()
            return
        raise BusError(f"motor controller has no register at +{offset:#x}")


class StateSensor(Peripheral):
    """Pose/telemetry as seen by the flight controller; a read samples the world."""

    size = STATE_STRUCT.size

    def __init__(self, vp: "VirtualPlatform"):
        self.vp = vp

    def read(self, offset: int, length: int) -> bytes:
        if offset != 0 or length != STATE_STRUCT.size:
            raise BusError("state sensor must be read as one record")
        s = self.vp.connector.call("GET_STATE").payload
        tt = s.get("traversal_time_us")
        return STATE_STRUCT.pack(
            s["x"], s["y"], s["z"], s["heading"], s["distance_m"],
            -1 if tt is None else int(tt),
            int(s["airborne"]), int(s["traversed"]), int(s["missed"]), int(s["collisions"]),
        )


@dataclass
class SocModel:
    clock_mhz: float = 100.0
    tasks: dict[str, int] = field(default_factory=lambda: {"cnn_inference": 1_000_000})
    power_states: dict[str, float] = field(default_factory=lambda: {"active": 25.0, "idle": 1.0})
    rail: str = "v1p8"
    rail_volts: float = 1.8
    current_state: str = "idle"

    def task_time_us(self, task: str) -> int:
        if task not in self.tasks:
            raise KeyError(f"unknown task {task!r}")
        return round(self.tasks[task] / self.clock_mhz)


class VirtualPlatform:
    def __init__(
        self,
        connector: Connector,
        battery: BatteryModel,
        motor_model: MotorPowerModel | None = None,
        soc: SocModel | None = None,
        converters: dict[str, ConverterModel] | None = None,
        bus_latency_us: int = 1,
        poll_interval_us: int = 1000,
        camera_kwargs: dict | None = None,
        static_loads: dict[str, dict] | None = None,
    ):
        self.connector = connector
        self.clock: SimClock = connector.clock
        self.power = PowerBus(
            battery,
            converters if converters is not None else {r: ConverterModel(0.9) for r in ("v1p8", "v2p8", "v3p0")},
        )
        self.soc = soc or SocModel()
        self.soc_load = self.power.attach("soc", self.soc.rail, self.soc.rail_volts)
        self._set_soc_state(self.soc.current_state)
        for name, spec in (static_loads or {}).items():
            load = self.power.attach(name, spec["rail"], spec.get("rail_volts", 3.0))
            if "current_mA" in spec:
                load.set_current_mA(spec["current_mA"])
            else:
                load.power_W = spec.get("power_mW", 0.0) / 1000.0
        self.poll_interval_us = poll_interval_us
        self._events: list = []
        self._seq = itertools.count()
        self.bus = FunctionalBus(self, bus_latency_us)
        self.camera = CameraPeripheral(self, **(camera_kwargs or {}))
        self.motors = MotorController(self, motor_model or MotorPowerModel.for_battery(battery.weight_g))
        self.state_sensor = StateSensor(self)
        self.bus.map(CAMERA_BASE, self.camera)
        self.bus.map(MOTOR_BASE, self.motors)
        self.bus.map(STATE_BASE, self.state_sensor)

    # -- time ---------------------------------------------------------------

    @property
    def now_us(self) -> int:
        return self.clock.vp_time_us

    def schedule(self, t_us: int, callback: Callable[[], None]) -> None:
        heapq.heappush(self._events, (t_us, next(self._seq), callback))

    def next_event_us(self) -> int | None:
        return self._events[0][0] if self._events else None

    def _integrate(self, dt: int) -> None:
        if dt > 0:
            power_bus_solve(self.power, dt)
            self.clock.advance_vp(dt)

    def advance(self, delta_us: int) -> None:
        """Move VP time forward, charging every microsecond to the power bus once."""
        if delta_us < 0:
            raise ValueError("delta must be non-negative")
        target = self.clock.vp_time_us + int(delta_us)
        while self._events and self._events[0][0] <= target:
            t, _, callback = heapq.heappop(self._events)
            self._integrate(max(t - self.clock.vp_time_us, 0))
            callback()
        self._integrate(target - self.clock.vp_time_us)

    # -- SoC ------------------------------------------------------------------

    def _set_soc_state(self, state: str) -> None:
        self.soc.current_state = state
        self.soc_load.set_current_mA(self.soc.power_states[state])

    def run_task(self, task: str) -> int:
        elapsed = self.soc.task_time_us(task)
        self._set_soc_state("active")
        try:
            self.advance(elapsed)
        finally:
            self._set_soc_state("idle")
        return elapsed

    # -- bus helpers --------------------------------------------------------

    def bus_read(self, addr: int, length: int) -> bytes:
        return self.bus.read(addr, length)

    def bus_write(self, addr: int, data: bytes) -> None:
        self.bus.write(addr, data)

    def camera_status(self) -> str:
        return STATUS_NAMES[struct.unpack("<I", self.bus_read(CAMERA_BASE + CAM_STATUS, 4))[0]]

    def camera_capture(self, use_interrupt: bool = False) -> None:
        """Trigger a frame and wait for it, by polling (default) or completion event."""
        self.bus_write(CAMERA_BASE + CAM_CTRL, struct.pack("<I", 1))
        if use_interrupt:
            done = self.next_event_us()
            if done is not None and done > self.now_us:
                self.advance(done - self.now_us)
            return
        while self.camera_status() != "ready":
            wait = self.poll_interval_us
            due = self.next_event_us()
            if due is not None:
                wait = max(min(wait, due - self.now_us), 0)
            self.advance(wait)

    def read_frame(self) -> bytes:
        return self.bus_read(CAMERA_BASE + FRAME_OFFSET, self.camera.frame_bytes)

    def set_motors(self, v_mps: float, yaw_rate: float, vz_mps: float = 0.0) -> None:
        if not -1.0 <= yaw_rate <= 1.0:
            raise ValueError(f"yaw_rate {yaw_rate} outside [-1, 1]")
        if v_mps < 0:
            raise ValueError("speed must be non-negative")
        self.bus_write(MOTOR_BASE, MOTOR_CMD.pack(float(v_mps), float(yaw_rate), float(vz_mps)))

    def arm(self, on: bool = True) -> None:
        self.bus_write(MOTOR_BASE + MOTOR_ARM_OFFSET, struct.pack("<I", int(on)))

    def read_state(self) -> dict:
        values = STATE_STRUCT.unpack(self.bus_read(STATE_BASE, STATE_STRUCT.size))
        d = dict(zip(STATE_FIELDS, values))
        for k in ("airborne", "traversed", "missed"):
            d[k] = bool(d[k])
        if d["traversal_time_us"] < 0:
            d["traversal_time_us"] = None
        return d
