"""Fixed-timestep world: drone kinematics, gates, camera rendering, dispatch.

Frame convention: x forward at the start pose, y to the right, z up.
Heading is measured from +x towards +y, so a positive yaw command turns the
drone right, and image columns grow in the +y direction.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from .protocol import Packet, PacketServer, Registry, b64encode_bytes, error_response
from .sync import DEFAULT_WORLD_STEP_US

OMEGA_MAX = 1.0  # rad/s at |yaw command| = 1
DRONE_SIZE_M = (0.092, 0.092, 0.029)
BACKGROUND = 224
FRAME_PIXEL = 32
NEAR_PLANE_M = 0.01

NONE, TRAVERSED, COLLIDED = "none", "traversed", "collided"


@dataclass
class DroneState:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    heading: float = 0.0
    v_cmd: float = 0.0
    yaw_rate_cmd: float = 0.0
    vz_cmd: float = 0.0
    airborne: bool = False

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


@dataclass
class GateSpec:
    center: tuple[float, float, float]
    normal_yaw: float = 0.0  # direction of travel through the gate
    opening_m: float = 0.40
    frame_outer_m: float = 0.60
    thickness_m: float = 0.03

    def __post_init__(self):
        if not 0 < self.opening_m < self.frame_outer_m:
            raise ValueError("gate opening must be smaller than its outer frame")
        self.center = tuple(float(c) for c in self.center)

    @property
    def normal(self) -> np.ndarray:
        return np.array([math.cos(self.normal_yaw), math.sin(self.normal_yaw), 0.0])

    @property
    def lateral(self) -> np.ndarray:
        return np.array([-math.sin(self.normal_yaw), math.cos(self.normal_yaw), 0.0])

    def local(self, p) -> tuple[float, float, float]:
        """(along-normal, lateral, vertical) offsets of ``p`` from the gate center."""
        d = np.asarray(p, dtype=float) - np.array(self.center)
        return float(d @ self.normal), float(d @ self.lateral), float(d[2])

    def corners(self, half: float) -> np.ndarray:
        c = np.array(self.center)
        a = self.lateral
        up = np.array([0.0, 0.0, 1.0])
        return np.array(
            [c + sa * half * a + sz * half * up for sa, sz in ((-1, -1), (1, -1), (1, 1), (-1, 1))]
        )


@dataclass
class CameraIntrinsics:
    width: int = 320
    height: int = 320
    hfov_deg: float = 80.0

    def __post_init__(self):
        if not 0 < self.hfov_deg < 180:
            raise ValueError("FoV must be in (0, 180) degrees")

    @property
    def focal_px(self) -> float:
        # square pixels: one focal length for both axes
        return (self.width / 2.0) / math.tan(math.radians(self.hfov_deg) / 2.0)


@dataclass
class Scenario:
    id: str
    gates: list[GateSpec] = field(default_factory=list)
    start: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)  # x, y, z, heading
    world_step_us: int = DEFAULT_WORLD_STEP_US
    camera: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    noise_sigma: float = 0.0
    noise_seed: int | None = None
    skid_m: float = 0.05
    body_margin_m: float = DRONE_SIZE_M[0] / 2

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        gates = [
            GateSpec(
                center=g["center"],
                normal_yaw=math.radians(g.get("normal_yaw_deg", 0.0)),
                opening_m=g.get("opening_m", 0.40),
                frame_outer_m=g.get("frame_outer_m", 0.60),
                thickness_m=g.get("thickness_m", 0.03),
            )
            for g in d.pop("gates", [])
        ]
        start = d.pop("start", {})
        cam = d.pop("camera", {})
        d.pop("description", None)
        return cls(
            id=d.pop("id"),
            gates=gates,
            start=(
                start.get("x", 0.0),
                start.get("y", 0.0),
                start.get("z", 0.0),
                math.radians(start.get("heading_deg", 0.0)),
            ),
            camera=CameraIntrinsics(
                cam.get("width", 320), cam.get("height", 320), cam.get("hfov_deg", 80.0)
            ),
            **d,
        )

    def initial_state(self) -> DroneState:
        x, y, z, h = self.start
        return DroneState(x=x, y=y, z=z, heading=h, airborne=z > 0)


def load_scenarios(path: str | Path | None = None) -> dict[str, Scenario]:
    if path is None:
        text = resources.files("uavcosim.data").joinpath("scenarios.json").read_text()
    else:
        text = Path(path).read_text()
    return {d["id"]: Scenario.from_dict(d) for d in json.loads(text)}


def physics_step(state: DroneState, dt_us: int, omega_max: float = OMEGA_MAX) -> DroneState:
    s = copy.copy(state)
    if not s.airborne:
        if s.vz_cmd <= 0:
            return s
        s.airborne = True
    dt = dt_us * 1e-6
    s.heading = s.heading + s.yaw_rate_cmd * omega_max * dt
    s.x += s.v_cmd * math.cos(s.heading) * dt
    s.y += s.v_cmd * math.sin(s.heading) * dt
    s.z += s.vz_cmd * dt
    if s.z <= 0.0:
        s.z = 0.0
        if s.vz_cmd < 0:
            s.airborne = False
            s.v_cmd = s.yaw_rate_cmd = s.vz_cmd = 0.0
    return s


# -- rendering ---------------------------------------------------------------


def _camera_basis(state: DroneState):
    h = state.heading
    forward = np.array([math.cos(h), math.sin(h), 0.0])
    right = np.array([-math.sin(h), math.cos(h), 0.0])
    up = np.array([0.0, 0.0, 1.0])
    return forward, right, up


def _clip_near(poly: np.ndarray, near: float = NEAR_PLANE_M) -> np.ndarray:
    """Sutherland-Hodgman clip of a camera-space polygon against Z >= near."""
    out = []
    n = len(poly)
    for i in range(n):
        cur, nxt = poly[i], poly[(i + 1) % n]
        cur_in, nxt_in = cur[2] >= near, nxt[2] >= near
        if cur_in:
            out.append(cur)
        if cur_in != nxt_in:
            t = (near - cur[2]) / (nxt[2] - cur[2])
            out.append(cur + t * (nxt - cur))
    return np.array(out).reshape(-1, 3)


def project_points(points_cam: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    f = cam.focal_px
    u = cam.width / 2.0 + f * points_cam[:, 0] / points_cam[:, 2]
    v = cam.height / 2.0 - f * points_cam[:, 1] / points_cam[:, 2]
    return np.stack([u, v], axis=1)


def _fill_convex(mask: np.ndarray, poly2d: np.ndarray, value: bool) -> None:
    """Set pixels whose centers lie inside a convex polygon (row-span fill)."""
    if len(poly2d) < 3:
        return
    h, w = mask.shape
    ys = np.arange(h) + 0.5
    a = poly2d
    b = np.roll(poly2d, -1, axis=0)
    ya, yb = a[:, 1][:, None], b[:, 1][:, None]
    spans = (np.minimum(ya, yb) <= ys) & (ys <= np.maximum(ya, yb)) & (ya != yb)
    if not spans.any():
        return
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (ys - ya) / (yb - ya)
    xs = a[:, 0][:, None] + t * (b[:, 0] - a[:, 0])[:, None]
    left = np.where(spans, xs, np.inf).min(axis=0)
    right = np.where(spans, xs, -np.inf).max(axis=0)
    rows = np.isfinite(left)
    if not rows.any():
        return
    cols = np.arange(w) + 0.5
    inside = (cols >= left[rows, None]) & (cols <= right[rows, None])
    sub = mask[rows]
    sub[inside] = value
    mask[rows] = sub


def render_mask(state: DroneState, scenario: Scenario) -> np.ndarray:
    cam = scenario.camera
    mask = np.zeros((cam.height, cam.width), dtype=bool)
    forward, right, up = _camera_basis(state)
    basis = np.stack([right, up, forward], axis=1)
    eye = state.position
    for gate in scenario.gates:
        outer = _clip_near((gate.corners(gate.frame_outer_m / 2) - eye) @ basis)
        if len(outer) < 3:
            continue
        _fill_convex(mask, project_points(outer, cam), True)
        inner = _clip_near((gate.corners(gate.opening_m / 2) - eye) @ basis)
        if len(inner) >= 3:
            _fill_convex(mask, project_points(inner, cam), False)
    return mask


def render_camera(state: DroneState, scenario: Scenario, frame_index: int = 0) -> bytes:
    """320x320 8-bit grayscale frame, row-major."""
    mask = render_mask(state, scenario)
    img = np.where(mask, FRAME_PIXEL, BACKGROUND).astype(np.uint8)
    if scenario.noise_sigma > 0:
        rng = np.random.default_rng([scenario.noise_seed or 0, frame_index])
        noisy = img + rng.normal(0.0, scenario.noise_sigma, img.shape)
        img = np.clip(np.rint(noisy), 0, 255).astype(np.uint8)
    return img.tobytes()


# -- gate interaction --------------------------------------------------------


def _in_square(lat: float, vert: float, half: float) -> bool:
    return abs(lat) <= half and abs(vert) <= half


def check_traversal(prev: DroneState, new: DroneState, gate: GateSpec, margin: float = 0.0) -> str:
    """Classify one step's motion against a gate.

    ``margin`` inflates the drone from a point to a body of that half-width:
    the usable opening shrinks and the frame grows by it.  A traversal is
    reported once the body has fully cleared the frame, i.e. when the segment
    crosses the exit face of the (inflated) frame slab inside the opening.
    """
    s0, _, _ = gate.local(prev.position)
    s1, lat1, vert1 = gate.local(new.position)
    inner = gate.opening_m / 2 - margin
    outer = gate.frame_outer_m / 2 + margin
    exit_face = gate.thickness_m / 2 + margin

    def crossing(plane: float):
        t = (plane - s0) / (s1 - s0)
        _, lat, vert = gate.local(prev.position + t * (new.position - prev.position))
        return lat, vert

    if s0 < 0.0 <= s1:
        lat, vert = crossing(0.0)
        if not _in_square(lat, vert, inner) and _in_square(lat, vert, outer):
            return COLLIDED
    if abs(s1) <= exit_face and _in_square(lat1, vert1, outer) and not _in_square(lat1, vert1, inner):
        return COLLIDED
    if s0 < exit_face <= s1 and _in_square(*crossing(exit_face), inner):
        return TRAVERSED
    return NONE


def crossed_outside(prev: DroneState, new: DroneState, gate: GateSpec, margin: float = 0.0) -> bool:
    """Forward crossing of the gate plane clear of the whole frame."""
    s0, _, _ = gate.local(prev.position)
    s1, _, _ = gate.local(new.position)
    if not s0 < 0.0 <= s1:
        return False
    t = -s0 / (s1 - s0) if s1 != s0 else 1.0
    p = prev.position + t * (new.position - prev.position)
    _, lat, vert = gate.local(p)
    return not _in_square(lat, vert, gate.frame_outer_m / 2 + margin)


def went_past(prev: DroneState, new: DroneState, gate: GateSpec, margin: float = 0.0) -> bool:
    """The body moved from in front of the frame's exit face to beyond it."""
    exit_face = gate.thickness_m / 2 + margin
    return gate.local(prev.position)[0] <= exit_face < gate.local(new.position)[0]


def skid(state: DroneState, gate: GateSpec, skid_m: float, margin: float) -> DroneState:
    """Impact response: pushed off the frame on the side the body is on, sliding towards the opening."""
    s, lat, vert = gate.local(state.position)
    back = math.copysign(gate.thickness_m / 2 + margin + skid_m, -s if s else 1.0)
    slide = math.copysign(min(skid_m, abs(lat)), lat)
    p = (
        np.array(gate.center)
        - back * gate.normal
        + (lat - slide) * gate.lateral
        + np.array([0.0, 0.0, vert])
    )
    out = copy.copy(state)
    out.x, out.y, out.z = float(p[0]), float(p[1]), float(p[2])
    return out


# -- the world process -------------------------------------------------------


TRAJECTORY_FIELDS = ("world_time_us", "x", "y", "z", "heading", "v_cmd", "event")


class World:
    """World state plus the opcode dispatch table.

    Extra opcodes declared in the configuration get a handler through
    :meth:`register`; a registered opcode without a handler answers with
    status "error".
    """

    def __init__(self, scenario: Scenario, registry: Registry | None = None, omega_max: float = OMEGA_MAX):
        self.registry = registry or Registry.builtin()
        self.omega_max = omega_max
        self.handlers: dict[str, Callable[[dict], dict]] = {
            "GET_DATA": self._get_data,
            "SET_MOTOR": self._set_motor,
            "ADVANCE": self._advance,
            "GET_STATE": self._get_state,
            "RESET": self._reset,
            "SHUTDOWN": self._shutdown,
        }
        # optional, only when the config declares it
        if "GET_TRAJECTORY" in self.registry:
            self.handlers["GET_TRAJECTORY"] = self._get_trajectory
        self.scenarios: dict[str, Scenario] = {}
        self.reset(scenario)

    def _get_trajectory(self, payload: dict) -> dict:
        return {"fields": list(TRAJECTORY_FIELDS), "rows": [list(r) for r in self.trajectory]}

    def register(self, opcode: str, handler: Callable[[dict], dict]) -> None:
        if opcode not in self.registry:
            raise KeyError(f"opcode {opcode!r} is not in the registry")
        self.handlers[opcode] = handler

    def reset(self, scenario: Scenario) -> None:
        self.scenario = scenario
        self.state = scenario.initial_state()
        self.time_us = 0
        self.steps = 0
        self.frame_count = 0
        self.frame_hashes: list[str] = []
        self.traversed = False
        self.traversal_time_us: int | None = None
        self.missed = False
        self.collisions = 0
        self.distance_m = 0.0
        self.shutdown_requested = False
        self.trajectory: list[tuple] = []
        self._log("start")

    def _log(self, event: str = "") -> None:
        s = self.state
        self.trajectory.append(
            (self.time_us, round(s.x, 6), round(s.y, 6), round(s.z, 6), round(s.heading, 6), s.v_cmd, event)
        )

    def step(self) -> None:
        prev = self.state
        new = physics_step(prev, self.scenario.world_step_us, self.omega_max)
        self.time_us += self.scenario.world_step_us
        self.steps += 1
        event = ""
        margin = self.scenario.body_margin_m
        for gate in self.scenario.gates:
            outcome = check_traversal(prev, new, gate, margin)
            if outcome == TRAVERSED and not self.traversed:
                self.traversed = True
                self.traversal_time_us = self.time_us
                event = "traversed"
            elif outcome == COLLIDED:
                self.collisions += 1
                new = skid(new, gate, self.scenario.skid_m, margin)
                event = "collision"
            elif not self.traversed and crossed_outside(prev, new, gate, margin):
                self.missed = True
                event = "missed"
            if not self.traversed and went_past(prev, new, gate, margin):
                # beyond the frame without traversing, e.g. knocked through by a strike
                self.missed = True
                event = event or "missed"
        self.distance_m += float(np.linalg.norm(new.position - prev.position))
        self.state = new
        self._log(event)

    # handlers take and return payload dicts
    def _get_data(self, payload: dict) -> dict:
        img = render_camera(self.state, self.scenario, self.frame_count)
        self.frame_count += 1
        self.frame_hashes.append(hashlib.sha256(img).hexdigest())
        cam = self.scenario.camera
        return {"image": b64encode_bytes(img), "width": cam.width, "height": cam.height}

    def _set_motor(self, payload: dict) -> dict:
        v = float(payload["v_mps"])
        yaw = float(payload["yaw_rate"])
        vz = float(payload.get("vz_mps", 0.0))
        if v < 0 or not -1.0 <= yaw <= 1.0:
            raise ValueError(f"motor command out of range: v={v}, yaw={yaw}")
        s = self.state
        s.v_cmd, s.yaw_rate_cmd, s.vz_cmd = v, yaw, vz
        return {}

    def _advance(self, payload: dict) -> dict:
        n = int(payload["steps"])
        if n < 0:
            raise ValueError("steps must be non-negative")
        for _ in range(n):
            self.step()
        return {"world_time_us": self.time_us}

    def state_payload(self) -> dict:
        d = asdict(self.state)
        d.update(
            traversed=self.traversed,
            traversal_time_us=self.traversal_time_us,
            missed=self.missed,
            collisions=self.collisions,
            distance_m=self.distance_m,
            world_time_us=self.time_us,
        )
        return d

    def _get_state(self, payload: dict) -> dict:
        return self.state_payload()

    def _reset(self, payload: dict) -> dict:
        target = (payload or {}).get("scenario", self.scenario.id)
        if isinstance(target, dict):
            scenario = Scenario.from_dict(target)
        elif target in self.scenarios:
            scenario = self.scenarios[target]
        elif target == self.scenario.id:
            scenario = self.scenario
        else:
            scenario = load_scenarios()[target]
        self.reset(scenario)
        return self.state_payload()

    def _shutdown(self, payload: dict) -> dict:
        self.shutdown_requested = True
        return {}

    def dispatch(self, request: Packet) -> Packet:
        handler = self.handlers.get(request.opcode)
        if handler is None:
            return error_response(request.opcode, self.time_us, f"no handler for opcode {request.opcode}")
        try:
            payload = handler(request.payload or {})
        except (KeyError, TypeError, ValueError) as exc:
            return error_response(request.opcode, self.time_us, f"malformed payload: {exc}")
        return Packet(request.opcode, self.time_us, payload, "ok")

    def write_trajectory(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRAJECTORY_FIELDS)
            writer.writerows(self.trajectory)


def serve(scenario: Scenario, endpoint=None, registry: Registry | None = None) -> tuple[World, PacketServer]:
    """Start a world server in a background thread."""
    world = World(scenario, registry)
    server = PacketServer(endpoint, world.dispatch, registry or world.registry).start()
    return world, server
