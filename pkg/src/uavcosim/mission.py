"""Flight software running on the VP: perception, speed policy, mission phases."""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np

from .energy import BatteryExhausted

IN_SIZE = 320
OUT_SIZE = 168
DARK_THRESHOLD = 128
KMH = 1 / 3.6
TAKEOFF_VZ = 0.5
LAND_VZ = -0.5


@lru_cache(maxsize=8)
def _area_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    """Banded area-averaging weights: output i covers input span [i*s, (i+1)*s).

    Returns ``(index, weight)`` arrays of shape (n_out, taps).
    """
    scale = n_in / n_out
    taps = int(np.ceil(scale)) + 1
    index = np.zeros((n_out, taps), dtype=np.intp)
    weight = np.zeros((n_out, taps))
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        for k, j in enumerate(range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in))):
            index[i, k] = j
            weight[i, k] = (min(hi, j + 1) - max(lo, j)) / scale
    return index, weight


def downsample(img: np.ndarray | bytes, size: int = OUT_SIZE) -> np.ndarray:
    """Area-weighted resample of a 320x320 frame to ``size`` x ``size``."""
    if isinstance(img, (bytes, bytearray, memoryview)):
        img = np.frombuffer(img, dtype=np.uint8)
        if img.size != IN_SIZE * IN_SIZE:
            raise ValueError(f"expected {IN_SIZE * IN_SIZE} bytes, got {img.size}")
        img = img.reshape(IN_SIZE, IN_SIZE)
    img = np.asarray(img)
    if img.shape != (IN_SIZE, IN_SIZE):
        raise ValueError(f"expected a {IN_SIZE}x{IN_SIZE} image, got {img.shape}")
    ri, rw = _area_weights(img.shape[0], size)
    ci, cw = _area_weights(img.shape[1], size)
    rows = np.einsum("ok,okw->ow", rw, img[ri].astype(np.float64))
    out = np.einsum("ok,hok->ho", cw, rows[:, ci])
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def dark_centroid_column(img: np.ndarray, threshold: int = DARK_THRESHOLD) -> float | None:
    """Mean pixel-center column of dark pixels, or None when there are none."""
    cols = np.nonzero(img < threshold)[1]
    if cols.size == 0:
        return None
    return float(cols.mean()) + 0.5


@dataclass
class YawPredictor:
    """Geometric stand-in for the yaw-regression CNN.

    Steers towards the dark-pixel centroid.  With nothing in view it turns
    at full rate towards where the gate was last seen.
    """

    mode: str = "geometric_oracle"
    gain: float = 1.0
    plugin: Callable[[np.ndarray], float] | None = None
    last_nonzero: float = 0.0
    committed: bool = False

    def __call__(self, img: np.ndarray) -> float:
        return predict_yaw(self, img)


def _clamp(x: float, lo: float = -1.0, hi: float = 1.0) -> float:
    return max(lo, min(hi, x))


def predict_yaw(predictor: YawPredictor, img: np.ndarray) -> float:
    if predictor.mode == "plugin":
        if predictor.plugin is None:
            raise ValueError("plugin mode needs an inference hook")
        yaw = _clamp(float(predictor.plugin(img)))
    else:
        dark = img < DARK_THRESHOLD
        u = dark_centroid_column(img)
        if u is None:
            # an empty view right after a close pass means we are in the opening
            yaw = 0.0 if predictor.committed else float(np.sign(predictor.last_nonzero))
        elif (dark[0].any() and dark[-1].any()) or (dark[:, 0].any() and dark[:, -1].any()):
            # frame spans the whole view: too close to steer on, hold heading
            predictor.committed = True
            yaw = 0.0
        else:
            predictor.committed = False
            yaw = _clamp(predictor.gain * (2.0 * u / img.shape[1] - 1.0))
    if yaw != 0.0:
        predictor.last_nonzero = yaw
    return yaw


@dataclass
class AdaptivePolicyState:
    v_max_kmh: float = 1.0
    decrement_kmh: float = 0.05
    threshold: float = 0.3
    v_floor_kmh: float = 0.1
    window: int = 10
    v_current_kmh: float | None = None
    history: deque = field(default=None)

    def __post_init__(self):
        if self.v_current_kmh is None:
            self.v_current_kmh = self.v_max_kmh
        if self.history is None:
            self.history = deque(maxlen=self.window)


def adaptive_speed(policy: AdaptivePolicyState, yaw: float) -> float:
    policy.history.append(yaw)
    avg = sum(policy.history) / len(policy.history)
    if abs(avg) <= policy.threshold:
        policy.v_current_kmh = policy.v_max_kmh
    else:
        # rounding keeps repeated 0.05 steps on the decimal grid
        policy.v_current_kmh = round(max(policy.v_current_kmh - policy.decrement_kmh, policy.v_floor_kmh), 9)
    return policy.v_current_kmh


class Phase(enum.Enum):
    TAKEOFF = "Takeoff"
    CRUISE = "Cruise"
    LAND = "Land"
    DONE = "Done"


@dataclass
class MissionConfig:
    policy: str = "constant"  # or "adaptive"
    v_kmh: float = 1.0
    scenario: str = "easy"
    soc_land_threshold: float = 0.10
    cruise_altitude_m: float = 1.0
    predictor_gain: float = 1.0
    land_on_miss: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "MissionConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass
class IterationRecord:
    vp_time_us: int
    phase: str
    yaw: float
    v_kmh: float
    soc: float


class Mission:
    """Takeoff -> Cruise -> Land -> Done, one control iteration per :meth:`step`."""

    def __init__(self, vp, config: MissionConfig | None = None, predictor: YawPredictor | None = None):
        self.vp = vp
        self.config = config or MissionConfig()
        self.predictor = predictor or YawPredictor(gain=self.config.predictor_gain)
        self.policy = AdaptivePolicyState() if self.config.policy == "adaptive" else None
        self.phase = Phase.TAKEOFF
        self.transitions: list[tuple[int, Phase]] = []
        self.records: list[IterationRecord] = []
        self.last_state: dict | None = None
        self.battery_exhausted = False
        self.started = False
        self.land_reason: str | None = None

    @property
    def done(self) -> bool:
        return self.phase is Phase.DONE

    def _enter(self, phase: Phase) -> None:
        self.phase = phase
        self.transitions.append((self.vp.now_us, phase))

    def speed_kmh(self, yaw: float) -> float:
        if self.policy is not None:
            return adaptive_speed(self.policy, yaw)
        return self.config.v_kmh

    def step(self) -> None:
        if self.done:
            raise RuntimeError("mission already finished")
        try:
            self._step()
        except BatteryExhausted:
            self.battery_exhausted = True
            self.land_reason = self.land_reason or "battery_exhausted"
            if self.phase is not Phase.LAND:
                self._enter(Phase.LAND)
            self._enter(Phase.DONE)

    def _step(self) -> None:
        vp = self.vp
        if not self.started:
            self.started = True
            self._enter(Phase.TAKEOFF)
            vp.arm(True)
            vp.set_motors(0.0, 0.0, TAKEOFF_VZ)
        state = vp.read_state()
        self.last_state = state
        cfg = self.config

        if self.phase is Phase.TAKEOFF and state["z"] >= cfg.cruise_altitude_m:
            self._enter(Phase.CRUISE)
        elif self.phase is Phase.CRUISE:
            reason = None
            if state["traversed"]:
                reason = "traversed"
            elif state["missed"] and cfg.land_on_miss:
                reason = "missed"
            elif vp.power.battery.soc <= cfg.soc_land_threshold:
                reason = "low_battery"
            if reason:
                self.land_reason = reason
                self._enter(Phase.LAND)
        elif self.phase is Phase.LAND and not state["airborne"]:
            vp.arm(False)
            self._enter(Phase.DONE)
            return

        vp.camera_capture()
        frame = vp.read_frame()
        yaw = predict_yaw(self.predictor, downsample(frame))
        vp.run_task("cnn_inference")

        if self.phase is Phase.TAKEOFF:
            if self.policy is not None:
                # the speed policy watches the predictor from the first frame
                adaptive_speed(self.policy, yaw)
            v_kmh, cmd = 0.0, (0.0, 0.0, TAKEOFF_VZ)
        elif self.phase is Phase.CRUISE:
            v_kmh = self.speed_kmh(yaw)
            cmd = (v_kmh * KMH, yaw, 0.0)
        else:
            v_kmh, cmd = 0.0, (0.0, 0.0, LAND_VZ)
        vp.set_motors(*cmd)
        self.records.append(
            IterationRecord(vp.now_us, self.phase.value, yaw, v_kmh, vp.power.battery.soc)
        )

    def run(self, max_time_us: int | None = None) -> bool:
        """Step until Done; False if the time budget ran out first."""
        while not self.done:
            if max_time_us is not None and self.vp.now_us >= max_time_us:
                return False
            self.step()
        return True
