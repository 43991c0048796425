"""Lock-step time alignment between the VP clock and the world clock."""
from __future__ import annotations

from dataclasses import dataclass, field

from .protocol import Packet, ProtocolError

DEFAULT_WORLD_STEP_US = 32_000


def steps_to_align(vp_time_us: int, world_time_us: int, world_step_us: int) -> int:
    """Smallest n >= 0 with ``world + n*step >= vp`` (ceiling alignment)."""
    lag = vp_time_us - world_time_us
    if lag <= 0:
        return 0
    return -(-lag // world_step_us)


class TransactionError(RuntimeError):
    """The world answered a request with status "error"."""

    def __init__(self, opcode: str, message: str):
        super().__init__(f"{opcode}: {message}")
        self.opcode = opcode
        self.message = message


@dataclass
class SimClock:
    world_step_us: int = DEFAULT_WORLD_STEP_US
    vp_time_us: int = 0
    world_time_us: int = 0

    def __post_init__(self):
        if self.world_step_us <= 0:
            raise ValueError("world_step_us must be positive")
        if self.world_time_us % self.world_step_us:
            raise ValueError("world_time_us must be a multiple of world_step_us")

    def advance_vp(self, delta_us: int) -> None:
        if delta_us < 0:
            raise ValueError("cannot move the VP clock backwards")
        self.vp_time_us += int(delta_us)

    @property
    def skew_us(self) -> int:
        return self.world_time_us - self.vp_time_us

    def aligned(self) -> bool:
        return 0 <= self.skew_us < self.world_step_us


@dataclass
class TraceEntry:
    opcode: str
    vp_time_us: int
    world_time_us: int
    steps: int


@dataclass
class Connector:
    """VP-side end of the link: aligns the world, then sends the request.

    ``conn`` is anything with ``request(Packet) -> Packet``: a socket
    :class:`~uavcosim.protocol.Connection` or a ``LoopbackConnection``.
    """

    conn: object
    clock: SimClock = field(default_factory=SimClock)
    trace: list[TraceEntry] | None = None
    total_steps: int = 0

    def synchronized_transaction(self, request: Packet) -> Packet:
        clock = self.clock
        if request.time_us != clock.vp_time_us:
            raise ValueError(
                f"request stamped {request.time_us} but VP clock is {clock.vp_time_us}"
            )
        n = steps_to_align(clock.vp_time_us, clock.world_time_us, clock.world_step_us)
        if n:
            ack = self.conn.request(Packet("ADVANCE", clock.vp_time_us, {"steps": n}))
            self._check(ack)
            world_now = int(ack.payload["world_time_us"])
            if world_now != clock.world_time_us + n * clock.world_step_us:
                raise ProtocolError(
                    f"world reported {world_now} after {n} steps from {clock.world_time_us}",
                    "ADVANCE",
                )
            clock.world_time_us = world_now
            self.total_steps += n
        response = self.conn.request(request)
        self._check(response)
        if response.time_us != clock.world_time_us:
            raise ProtocolError(
                f"response stamped {response.time_us}, expected world time {clock.world_time_us}",
                response.opcode,
            )
        if self.trace is not None:
            self.trace.append(
                TraceEntry(request.opcode, clock.vp_time_us, clock.world_time_us, n)
            )
        return response

    def call(self, opcode: str, payload: dict | None = None) -> Packet:
        return self.synchronized_transaction(Packet(opcode, self.clock.vp_time_us, payload))

    @staticmethod
    def _check(response: Packet) -> None:
        if response.status == "error":
            msg = (response.payload or {}).get("message", "unspecified error")
            raise TransactionError(response.opcode, msg)
