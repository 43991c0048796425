"""Packet framing, opcode registry and socket transport.

A frame is a 4-byte big-endian length followed by that many bytes of UTF-8
JSON.  JSON keys are emitted in the fixed order ``opcode, time_us, status,
payload``.  Binary values (camera frames) travel as base64 strings.
"""
from __future__ import annotations

import base64
import json
import math
import os
import socket
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

HEADER = struct.Struct(">I")

PAYLOAD_SCHEMAS = ("none", "image", "motor_cmd", "advance", "state", "table")
DIRECTIONS = ("vp_to_world", "world_to_vp")

ENDPOINT_ENV = "COSIM_ENDPOINT"
DEFAULT_ENDPOINT = "tcp:127.0.0.1:50717"


class ProtocolError(Exception):
    """Malformed frame, unknown opcode or broken ordering contract."""

    def __init__(self, message: str, opcode: str | None = None):
        super().__init__(message)
        self.opcode = opcode


class EncodingError(ProtocolError):
    pass


class RegistryError(Exception):
    pass


class NeedMoreBytes(Exception):
    """Raised by :func:`decode_packet` when the buffer holds a partial frame."""

    def __init__(self, needed: int):
        super().__init__(f"need {needed} more bytes")
        self.needed = needed


@dataclass(frozen=True)
class OpcodeDescriptor:
    name: str
    direction: str = "vp_to_world"
    payload_schema: str = "none"

    def __post_init__(self):
        if not self.name:
            raise RegistryError("opcode name must be non-empty")
        if self.direction not in DIRECTIONS:
            raise RegistryError(f"unknown direction {self.direction!r} for {self.name}")
        if self.payload_schema not in PAYLOAD_SCHEMAS:
            raise RegistryError(
                f"unknown payload_schema {self.payload_schema!r} for {self.name}"
            )


BUILTIN_OPCODES = (
    OpcodeDescriptor("GET_DATA", "vp_to_world", "image"),
    OpcodeDescriptor("SET_MOTOR", "vp_to_world", "motor_cmd"),
    OpcodeDescriptor("ADVANCE", "vp_to_world", "advance"),
    OpcodeDescriptor("RESET", "vp_to_world", "state"),
    OpcodeDescriptor("GET_STATE", "vp_to_world", "state"),
    OpcodeDescriptor("SHUTDOWN", "vp_to_world", "none"),
)


@dataclass
class Registry:
    descriptors: dict[str, OpcodeDescriptor] = field(default_factory=dict)
    source_config: str | None = None

    @classmethod
    def builtin(cls) -> "Registry":
        return cls({d.name: d for d in BUILTIN_OPCODES})

    def add(self, descriptor: OpcodeDescriptor) -> None:
        if descriptor.name in self.descriptors:
            raise RegistryError(f"duplicate opcode {descriptor.name!r}")
        self.descriptors[descriptor.name] = descriptor

    def __contains__(self, name: object) -> bool:
        return name in self.descriptors

    def __len__(self) -> int:
        return len(self.descriptors)

    def __iter__(self):
        return iter(self.descriptors.values())

    def __getitem__(self, name: str) -> OpcodeDescriptor:
        return self.descriptors[name]


def load_registry(config_path: str | os.PathLike) -> Registry:
    """Build the opcode table from the ``modules`` section of a system config.

    Built-in opcodes are always present; module opcodes are merged in and a
    name clash (including with a built-in) is an error.
    """
    path = Path(config_path)
    if not path.is_file():
        raise RegistryError(f"configuration file not found: {path}")
    with path.open() as fh:
        config = json.load(fh)
    registry = registry_from_config(config)
    registry.source_config = str(path)
    return registry


def registry_from_config(config: dict) -> Registry:
    registry = Registry.builtin()
    for module in config.get("modules", []):
        for op in module.get("opcodes", []):
            registry.add(
                OpcodeDescriptor(
                    name=op["name"],
                    direction=op.get("direction", "vp_to_world"),
                    payload_schema=op.get("payload_schema", "none"),
                )
            )
    return registry


_DEFAULT_REGISTRY = Registry.builtin()


@dataclass
class Packet:
    opcode: str
    time_us: int = 0
    payload: dict[str, Any] | None = None
    status: str | None = None

    @property
    def is_response(self) -> bool:
        return self.status is not None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def b64encode_bytes(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64decode_str(text: str) -> bytes:
    return base64.b64decode(text)


def _check_scalar(key: str, value: Any) -> None:
    if isinstance(value, float) and not math.isfinite(value):
        raise EncodingError(f"payload field {key!r} is not a finite number")
    if isinstance(value, (list, tuple)):
        for item in value:
            _check_scalar(key, item)
    elif isinstance(value, dict):
        for k, v in value.items():
            _check_scalar(f"{key}.{k}", v)


def _json_default(obj: Any) -> Any:
    if isinstance(obj, (bytes, bytearray, memoryview)):
        return b64encode_bytes(bytes(obj))
    # numpy scalars and arrays, without importing numpy here
    if hasattr(obj, "tolist"):
        return obj.tolist()
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")


def encode_packet(p: Packet, registry: Registry | None = None) -> bytes:
    registry = registry or _DEFAULT_REGISTRY
    # error replies may echo an opcode the peer sent but we do not know
    if not p.opcode or (p.opcode not in registry and p.status != "error"):
        raise EncodingError(f"unknown opcode {p.opcode!r}", p.opcode)
    if not isinstance(p.time_us, int) or isinstance(p.time_us, bool) or p.time_us < 0:
        raise EncodingError(f"time_us must be a non-negative integer, got {p.time_us!r}")
    body: dict[str, Any] = {"opcode": p.opcode, "time_us": p.time_us}
    if p.status is not None:
        body["status"] = p.status
    if p.payload is not None:
        for key, value in p.payload.items():
            _check_scalar(key, value)
        body["payload"] = p.payload
    try:
        raw = json.dumps(
            body, default=_json_default, separators=(",", ":"), allow_nan=False
        ).encode("utf-8")
    except (TypeError, ValueError) as exc:
        raise EncodingError(f"cannot encode {p.opcode}: {exc}", p.opcode) from exc
    return HEADER.pack(len(raw)) + raw


def decode_packet(
    buf: bytes | bytearray | memoryview, registry: Registry | None = None
) -> tuple[Packet, int]:
    """Decode the first frame in ``buf``.

    Returns ``(packet, consumed)``.  Raises :class:`NeedMoreBytes` when the
    frame is incomplete; bytes past the frame are never looked at.
    """
    registry = registry or _DEFAULT_REGISTRY
    if len(buf) < HEADER.size:
        raise NeedMoreBytes(HEADER.size - len(buf))
    (length,) = HEADER.unpack_from(buf, 0)
    end = HEADER.size + length
    if len(buf) < end:
        raise NeedMoreBytes(end - len(buf))
    try:
        body = json.loads(bytes(buf[HEADER.size:end]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed frame body: {exc}") from exc
    if not isinstance(body, dict):
        raise ProtocolError("frame body is not a JSON object")
    opcode = body.get("opcode")
    status = body.get("status")
    if not isinstance(opcode, str) or not opcode:
        raise ProtocolError(f"bad opcode {opcode!r}", str(opcode))
    # an error reply may echo an opcode the server did not recognise
    if opcode not in registry and status != "error":
        raise ProtocolError(f"unknown opcode {opcode!r}", opcode)
    time_us = body.get("time_us")
    if not isinstance(time_us, int) or isinstance(time_us, bool) or time_us < 0:
        raise ProtocolError(f"bad time_us {time_us!r}", opcode)
    payload = body.get("payload")
    if payload is not None and not isinstance(payload, dict):
        raise ProtocolError("payload must be an object", opcode)
    if status is not None and status not in ("ok", "error"):
        raise ProtocolError(f"bad status {status!r}", opcode)
    return Packet(opcode, time_us, payload, status), end


class FrameReader:
    """Incremental decoder for a byte stream carrying back-to-back frames."""

    def __init__(self, registry: Registry | None = None):
        self.registry = registry or _DEFAULT_REGISTRY
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Packet]:
        self._buf.extend(data)
        packets = []
        while True:
            try:
                packet, used = decode_packet(self._buf, self.registry)
            except NeedMoreBytes:
                break
            except ProtocolError:
                # drop the offending frame so the stream stays in sync
                (length,) = HEADER.unpack_from(self._buf, 0)
                del self._buf[: HEADER.size + length]
                raise
            del self._buf[:used]
            packets.append(packet)
        return packets

    @property
    def pending(self) -> int:
        return len(self._buf)


# -- transport ---------------------------------------------------------------


@dataclass(frozen=True)
class Endpoint:
    kind: str  # "unix" or "tcp"
    address: Any

    @classmethod
    def parse(cls, text: str | None = None) -> "Endpoint":
        text = text or os.environ.get(ENDPOINT_ENV) or DEFAULT_ENDPOINT
        if text.startswith("unix:"):
            return cls("unix", text[len("unix:"):])
        if text.startswith("tcp:"):
            host, _, port = text[len("tcp:"):].rpartition(":")
            return cls("tcp", (host or "127.0.0.1", int(port)))
        raise ValueError(f"bad endpoint {text!r}; expected unix:PATH or tcp:HOST:PORT")

    def __str__(self) -> str:
        if self.kind == "unix":
            return f"unix:{self.address}"
        return f"tcp:{self.address[0]}:{self.address[1]}"

    def _family(self):
        return socket.AF_UNIX if self.kind == "unix" else socket.AF_INET


class Connection:
    """One ordered, bidirectional packet stream over a connected socket."""

    def __init__(self, sock: socket.socket, registry: Registry | None = None):
        self.sock = sock
        self.registry = registry or _DEFAULT_REGISTRY
        self._reader = FrameReader(self.registry)
        self._queue: list[Packet] = []
        if sock.family != getattr(socket, "AF_UNIX", None):
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, packet: Packet) -> None:
        self.sock.sendall(encode_packet(packet, self.registry))

    def recv(self) -> Packet:
        while not self._queue:
            chunk = self.sock.recv(1 << 18)
            if not chunk:
                raise EOFError("peer closed the connection")
            self._queue.extend(self._reader.feed(chunk))
        return self._queue.pop(0)

    def request(self, packet: Packet) -> Packet:
        self.send(packet)
        return self.recv()

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def transport_connect(
    role: str,
    endpoint: Endpoint | str | None = None,
    registry: Registry | None = None,
    timeout: float | None = 30.0,
):
    """Client role returns a :class:`Connection`; server role a bound listening socket."""
    if not isinstance(endpoint, Endpoint):
        endpoint = Endpoint.parse(endpoint)
    if role == "client":
        sock = socket.socket(endpoint._family(), socket.SOCK_STREAM)
        sock.settimeout(timeout)
        try:
            sock.connect(endpoint.address)
        except OSError as exc:
            sock.close()
            raise ConnectionError(f"cannot connect to {endpoint}: {exc}") from exc
        sock.settimeout(None)
        return Connection(sock, registry)
    if role == "server":
        sock = socket.socket(endpoint._family(), socket.SOCK_STREAM)
        if endpoint.kind == "unix":
            if os.path.exists(endpoint.address):
                os.unlink(endpoint.address)
        else:
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind(endpoint.address)
        except OSError as exc:
            sock.close()
            raise ConnectionError(f"cannot bind {endpoint}: {exc}") from exc
        sock.listen(8)
        return sock
    raise ValueError(f"role must be 'client' or 'server', not {role!r}")


Handler = Callable[[Packet], Packet]


class PacketServer:
    """Accepts any number of clients; one thread per connection.

    ``handler`` is called under a shared lock so requests from different
    connections are serialized at the dispatch boundary.  Per-connection
    request timestamps must not go backwards.
    """

    def __init__(
        self,
        endpoint: Endpoint | str | None,
        handler: Handler,
        registry: Registry | None = None,
    ):
        self.endpoint = endpoint if isinstance(endpoint, Endpoint) else Endpoint.parse(endpoint)
        self.handler = handler
        self.registry = registry or _DEFAULT_REGISTRY
        self.lock = threading.Lock()
        self._listener: socket.socket | None = None
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()
        self._conns: list[Connection] = []

    def bind(self) -> "PacketServer":
        self._listener = transport_connect("server", self.endpoint, self.registry)
        if self.endpoint.kind == "tcp" and self.endpoint.address[1] == 0:
            host, port = self._listener.getsockname()[:2]
            self.endpoint = Endpoint("tcp", (host, port))
        return self

    def serve_forever(self) -> None:
        assert self._listener is not None, "bind() first"
        self._listener.settimeout(0.2)
        while not self._stop.is_set():
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            sock.settimeout(None)
            conn = Connection(sock, self.registry)
            self._conns.append(conn)
            t = threading.Thread(target=self._serve_connection, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)
        self._close_listener()

    def start(self) -> "PacketServer":
        if self._listener is None:
            self.bind()
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def _serve_connection(self, conn: Connection) -> None:
        last_time = 0
        try:
            while not self._stop.is_set():
                try:
                    request = conn.recv()
                except (EOFError, OSError):
                    break
                except ProtocolError as exc:
                    conn.send(error_response(exc.opcode or "UNKNOWN", last_time, str(exc)))
                    continue
                if request.time_us < last_time:
                    conn.send(
                        error_response(
                            request.opcode,
                            request.time_us,
                            f"request time {request.time_us} < previous {last_time}",
                        )
                    )
                    continue
                last_time = request.time_us
                with self.lock:
                    response = self.handler(request)
                conn.send(response)
                if request.opcode == "SHUTDOWN":
                    self._stop.set()
                    break
        finally:
            conn.close()

    def _close_listener(self) -> None:
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
            if self.endpoint.kind == "unix" and os.path.exists(self.endpoint.address):
                try:
                    os.unlink(self.endpoint.address)
                except OSError:
                    pass
            self._listener = None

    def stop(self) -> None:
        self._stop.set()
        for conn in self._conns:
            conn.close()

    @property
    def stopped(self) -> bool:
        return self._stop.is_set()


def error_response(opcode: str, time_us: int, message: str) -> Packet:
    return Packet(opcode, time_us, {"message": message}, "error")


class LoopbackConnection:
    """In-process stand-in for :class:`Connection`.

    Every packet still goes through ``encode_packet``/``decode_packet`` so
    traces are byte-identical to the socket path.
    """

    def __init__(self, handler: Handler, registry: Registry | None = None):
        self.handler = handler
        self.registry = registry or _DEFAULT_REGISTRY
        self._last_time = 0
        self.closed = False

    def request(self, packet: Packet) -> Packet:
        if self.closed:
            raise EOFError("loopback closed")
        wire = encode_packet(packet, self.registry)
        request, _ = decode_packet(wire, self.registry)
        if request.time_us < self._last_time:
            response = error_response(
                request.opcode,
                request.time_us,
                f"request time {request.time_us} < previous {self._last_time}",
            )
        else:
            self._last_time = request.time_us
            response = self.handler(request)
        back, _ = decode_packet(encode_packet(response, self.registry), self.registry)
        if request.opcode == "SHUTDOWN":
            self.closed = True
        return back

    def close(self) -> None:
        self.closed = True


def iter_frames(data: bytes, registry: Registry | None = None) -> Iterable[Packet]:
    offset = 0
    view = memoryview(data)
    while offset < len(data):
        packet, used = decode_packet(view[offset:], registry)
        offset += used
        yield packet
