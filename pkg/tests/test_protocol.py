import json
import os
import socket
import struct
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uavcosim.protocol import (
    BUILTIN_OPCODES,
    Endpoint,
    EncodingError,
    FrameReader,
    LoopbackConnection,
    NeedMoreBytes,
    Packet,
    PacketServer,
    ProtocolError,
    Registry,
    RegistryError,
    b64decode_str,
    b64encode_bytes,
    decode_packet,
    encode_packet,
    error_response,
    iter_frames,
    load_registry,
    registry_from_config,
    transport_connect,
)

OPCODES = [d.name for d in BUILTIN_OPCODES]

scalars = st.one_of(
    st.integers(min_value=-(2**53), max_value=2**53),
    st.floats(allow_nan=False, allow_infinity=False),
    st.text(max_size=20),
    st.booleans(),
    st.none(),
)
payloads = st.dictionaries(
    st.text(min_size=1, max_size=12),
    st.one_of(scalars, st.lists(scalars, max_size=5)),
    max_size=6,
)
packets = st.builds(
    Packet,
    opcode=st.sampled_from(OPCODES),
    time_us=st.integers(min_value=0, max_value=2**63),
    payload=st.one_of(st.none(), payloads),
    status=st.sampled_from([None, "ok", "error"]),
)


def _echo(request: Packet) -> Packet:
    return Packet(request.opcode, request.time_us, request.payload, "ok")


def _write_config(tmp_path, modules):
    path = tmp_path / "system.json"
    path.write_text(json.dumps({"modules": modules}))
    return path


# -- framing ------------------------------------------------------------------


def test_length_prefix_is_big_endian_body_length():
    frame = encode_packet(Packet("GET_DATA", 0))
    (n,) = struct.unpack(">I", frame[:4])
    assert n == len(frame) - 4
    assert json.loads(frame[4:].decode("utf-8")) == {"opcode": "GET_DATA", "time_us": 0}


def test_keys_in_fixed_order():
    frame = encode_packet(Packet("SET_MOTOR", 5, {"v_mps": 1.0, "yaw_rate": 0.0}, "ok"))
    body = frame[4:].decode()
    keys = list(json.loads(body))
    assert keys == ["opcode", "time_us", "status", "payload"]


def test_set_motor_fields_recoverable_bit_exactly():
    p = Packet("SET_MOTOR", 1000, {"v_mps": 0.278, "yaw_rate": -0.12})
    frame = encode_packet(p)
    # parse the body independently of decode_packet
    body = json.loads(frame[4:].decode("utf-8"))
    assert body["opcode"] == "SET_MOTOR" and body["time_us"] == 1000
    for key in ("v_mps", "yaw_rate"):
        assert struct.pack("<d", body["payload"][key]) == struct.pack("<d", p.payload[key])
    assert decode_packet(frame) == (p, len(frame))


def test_two_frames_decode_to_first_boundary():
    a = encode_packet(Packet("GET_STATE", 7))
    b = encode_packet(Packet("ADVANCE", 9, {"steps": 2}))
    packet, used = decode_packet(a + b)
    assert packet == Packet("GET_STATE", 7)
    assert used == len(a)
    assert list(iter_frames(a + b)) == [Packet("GET_STATE", 7), Packet("ADVANCE", 9, {"steps": 2})]


def test_unknown_opcode_is_a_protocol_error_naming_it():
    body = json.dumps({"opcode": "BOGUS", "time_us": 0}).encode()
    with pytest.raises(ProtocolError) as exc:
        decode_packet(struct.pack(">I", len(body)) + body)
    assert exc.value.opcode == "BOGUS"
    assert "BOGUS" in str(exc.value)


def test_error_reply_may_echo_unknown_opcode():
    frame = encode_packet(error_response("BOGUS", 0, "no such opcode"))
    packet, _ = decode_packet(frame)
    assert packet.status == "error" and packet.opcode == "BOGUS"


def test_encoder_refuses_unknown_opcode():
    with pytest.raises(EncodingError):
        encode_packet(Packet("BOGUS", 0))


@pytest.mark.parametrize("n", [0, 1, 3])
def test_truncated_header_asks_for_more(n):
    frame = encode_packet(Packet("GET_STATE", 1))
    with pytest.raises(NeedMoreBytes) as exc:
        decode_packet(frame[:n])
    assert exc.value.needed == 4 - n


def test_truncated_body_asks_for_more():
    frame = encode_packet(Packet("GET_STATE", 1))
    with pytest.raises(NeedMoreBytes) as exc:
        decode_packet(frame[:-3])
    assert exc.value.needed == 3


@pytest.mark.parametrize(
    "body",
    [b"not json", b"[1, 2]", b'{"opcode": "GET_STATE", "time_us": -1}',
     b'{"opcode": "GET_STATE", "time_us": 0, "payload": 3}',
     b'{"opcode": "GET_STATE", "time_us": 0, "status": "maybe"}'],
)
def test_malformed_bodies_rejected(body):
    with pytest.raises(ProtocolError):
        decode_packet(struct.pack(">I", len(body)) + body)


def test_non_finite_payload_rejected():
    with pytest.raises(EncodingError):
        encode_packet(Packet("SET_MOTOR", 0, {"v_mps": float("nan")}))


def test_image_payload_round_trips_byte_exact():
    img = bytes(range(256)) * 400
    p = Packet("GET_DATA", 3, {"image": b64encode_bytes(img)}, "ok")
    back, _ = decode_packet(encode_packet(p))
    assert b64decode_str(back.payload["image"]) == img


def test_raw_bytes_are_encoded_as_base64():
    back, _ = decode_packet(encode_packet(Packet("GET_DATA", 0, {"image": b"\x00\xff"}, "ok")))
    assert b64decode_str(back.payload["image"]) == b"\x00\xff"


@settings(max_examples=300, deadline=None)
@given(packets)
def test_round_trip_property(p):
    frame = encode_packet(p)
    assert struct.unpack(">I", frame[:4])[0] == len(frame) - 4
    assert decode_packet(frame) == (p, len(frame))


@settings(max_examples=100, deadline=None)
@given(st.lists(packets, min_size=1, max_size=6), st.integers(min_value=1, max_value=64))
def test_streamed_decoding_respects_boundaries(ps, chunk):
    stream = b"".join(encode_packet(p) for p in ps)
    reader = FrameReader()
    got = []
    for i in range(0, len(stream), chunk):
        got.extend(reader.feed(stream[i : i + chunk]))
        # whatever is buffered is a strict prefix of the next frame
        assert reader.pending < len(encode_packet(ps[len(got)])) if len(got) < len(ps) else reader.pending == 0
    assert got == ps


def test_frame_reader_skips_bad_frame_and_resyncs():
    bad = json.dumps({"opcode": "BOGUS", "time_us": 0}).encode()
    good = encode_packet(Packet("GET_STATE", 1))
    reader = FrameReader()
    with pytest.raises(ProtocolError):
        reader.feed(struct.pack(">I", len(bad)) + bad + good)
    assert reader.feed(b"") == [Packet("GET_STATE", 1)]


# -- registry -------------------------------------------------------------------


def test_minimal_config_gives_the_six_builtins(tmp_path):
    reg = load_registry(_write_config(tmp_path, []))
    assert {d.name for d in reg} == {"GET_DATA", "SET_MOTOR", "ADVANCE", "RESET", "GET_STATE", "SHUTDOWN"}
    assert reg.source_config == str(tmp_path / "system.json")


def test_declared_opcode_is_merged(tmp_path):
    path = _write_config(
        tmp_path,
        [{"name": "tof", "opcodes": [{"name": "GET_TOF", "direction": "vp_to_world", "payload_schema": "state"}]}],
    )
    reg = load_registry(path)
    assert len(reg) == 7
    assert "GET_TOF" in reg and reg["GET_TOF"].payload_schema == "state"


def test_redeclared_builtin_is_a_duplicate(tmp_path):
    path = _write_config(tmp_path, [{"name": "cam", "opcodes": [{"name": "GET_DATA"}]}])
    with pytest.raises(RegistryError, match="duplicate"):
        load_registry(path)


def test_unknown_payload_schema(tmp_path):
    path = _write_config(tmp_path, [{"name": "x", "opcodes": [{"name": "GET_X", "payload_schema": "blob"}]}])
    with pytest.raises(RegistryError, match="payload_schema"):
        load_registry(path)


def test_missing_config_file(tmp_path):
    with pytest.raises(RegistryError, match="not found"):
        load_registry(tmp_path / "nope.json")


def test_declared_opcode_decodes_only_with_its_registry():
    reg = registry_from_config({"modules": [{"name": "tof", "opcodes": [{"name": "GET_TOF"}]}]})
    frame = encode_packet(Packet("GET_TOF", 0), reg)
    assert decode_packet(frame, reg)[0].opcode == "GET_TOF"
    with pytest.raises(ProtocolError):
        decode_packet(frame)


def test_shipped_config_declares_trajectory_opcode(system):
    reg = registry_from_config(system)
    assert reg["GET_TRAJECTORY"].payload_schema == "table"


# -- endpoints and transport --------------------------------------------------------


def test_endpoint_parsing(monkeypatch):
    assert Endpoint.parse("unix:/tmp/w.sock") == Endpoint("unix", "/tmp/w.sock")
    assert Endpoint.parse("tcp:localhost:5000") == Endpoint("tcp", ("localhost", 5000))
    monkeypatch.setenv("COSIM_ENDPOINT", "tcp:127.0.0.1:6001")
    assert str(Endpoint.parse()) == "tcp:127.0.0.1:6001"
    with pytest.raises(ValueError):
        Endpoint.parse("pipe:x")


@pytest.fixture(params=["unix", "tcp"])
def endpoint(request, tmp_path):
    if request.param == "unix":
        return f"unix:{tmp_path / 's.sock'}"
    return "tcp:127.0.0.1:0"


def test_client_server_round_trip(endpoint):
    server = PacketServer(endpoint, _echo).start()
    try:
        with transport_connect("client", server.endpoint) as conn:
            reply = conn.request(Packet("GET_STATE", 0))
        assert reply.status == "ok" and reply.opcode == "GET_STATE"
    finally:
        server.stop()


def test_connect_before_bind_fails(tmp_path):
    with pytest.raises(ConnectionError):
        transport_connect("client", f"unix:{tmp_path / 'absent.sock'}", timeout=1.0)


def test_bad_role():
    with pytest.raises(ValueError):
        transport_connect("peer", "tcp:127.0.0.1:0")


def test_two_clients_get_only_their_own_replies(endpoint):
    server = PacketServer(endpoint, _echo).start()
    try:
        a = transport_connect("client", server.endpoint)
        b = transport_connect("client", server.endpoint)
        for i in range(20):
            a.send(Packet("SET_MOTOR", i, {"who": "a", "i": i}))
            b.send(Packet("GET_STATE", i, {"who": "b", "i": i}))
        got_a = [a.recv() for _ in range(20)]
        got_b = [b.recv() for _ in range(20)]
        assert [(p.payload["who"], p.payload["i"]) for p in got_a] == [("a", i) for i in range(20)]
        assert [(p.payload["who"], p.payload["i"]) for p in got_b] == [("b", i) for i in range(20)]
        a.close()
        b.close()
    finally:
        server.stop()


def test_server_rejects_time_going_backwards(endpoint):
    server = PacketServer(endpoint, _echo).start()
    try:
        with transport_connect("client", server.endpoint) as conn:
            assert conn.request(Packet("GET_STATE", 100)).status == "ok"
            late = conn.request(Packet("GET_STATE", 99))
            assert late.status == "error" and "99" in late.payload["message"]
            # the connection stays usable
            assert conn.request(Packet("GET_STATE", 100)).status == "ok"
    finally:
        server.stop()


def test_server_answers_unknown_opcode_with_error():
    server = PacketServer("tcp:127.0.0.1:0", _echo).start()
    try:
        sock = socket.create_connection(server.endpoint.address)
        body = json.dumps({"opcode": "BOGUS", "time_us": 0}).encode()
        sock.sendall(struct.pack(">I", len(body)) + body)
        reader = FrameReader()
        replies = []
        while not replies:
            replies = reader.feed(sock.recv(4096))
        assert replies[0].status == "error" and "BOGUS" in replies[0].payload["message"]
        sock.close()
    finally:
        server.stop()


def test_peer_disconnect_is_end_of_stream():
    listener = transport_connect("server", "tcp:127.0.0.1:0")
    addr = listener.getsockname()
    conn = transport_connect("client", f"tcp:{addr[0]}:{addr[1]}")
    peer, _ = listener.accept()
    peer.close()
    with pytest.raises(EOFError):
        conn.recv()
    conn.close()
    listener.close()


def test_shutdown_stops_server(tmp_path):
    server = PacketServer(f"unix:{tmp_path / 'x.sock'}", _echo).start()
    with transport_connect("client", server.endpoint) as conn:
        assert conn.request(Packet("SHUTDOWN", 0)).ok
    for _ in range(50):
        if not os.path.exists(tmp_path / "x.sock"):
            break
        threading.Event().wait(0.05)
    assert server.stopped
    assert not os.path.exists(tmp_path / "x.sock")


def test_loopback_goes_through_the_codec():
    seen = []

    def handler(p):
        seen.append(p)
        return Packet(p.opcode, p.time_us, {"value": 0.1 + 0.2}, "ok")

    conn = LoopbackConnection(handler)
    reply = conn.request(Packet("GET_STATE", 4, {"x": (1, 2)}))
    # tuples come back as lists, as they would over a socket
    assert seen[0].payload == {"x": [1, 2]}
    assert reply.payload["value"] == 0.1 + 0.2
    assert conn.request(Packet("GET_STATE", 3)).status == "error"
    conn.request(Packet("SHUTDOWN", 5))
    with pytest.raises(EOFError):
        conn.request(Packet("GET_STATE", 6))


def test_registry_builtin_is_fresh_each_time():
    r = Registry.builtin()
    r.descriptors.pop("GET_DATA")
    assert "GET_DATA" in Registry.builtin()
