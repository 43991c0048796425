"""Acceptance criteria A1-A10.

Each test records a PASS/FAIL line in ``conftest.ACCEPTANCE``; the lines are
printed at the end of the pytest session.  ``python3 tests/test_acceptance.py``
runs just this file.
"""
import random
import sys
import time

import pytest
from conftest import ACCEPTANCE, pick

from uavcosim import dse
from uavcosim.energy import BatteryExhausted, battery_step, load_battery_catalog, ocv
from uavcosim.mission import Mission
from uavcosim.protocol import (
    FrameReader,
    LoopbackConnection,
    Packet,
    ProtocolError,
    Registry,
    b64decode_str,
    b64encode_bytes,
    decode_packet,
    encode_packet,
    registry_from_config,
)
from uavcosim.sync import Connector, SimClock, steps_to_align
from uavcosim.world import DroneState, World, physics_step

KMH = 1 / 3.6
STEP = 32_000


def check(cid: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[cid] = (bool(ok), detail)
    assert ok, f"{cid}: {detail}"


def within(x, target, rel):
    return abs(x - target) <= rel * abs(target)


# -- A1 cruise kinematics --------------------------------------------------------------------


def cruise_distance(v_kmh, seconds=20.0):
    s = DroneState(z=1.0, airborne=True, v_cmd=v_kmh * KMH)
    for _ in range(round(seconds * 1e6 / STEP)):
        s = physics_step(s, STEP)
    return s.x


def test_a1_cruise_kinematics():
    t0 = time.perf_counter()
    fast, slow = cruise_distance(0.2), cruise_distance(0.1)
    wall = time.perf_counter() - t0
    ok = within(fast, 1.11, 0.01) and within(fast, 2 * slow, 0.005) and wall < 1.0
    check("A1", ok, f"20 s at 0.2 km/h: {fast:.4f} m, at 0.1 km/h: {slow:.4f} m, ratio {fast / slow:.6f}, {wall:.3f} s")


# -- A2 endurance --------------------------------------------------------------------------------


def test_a2_hover_endurance(endurance_results):
    r = pick(endurance_results, battery="stock", v_kmh=0.0)
    target = 6 * 60 + 50
    ok = within(r.flight_time_s, target, 0.05) and r.land_reason == "low_battery"
    check("A2", ok, f"stock hover to 10 % SoC: {r.flight_time_s:.1f} s (target {target} s +/- 5 %)")


# -- A3 equal-weight capacity ordering -----------------------------------------------------------


def test_a3_equal_weight_ordering(easy_results):
    caps = {k: b.capacity_mAh for k, b in load_battery_catalog().items()}
    ordered, gaps = True, []
    for v in (0.5, 1.0, 1.5):
        runs = [r for r in easy_results if r.weight_override_g == 9.2 and r.v_kmh == v]
        assert len(runs) == 4
        for a in runs:
            for b in runs:
                if caps[a.battery] < caps[b.battery] and not a.consumed_soc > b.consumed_soc:
                    ordered = False
        cyc = pick(runs, battery="cyclone")
        lip = pick(runs, battery="lipol")
        gaps.append(100 * (cyc.consumed_soc - lip.consumed_soc) / cyc.consumed_soc)
    ok = ordered and all(13 <= g <= 20 for g in gaps)
    check("A3", ok, f"inverse capacity order: {ordered}; cyclone-vs-lipol gap {', '.join(f'{g:.2f}%' for g in gaps)}")


# -- A4 weight effect ------------------------------------------------------------------------------


def test_a4_ufx_savings(easy_results):
    savings = []
    for v in (0.5, 1.0, 1.5):
        stock = pick(easy_results, battery="stock", v_kmh=v, weight_override_g=None)
        ufx = pick(easy_results, battery="ufx", v_kmh=v, weight_override_g=None)
        savings.append(100 * (stock.consumed_soc - ufx.consumed_soc) / stock.consumed_soc)
    ok = all(2 <= s <= 5 for s in savings)
    check("A4", ok, f"ufx SoC savings at 0.5/1.0/1.5 km/h: {', '.join(f'{s:.2f}%' for s in savings)}")


# -- A5 large battery --------------------------------------------------------------------------------


def test_a5_lipol_extension(endurance_results):
    ext = []
    for v in (0.0, 1.5):
        stock = pick(endurance_results, battery="stock", v_kmh=v)
        lipol = pick(endurance_results, battery="lipol", v_kmh=v)
        ext.append(100 * (lipol.flight_time_s - stock.flight_time_s) / stock.flight_time_s)
    extra_m = (pick(endurance_results, battery="lipol", v_kmh=1.5).distance_m
               - pick(endurance_results, battery="stock", v_kmh=1.5).distance_m)
    ok = all(abs(e - 33) <= 8 for e in ext) and within(extra_m, 62, 0.15)
    check("A5", ok, f"flight time extension hover {ext[0]:.2f}%, 1.5 km/h {ext[1]:.2f}%; "
                    f"extra distance at 1.5 km/h {extra_m:.1f} m")


# -- A6 motor dominance ------------------------------------------------------------------------------


def test_a6_motor_share(easy_results):
    r = pick(easy_results, battery="stock", v_kmh=1.0, weight_override_g=None)
    ok = r.traversed and abs(100 * r.motor_share - 95) <= 3
    check("A6", ok, f"motor share of total energy on easy/stock/1.0 km/h: {100 * r.motor_share:.2f}%")


# -- A7 hard-scenario speed exploration --------------------------------------------------------------


def test_a7_hard_speed_exploration(hard_results):
    results, _ = hard_results
    slow = [pick(results, policy="constant", v_kmh=v) for v in (0.1, 0.2, 0.3)]
    fast = [pick(results, policy="constant", v_kmh=v) for v in (0.4, 0.5)]
    ada = pick(results, policy="adaptive")
    ok = all(r.traversed for r in slow) and not any(r.traversed for r in fast) and ada.traversed
    if ok:
        ok = all(ada.time_to_gate_s < r.time_to_gate_s and ada.remaining_soc > r.remaining_soc for r in slow)
    deltas = [100 * abs(ada.distance_m - r.distance_m) / r.distance_m for r in slow]
    ok = ok and max(deltas) <= 3.0
    detail = "; ".join(
        f"{r.v_kmh:g} km/h: {'gate at ' + format(r.time_to_gate_s, '.2f') + ' s' if r.traversed else 'no traversal'}"
        for r in slow + fast
    )
    check("A7", ok, f"{detail}; adaptive: gate at {ada.time_to_gate_s} s, remaining SoC {ada.remaining_soc:.4f}; "
                    f"max distance delta {max(deltas):.2f}%")


# -- A8 protocol suite --------------------------------------------------------------------------------


def random_payload(rng: random.Random):
    if rng.random() < 0.1:
        return None
    if rng.random() < 0.2:
        return {"image": b64encode_bytes(rng.randbytes(rng.randint(0, 1024))), "width": 32, "height": 32}
    payload = {}
    for i in range(rng.randint(0, 6)):
        kind = rng.randrange(5)
        if kind == 0:
            value = rng.uniform(-1e6, 1e6)
        elif kind == 1:
            value = rng.randint(-2**53, 2**53)
        elif kind == 2:
            value = "".join(rng.choice("abcxyz_-é✓ ") for _ in range(rng.randint(0, 12)))
        elif kind == 3:
            value = [rng.uniform(-1, 1) for _ in range(rng.randint(0, 4))]
        else:
            value = rng.random() < 0.5
        payload[f"k{i}"] = value
    return payload


def test_a8_protocol_suite():
    t0 = time.perf_counter()
    rng = random.Random(8)
    registry = Registry.builtin()
    opcodes = [d.name for d in registry]
    packets = [
        Packet(rng.choice(opcodes), rng.randint(0, 2**40), random_payload(rng), rng.choice([None, "ok", "error"]))
        for _ in range(1000)
    ]
    frames = [encode_packet(p, registry) for p in packets]
    round_trip = all(
        decode_packet(f, registry) == (p, len(f)) and encode_packet(decode_packet(f, registry)[0], registry) == f
        for p, f in zip(packets, frames)
    )

    # one stream cut into random chunks, boundaries landing anywhere
    stream = b"".join(frames)
    reader, got, i = FrameReader(registry), [], 0
    while i < len(stream):
        n = rng.randint(1, 300)
        got.extend(reader.feed(stream[i:i + n]))
        i += n
    streamed = got == packets and reader.pending == 0
    images = [(p, q) for p, q in zip(packets, got) if p.payload and "image" in p.payload]
    streamed = streamed and bool(images) and all(
        b64decode_str(p.payload["image"]) == b64decode_str(q.payload["image"]) for p, q in images
    )

    bogus = Packet("NOT_AN_OPCODE", 0)
    rejected = 0
    try:
        encode_packet(bogus, registry)
    except ProtocolError:
        rejected += 1
    raw = encode_packet(Packet("GET_STATE", 0), registry).replace(b'"GET_STATE"', b'"GET_STATX"')
    raw = len(raw[4:]).to_bytes(4, "big") + raw[4:]
    try:
        decode_packet(raw, registry)
    except ProtocolError:
        rejected += 1
    wall = time.perf_counter() - t0
    ok = round_trip and streamed and rejected == 2 and wall < 1.0
    check("A8", ok, f"1000 packets round trip: {round_trip}; chunked stream: {streamed}; "
                    f"unknown opcodes rejected: {rejected}/2; {wall:.3f} s")


# -- A9 sync invariant ----------------------------------------------------------------------------------


def traced_mission(scenario, policy, v_kmh=1.0):
    system = dse.load_system_config()
    exp = dse.ExperimentConfig(scenario=scenario, policy=policy, v_kmh=v_kmh)
    world = World(dse.build_scenario(system, exp), registry_from_config(system))
    connector = Connector(LoopbackConnection(world.dispatch), SimClock(), trace=[])
    mission = Mission(dse.build_vp(system, exp, connector), dse.mission_config(system, exp))
    assert mission.run(200_000_000)
    return connector.trace


def brute_force_steps(vp, world, step):
    n = 0
    while world + n * step < vp:
        n += 1
    return n


def test_a9_sync_invariant():
    violations, transactions = 0, 0
    for scenario, policy, v in [("easy", "constant", 1.0), ("hard", "adaptive", 1.0), ("hard", "constant", 0.5)]:
        for e in traced_mission(scenario, policy, v):
            transactions += 1
            if not 0 <= e.world_time_us - e.vp_time_us < STEP:
                violations += 1

    rng = random.Random(9)
    mismatches = 0
    for _ in range(100_000):
        step = rng.randint(1, 100_000)
        world = rng.randint(0, 1000) * step
        # vp ahead of the world by up to 50 steps, or behind it
        vp = max(0, world + rng.randint(-3 * step, 50 * step))
        if steps_to_align(vp, world, step) != brute_force_steps(vp, world, step):
            mismatches += 1
    ok = transactions > 0 and violations == 0 and mismatches == 0
    check("A9", ok, f"{transactions} mission transactions, {violations} invariant violations; "
                    f"steps_to_align vs brute force: {mismatches} mismatches in 100000")


# -- A10 battery oracle -----------------------------------------------------------------------------------


def test_a10_battery_oracle():
    dt = 1_000_000
    hours = {}
    for name, b in load_battery_catalog().items():
        b = b.copy(self_discharge_mA=0.0, soc=1.0)
        steps = 0
        try:
            while True:
                battery_step(b, b.capacity_mAh, dt)
                steps += 1
                if b.soc == 0.0:
                    break
        except BatteryExhausted:
            pass
        hours[name] = steps * dt / 3.6e9
    on_time = all(abs(h - 1.0) * 3.6e9 <= dt for h in hours.values())

    b = next(iter(load_battery_catalog().values()))
    # hand-computed midpoints of the anchor segments
    midpoints = {0.1: 3.35, 0.35: 3.75, 0.65: 3.875, 0.9: 4.075}
    anchors_ok = all(abs(ocv(b, s) - v) <= 1e-9 for s, v in midpoints.items())
    check("A10", on_time and anchors_ok,
          f"1C discharge: {', '.join(f'{k} {3600 * h:.0f} s' for k, h in hours.items())}; "
          f"OCV midpoints within 1e-9: {anchors_ok}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
