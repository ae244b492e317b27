"""Units, event engine, heartbeat membership and fencing."""

import pytest

from hasim.engine import LinkState, Power, SimulationError, Simulator
from hasim.fencing import FenceAction, FenceDevice, FenceKind, fence
from hasim.membership import (ConfigError, HeartbeatConfig, Membership, PeerStatus, QuorumVerdict,
                              classify, has_quorum, parse_ha_cf)
from hasim.units import format_ms, parse_duration, parse_rate


def two_nodes(**link) -> Simulator:
    sim = Simulator(seed=1, trace_network=False)
    sim.add_node("node1")
    sim.add_node("node2")
    sim.add_link("node1", "node2", **link)
    return sim


# -- units ------------------------------------------------------------------

@pytest.mark.parametrize("text,default,ms", [
    ("10s", "s", 10_000), ("500ms", "s", 500), ("10", "s", 10_000), ("10", "ms", 10),
    ("2m", "s", 120_000), ("1.5s", "s", 1500), (" 7 sec ", "s", 7000),
])
def test_parse_duration(text, default, ms):
    assert parse_duration(text, default) == ms


@pytest.mark.parametrize("bad", ["", "ten", "1.0005s", "-1s", "5 parsecs"])
def test_parse_duration_rejects(bad):
    with pytest.raises(ValueError):
        parse_duration(bad)


def test_parse_rate_is_binary():
    assert parse_rate("10M") == 10 * 1024 * 1024
    assert parse_rate("250") == 250 * 1024
    assert parse_rate("12500000", "") == 12_500_000
    assert parse_rate("1G") == 1024 ** 3
    with pytest.raises(ValueError):
        parse_rate("fast")


def test_format_ms():
    assert format_ms(20_000) == "20s"
    assert format_ms(20_050) == "20050ms"


# -- engine -----------------------------------------------------------------

def test_events_fire_in_time_then_insertion_order():
    sim = two_nodes()
    seen = []
    sim.schedule(5, lambda: seen.append("b"))
    sim.schedule(3, lambda: seen.append("a"))
    sim.schedule(5, lambda: seen.append("c"))
    sim.run(10)
    assert seen == ["a", "b", "c"]
    assert sim.clock == 10


def test_scheduling_in_the_past_is_an_error():
    sim = two_nodes()
    sim.run(100)
    with pytest.raises(SimulationError):
        sim.schedule(50, lambda: None)


def test_node_timers_die_with_power():
    sim = two_nodes()
    fired = []
    sim.timer("node1", 100, lambda: fired.append(1))
    sim.schedule(50, lambda: sim.set_node_power("node1", Power.POWERED_OFF))
    sim.run(1000)
    assert fired == []


def test_reboot_takes_the_configured_delay():
    sim = Simulator(reboot_delay=30_000)
    sim.add_node("n")
    sim.set_node_power("n", Power.REBOOTING)
    sim.run(29_999)
    assert sim.power("n") is Power.REBOOTING
    sim.run(30_000)
    assert sim.power("n") is Power.RUNNING


def test_cold_power_on_goes_through_boot():
    sim = Simulator(reboot_delay=100)
    sim.add_node("n")
    sim.set_node_power("n", Power.POWERED_OFF)
    sim.power_on("n")
    assert sim.power("n") is Power.REBOOTING
    sim.run(100)
    assert sim.is_running("n")


def test_message_latency_and_bandwidth():
    sim = two_nodes(latency=2, bandwidth=1_000_000)
    got = []
    sim.register("node2", "x", lambda m: got.append((sim.clock, m.size)))
    sim.send("node1", "node2", "x", size=10_000)  # 10 ms on the wire
    sim.send("node1", "node2", "x", size=10_000)  # queued behind the first
    sim.run(100)
    assert got == [(12, 10_000), (22, 10_000)]


def test_partition_drops_messages():
    sim = two_nodes()
    got = []
    sim.register("node2", "x", lambda m: got.append(m))
    sim.set_link_state("node1", "node2", LinkState.PARTITIONED)
    assert sim.send("node1", "node2", "x") is None
    sim.set_link_state("node1", "node2", LinkState.UP)
    sim.send("node1", "node2", "x")
    sim.run(10)
    assert len(got) == 1


def test_unsent_bytes_die_with_the_sender():
    sim = two_nodes(bandwidth=1_000_000)
    got = []
    sim.register("node2", "x", lambda m: got.append(m.id))
    sim.send("node1", "node2", "x", size=5_000)  # finishes at 5 ms
    sim.schedule(2, lambda: sim.set_node_power("node1", Power.POWERED_OFF))
    sim.run(100)
    assert got == []


def test_messages_sent_in_the_crash_millisecond_still_leave():
    # a power change lands at the end of its millisecond
    sim = two_nodes()
    got = []
    sim.register("node2", "x", lambda m: got.append(m.id))

    def send_then_die():
        sim.send("node1", "node2", "x", size=64)
        sim.set_node_power("node1", Power.POWERED_OFF)

    sim.schedule(10, send_then_die)
    sim.run(100)
    assert len(got) == 1


def test_authoring_while_down_is_a_contract_violation():
    sim = two_nodes()
    sim.set_node_power("node1", Power.POWERED_OFF)
    with pytest.raises(SimulationError):
        sim.record("node1", "x", "y", "z")
    with pytest.raises(SimulationError):
        sim.send("node1", "node2", "x")


def test_link_jitter_is_seeded():
    def arrivals(seed):
        sim = Simulator(seed)
        sim.add_node("a")
        sim.add_node("b")
        sim.add_link("a", "b", latency=1, jitter=5)
        out = []
        sim.register("b", "x", lambda m: out.append(sim.clock))
        for i in range(20):
            sim.schedule(i * 10, lambda: sim.send("a", "b", "x"))
        sim.run(1000)
        return out

    assert arrivals(3) == arrivals(3)
    assert arrivals(3) != arrivals(4)


# -- membership -------------------------------------------------------------

HA_CF = """\
keepalive 1
warntime 6
deadtime 10
initdead 120  # not modeled
bcast eth0
crm on
node node1 node2
"""


def test_parse_ha_cf():
    cfg, warnings = parse_ha_cf(HA_CF)
    assert (cfg.keepalive, cfg.warntime, cfg.deadtime) == (1000, 6000, 10_000)
    assert cfg.node_list == ["node1", "node2"]
    assert cfg.crm and cfg.bcast == "eth0"
    assert len(warnings) == 1 and "initdead" in warnings[0]


@pytest.mark.parametrize("text", ["keepalive 5\nwarntime 2\ndeadtime 10\n",
                                  "deadtime soon\n", "node a a\n"])
def test_parse_ha_cf_rejects(text):
    with pytest.raises(ConfigError):
        parse_ha_cf(text)


def test_classify_thresholds():
    cfg = HeartbeatConfig()
    assert classify(100, None, cfg) is PeerStatus.DEAD
    assert classify(6000, 0, cfg) is PeerStatus.ALIVE
    assert classify(6001, 0, cfg) is PeerStatus.WARNED
    assert classify(10_000, 0, cfg) is PeerStatus.WARNED
    assert classify(10_001, 0, cfg) is PeerStatus.DEAD


def test_quorum_policies():
    assert has_quorum(2, 2, "stop") is QuorumVerdict.PROCEED
    assert has_quorum(1, 2, "stop") is QuorumVerdict.STOP_ALL
    assert has_quorum(1, 2, "ignore") is QuorumVerdict.PROCEED
    assert has_quorum(2, 3, "stop") is QuorumVerdict.PROCEED
    with pytest.raises(ConfigError):
        has_quorum(1, 2, "freeze")


def _memberships(sim):
    cfg = HeartbeatConfig(node_list=["node1", "node2"])
    ms = {n: Membership(sim, n, cfg) for n in ("node1", "node2")}
    for m in ms.values():
        m.start(warm=True)
    return ms


def test_silent_peer_is_declared_dead_after_deadtime():
    sim = two_nodes()
    ms = _memberships(sim)
    sim.run(5000)
    assert ms["node2"].view.alive == {"node1", "node2"}
    sim.schedule(20_000, lambda: ms["node1"].stop())
    sim.run(40_000)
    dead = [e for e in sim.trace if e.kind == "dead"]
    assert [e.detail for e in dead] == ["node2 declares node1 dead"]
    # the stop lands before the 20 s tick, so the last beat left at 19 s;
    # the 30 s check sees 10999 ms of silence
    assert dead[0].t == 30_000
    assert ms["node2"].view.alive == {"node2"}


def test_restarted_heartbeat_rejoins():
    sim = two_nodes()
    ms = _memberships(sim)
    sim.schedule(1000, lambda: ms["node1"].stop())
    sim.schedule(30_000, lambda: ms["node1"].restart())
    sim.run(40_000)
    kinds = [(e.kind, e.detail) for e in sim.trace if e.module == "membership"
             and e.kind in ("dead", "alive")]
    assert kinds == [("dead", "node2 declares node1 dead"), ("alive", "node2 sees node1 alive")]


def test_leave_is_not_death():
    sim = two_nodes()
    ms = _memberships(sim)
    sim.schedule(1000, lambda: ms["node1"].announce_leave())
    sim.run(30_000)
    kinds = [e.kind for e in sim.trace if e.module == "membership"]
    assert "left" in kinds and "dead" not in kinds


# -- fencing ----------------------------------------------------------------

def _device(kind, **kw):
    return FenceDevice(kind, frozenset({"node1", "node2"}), **kw)


def test_power_switch_fences_a_dead_node():
    sim = two_nodes()
    sim.set_node_power("node1", Power.POWERED_OFF)
    results = []
    fence(sim, _device(FenceKind.POWER_SWITCH), "node2", "node1", results.append)
    sim.run(10_000)
    assert [r.ok for r in results] == [True]
    assert results[0].at == 500
    assert sim.power("node1") is Power.POWERED_OFF  # a pulled cord stays pulled


def test_ssh_reset_cannot_reach_a_dead_node():
    sim = two_nodes()
    sim.set_node_power("node1", Power.POWERED_OFF)
    results = []
    fence(sim, _device(FenceKind.SSH_RESET), "node2", "node1", results.append)
    sim.run(60_000)
    assert [(r.ok, r.reason, r.at) for r in results] == [(False, "unreachable", 20_000)]


def test_ssh_reset_reboots_a_live_node():
    sim = two_nodes()
    results = []
    fence(sim, _device(FenceKind.SSH_RESET), "node2", "node1", results.append)
    sim.run(1000)
    assert results[0].ok and sim.power("node1") is Power.REBOOTING


def test_fence_off_action_powers_down():
    sim = two_nodes()
    results = []
    fence(sim, _device(FenceKind.POWER_SWITCH, action=FenceAction.OFF), "node2", "node1",
          results.append)
    sim.run(1000)
    assert results[0].ok and sim.power("node1") is Power.POWERED_OFF


def test_fence_outside_hostlist_fails():
    sim = two_nodes()
    dev = FenceDevice(FenceKind.POWER_SWITCH, frozenset({"node2"}))
    results = []
    fence(sim, dev, "node2", "node1", results.append)
    sim.run(1000)
    assert not results[0].ok and results[0].reason == "unknown target"


def test_requester_death_loses_the_result():
    sim = two_nodes()
    results = []
    fence(sim, _device(FenceKind.POWER_SWITCH), "node2", "node1", results.append)
    sim.schedule(100, lambda: sim.set_node_power("node2", Power.POWERED_OFF))
    sim.run(1000)
    assert results == [] and sim.is_running("node1")


def test_fence_device_validation():
    with pytest.raises(ValueError):
        FenceDevice(FenceKind.SSH_RESET, frozenset())
    with pytest.raises(ValueError):
        FenceDevice(FenceKind.SSH_RESET, frozenset({"a"}), op_timeout=0)
