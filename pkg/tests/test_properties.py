"""Property tests for the invariants the simulator relies on."""

from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from hasim import check_expected_steps, run_scenario
from hasim.crm import (MINUS_INFINITY, PLUS_INFINITY, ZERO, ClusterState, Score, compute_transition,
                       load_config, parse_cib)
from hasim.drbd import (ActivityLog, BlockStore, DeviceConfig, DiskState, HandshakeKind, Protocol,
                        ReplicatedDevice, Role, Snapshot, classify_handshake, make_record)
from hasim.engine import Power, Simulator, TraceEntry
from hasim.fuzz import random_scenario
from hasim.scenario import BUILTIN_DIR
from hasim.units import format_ms, parse_duration

scores = st.one_of(st.integers(-10 ** 6, 10 ** 6).map(Score.finite),
                   st.sampled_from([PLUS_INFINITY, MINUS_INFINITY]))


@given(scores, scores)
def test_score_addition_commutes(a, b):
    assert a + b == b + a


@given(scores, scores, scores)
def test_score_addition_associates(a, b, c):
    assert (a + b) + c == a + (b + c)


@given(scores)
def test_score_identity_and_absorption(a):
    assert a + ZERO == a
    assert a + MINUS_INFINITY == MINUS_INFINITY


@given(st.integers(0, 10 ** 7))
def test_duration_round_trip(ms):
    assert parse_duration(format_ms(ms)) == ms


# -- block device -----------------------------------------------------------

@st.composite
def snapshots(draw):
    # tags only grow, so a history holds older tags, newest first
    current = draw(st.integers(1, 6))
    older = draw(st.lists(st.integers(1, current - 1), max_size=4, unique=True)) if current > 1 else []
    return Snapshot("x", current, sorted(older, reverse=True),
                    draw(st.lists(st.integers(0, 20), max_size=5, unique=True)), Role.SECONDARY,
                    draw(st.sampled_from([DiskState.UP_TO_DATE, DiskState.INCONSISTENT])),
                    draw(st.booleans()))


@given(snapshots(), snapshots())
def test_handshake_is_symmetric(a, b):
    a.node, b.node = "a", "b"
    ab, ba = classify_handshake(a, b), classify_handshake(b, a)
    assert ab.kind is ba.kind
    if ab.kind is HandshakeKind.RESYNC_NEEDED:
        assert (ab.source, ab.target) == (ba.source, ba.target)
        assert {ab.source, ab.target} == {"a", "b"}


@given(snapshots())
def test_handshake_with_an_identical_copy_never_resyncs_blindly(a):
    a.node = "a"
    b = Snapshot("b", a.current, list(a.history), [], a.role, DiskState.UP_TO_DATE)
    a.discard, a.disk = False, DiskState.UP_TO_DATE
    r = classify_handshake(a, b)
    if a.dirty:
        assert (r.source, r.target) == ("a", "b")
    else:
        assert r.kind is HandshakeKind.ALREADY_IN_SYNC


@given(st.dictionaries(st.integers(0, 31), st.sampled_from("xyz")),
       st.dictionaries(st.integers(0, 31), st.sampled_from("xyz")))
def test_block_store_diff(da, db):
    a, b = BlockStore(32), BlockStore(32)
    for k, v in da.items():
        a.put(k, make_record(v, "n"))
    for k, v in db.items():
        b.put(k, make_record(v, "n"))
    assert a.diff(b) == b.diff(a)
    for k in range(32):
        assert (k in a.diff(b)) == (da.get(k) != db.get(k))


@given(st.integers(1, 8), st.lists(st.integers(0, 20), max_size=60))
def test_activity_log_never_exceeds_capacity(cap, touches):
    al = ActivityLog(cap)
    for e in touches:
        al.touch(e)
        assert len(al) <= cap
    if touches:
        assert touches[-1] in al


def _crash_run(protocol, n_writes, crash_at):
    sim = Simulator(0, trace_network=False)
    sim.add_node("node1")
    sim.add_node("node2")
    sim.add_link("node1", "node2", latency=1, bandwidth=500_000)
    dev = ReplicatedDevice(sim, DeviceConfig(protocol=protocol, block_count=64,
                                             hosts={"node1": {}, "node2": {}}))
    sim.on_power_change(dev.on_power)
    dev.start_connected(("node1",))
    acked = set()
    for i in range(n_writes):
        write = lambda i=i: dev.submit_write("node1", i, f"w{i}", lambda t: acked.add(i))
        sim.timer("node1", i * 3, write)
    sim.schedule(crash_at, lambda: sim.set_node_power("node1", Power.POWERED_OFF))
    sim.run(crash_at)
    dirty = list(dev.replica("node1").dirty)
    sim.run(crash_at + 1000)
    survivor = dev.replica("node2").store
    lost = [i for i in range(n_writes) if i * 3 <= crash_at
            and (survivor.get(i) is None or survivor.get(i).write_id != f"w{i}")]
    return acked, lost, dirty


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.integers(0, 120))
def test_lost_writes_are_the_newest_dirty_blocks(n, crash_at):
    for protocol in Protocol:
        acked, lost, dirty = _crash_run(protocol, n, crash_at)
        assert set(dirty[len(dirty) - len(lost):]) == set(lost)
        if protocol is not Protocol.A:
            assert not acked & set(lost)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(0, 120))
def test_protocol_ordering(n, crash_at):
    lost_acked = {}
    for protocol in Protocol:
        acked, lost, _dirty = _crash_run(protocol, n, crash_at)
        lost_acked[protocol] = acked & set(lost)
    assert lost_acked[Protocol.C] <= lost_acked[Protocol.B] <= lost_acked[Protocol.A]


# -- engine -----------------------------------------------------------------

@given(st.lists(st.integers(0, 1000), max_size=40))
def test_events_run_in_time_order(times):
    sim = Simulator()
    seen = []
    for i, t in enumerate(times):
        sim.schedule(t, lambda t=t, i=i: seen.append((t, i)))
    sim.run(2000)
    assert seen == sorted(seen)


@given(st.lists(st.text("abc ", min_size=1, max_size=6), min_size=1, max_size=12), st.data())
def test_any_subsequence_of_the_trace_matches(details, data):
    trace = [TraceEntry(i, None, "m", "k", d) for i, d in enumerate(details)]
    picks = data.draw(st.lists(st.sampled_from(range(len(details))), unique=True))
    expected = [details[i] for i in sorted(picks)]
    assert check_expected_steps(trace, expected).matched


# -- planner ----------------------------------------------------------------

CONFIG = load_config(parse_cib((BUILTIN_DIR / "configs" / n).read_text())
                     for n in ("bootstrap.xml", "stonith-power.xml", "vms-migratable.xml"))
NODES = ["node1", "node2"]
INSTANCES = ["vm1", "vm2", "vm3", "vm4", "stonithclone:0", "stonithclone:1"]


@st.composite
def cluster_states(draw):
    members = set(draw(st.lists(st.sampled_from(NODES), min_size=1, unique=True)))
    unclean = set(draw(st.lists(st.sampled_from(sorted(set(NODES) - members)), unique=True))) \
        if len(members) < 2 else set()
    active = {i: set(draw(st.lists(st.sampled_from(NODES), max_size=1))) for i in INSTANCES}
    dev = CONFIG.resources["stonithclone"].fence_device(CONFIG.properties)
    fence_hosts = {n: [dev] for n in members if draw(st.booleans())}
    return ClusterState(list(NODES), members, unclean, set(), active, set(), {}, fence_hosts)


@settings(suppress_health_check=[HealthCheck.too_slow])
@given(cluster_states())
def test_plans_are_safe(state):
    plan = compute_transition(state, CONFIG)
    if plan.blocked:
        assert plan.actions == [] and state.unclean
        return
    kinds = [a.kind for a in plan.actions]
    order = {"fence": 0, "stop": 1, "migrate": 2, "start": 3}
    assert kinds == sorted(kinds, key=order.__getitem__)
    assert {a.node for a in plan.actions if a.kind == "fence"} == state.unclean
    for a in plan.actions:
        if a.kind == "start":
            assert a.node in state.members and a.node not in state.unclean
            assert a.node not in state.where(a.resource)
        if a.kind == "migrate":
            assert a.target in state.members
    # at most one placement per primitive after the plan
    for rid in ("vm1", "vm2", "vm3", "vm4"):
        stays = state.where(rid) & state.members
        stays -= {a.node for a in plan.actions if a.resource == rid and a.kind in ("stop", "migrate")}
        adds = {a.node for a in plan.actions if a.resource == rid and a.kind == "start"}
        adds |= {a.target for a in plan.actions if a.resource == rid and a.kind == "migrate"}
        assert len(stays | adds) <= 1


@given(cluster_states())
def test_plans_are_deterministic(state):
    assert str(compute_transition(state, CONFIG)) == str(compute_transition(state, CONFIG))


# -- whole cluster ----------------------------------------------------------

@settings(max_examples=15, deadline=None)
@given(st.integers(10_000, 20_000))
def test_random_timelines_keep_invariants(seed):
    rep = run_scenario(random_scenario(seed))
    assert rep.violations == []


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_reruns_are_identical(seed):
    sc = random_scenario(seed)
    assert run_scenario(sc).trace.to_jsonl() == run_scenario(sc).trace.to_jsonl()
