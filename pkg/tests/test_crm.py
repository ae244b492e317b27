"""Resource manager: scores, CIB parsing and transition planning."""

import pytest

from hasim.crm import (MINUS_INFINITY, PLUS_INFINITY, ZERO, Action, ClusterProperties, ClusterState,
                       ConfigError, Kind, Score, choose_node, compute_transition, load_config,
                       parse_cib)
from hasim.fencing import FenceAction, FenceKind
from hasim.membership import QuorumVerdict
from hasim.scenario import BUILTIN_DIR

CONFIGS = BUILTIN_DIR / "configs"


def cib(*names):
    return load_config(parse_cib((CONFIGS / n).read_text()) for n in names)


def canonical():
    return cib("bootstrap.xml", "stonith-power.xml", "vms.xml")


def state(members=("node1", "node2"), active=None, **kw):
    cfg = kw.pop("config", None) or canonical()
    fence_hosts = kw.pop("fence_hosts", None)
    if fence_hosts is None:
        dev = cfg.resources["stonithclone"].fence_device(cfg.properties)
        fence_hosts = {n: [dev] for n in members}
    return ClusterState(["node1", "node2"], set(members), active=active or {},
                        fence_hosts=fence_hosts, **kw)


def placed():
    return {"vm1": {"node1"}, "vm2": {"node1"}, "vm3": {"node2"}, "vm4": {"node2"},
            "stonithclone:0": {"node1"}, "stonithclone:1": {"node2"}}


# -- scores -----------------------------------------------------------------

def test_score_parse_and_format():
    assert Score.parse("INFINITY") is PLUS_INFINITY
    assert Score.parse("-INFINITY") is MINUS_INFINITY
    assert Score.parse(" 200 ") == Score.finite(200)
    assert str(Score.parse("-500")) == "-500"
    with pytest.raises(ConfigError):
        Score.parse("lots")


def test_minus_infinity_absorbs():
    assert PLUS_INFINITY + MINUS_INFINITY == MINUS_INFINITY
    assert MINUS_INFINITY + Score.finite(10 ** 9) == MINUS_INFINITY
    assert PLUS_INFINITY + Score.finite(-10 ** 9) == PLUS_INFINITY
    assert Score.finite(2) + 3 == Score.finite(5)


def test_score_multiplication():
    assert Score.finite(-500) * 3 == Score.finite(-1500)
    assert PLUS_INFINITY * 0 == ZERO
    assert PLUS_INFINITY * -1 == MINUS_INFINITY


def test_score_order():
    assert MINUS_INFINITY < Score.finite(-10 ** 9) < ZERO < Score.finite(1) < PLUS_INFINITY


# -- CIB --------------------------------------------------------------------

def test_literal_bootstrap_properties():
    props = cib("bootstrap-literal.xml").properties
    assert props.transition_idle_timeout == 60_000
    assert props.default_resource_stickiness is PLUS_INFINITY
    assert props.default_resource_failure_stickiness == Score.finite(-500)
    assert props.stonith_enabled and props.stonith_action is FenceAction.REBOOT
    assert props.symmetric_cluster and props.no_quorum_policy == "stop"


def test_vm_primitive():
    spec = cib("vm01.xml").resources["vm01"]
    assert spec.kind is Kind.PRIMITIVE and spec.agent == "GuestVM" and spec.agent_type == "Xen"
    assert spec.op("monitor").interval == 10_000 and spec.op("monitor").timeout == 60_000
    assert spec.op("start").timeout == 60_000 and spec.op("stop").timeout == 300_000
    assert spec.op("migrate").timeout == 20_000  # default
    assert spec.params["xmfile"] == "/drbd0/xen/vm01/vm01.cfg"
    assert spec.started and spec.allow_migrate


def test_stonith_clone():
    cfg = cib("stonith-ssh.xml")
    spec = cfg.resources["stonithclone"]
    assert spec.kind is Kind.CLONE and spec.agent == "FenceDevice"
    assert spec.instance_ids(["node1", "node2"]) == ["stonithclone:0", "stonithclone:1"]
    dev = spec.fence_device(cfg.properties)
    assert dev.kind is FenceKind.SSH_RESET and dev.hostlist == {"node1", "node2"}


def test_locations_attach_to_resources():
    cfg = canonical()
    assert cfg.resources["vm1"].location_preferences == {"node1": Score.finite(200)}
    assert cfg.resources["vm4"].location_preferences == {"node2": Score.finite(200)}
    assert [r.id for r in cfg.primitives] == ["vm1", "vm2", "vm3", "vm4"]


def test_unknown_attributes_warn():
    doc = parse_cib('<primitive id="x" class="ocf" type="Xen" colour="red"/>')
    assert len(doc.warnings) == 1 and "colour" in doc.warnings[0]


@pytest.mark.parametrize("xml", [
    "<cib><oops></cib>",
    '<primitive id="x" class="ocf" type="Apache"/>',
    '<primitive id="x" class="stonith" type="laser"/>',
    '<clone id="c"/>',
])
def test_bad_cib_rejected(xml):
    with pytest.raises(ConfigError):
        load_config([parse_cib(xml)])


def test_duplicate_ids_and_dangling_locations_rejected():
    a = parse_cib('<primitive id="x" class="ocf" type="Xen"/>')
    with pytest.raises(ConfigError):
        load_config([a, a])
    loc = parse_cib('<rsc_location rsc="nope" node="node1" score="5"/>')
    with pytest.raises(ConfigError):
        load_config([loc])


def test_property_validation():
    with pytest.raises(ConfigError):
        ClusterProperties.from_nvpairs({"no-quorum-policy": "freeze"})
    with pytest.raises(ConfigError):
        ClusterProperties.from_nvpairs({"stonith-action": "dance"})
    p = ClusterProperties.from_nvpairs({"mystery": "1"})
    assert p.extra == {"mystery": "1"}


# -- placement --------------------------------------------------------------

def test_initial_placement_follows_locations():
    plan = compute_transition(state(), canonical())
    starts = {(a.resource, a.node) for a in plan.phase("start")}
    assert ("vm1", "node1") in starts and ("vm3", "node2") in starts
    assert ("stonithclone:0", "node1") in starts and ("stonithclone:1", "node2") in starts


def test_steady_state_plans_nothing():
    plan = compute_transition(state(active=placed()), canonical())
    assert plan.actions == []


def test_dead_node_is_fenced_before_takeover():
    active = placed()
    plan = compute_transition(state(members=("node2",), active=active, unclean={"node1"}),
                              canonical())
    assert [str(a) for a in plan.actions] == [
        "fence(node1)", "start(vm1@node2)", "start(vm2@node2)"]


def test_no_fence_device_blocks_the_transition():
    plan = compute_transition(state(members=("node2",), active=placed(), unclean={"node1"},
                                    fence_hosts={}), canonical())
    assert plan.actions == [] and "node1" in plan.blocked


def test_failback_with_finite_stickiness():
    # node1 is back; vm1 sits on node2 with stickiness 100 < location 200
    active = {"vm1": {"node2"}, "vm2": {"node2"}, "vm3": {"node2"}, "vm4": {"node2"}}
    plan = compute_transition(state(active=active), canonical())
    assert Action("stop", "node2", "vm1") in plan.actions
    assert Action("start", "node1", "vm1") in plan.actions
    assert Action("stop", "node2", "vm3") not in plan.actions


def test_infinite_stickiness_prevents_failback():
    cfg = cib("bootstrap-literal.xml", "stonith-power.xml", "vms.xml")
    active = {"vm1": {"node2"}, "vm2": {"node2"}, "vm3": {"node2"}, "vm4": {"node2"}}
    plan = compute_transition(state(active=active, config=cfg), cfg)
    assert not [a for a in plan.actions if a.resource and a.resource.startswith("vm")]


def test_migratable_resources_migrate():
    cfg = cib("bootstrap.xml", "stonith-power.xml", "vms-migratable.xml")
    active = {"vm1": {"node2"}}
    plan = compute_transition(state(active=active, config=cfg), cfg)
    assert Action("migrate", "node2", "vm1", "node1") in plan.actions


def test_leaving_node_is_emptied():
    plan = compute_transition(state(active=placed(), leaving={"node1"}), canonical())
    assert Action("stop", "node1", "vm1") in plan.actions
    assert Action("start", "node2", "vm1") in plan.actions
    assert Action("stop", "node1", "stonithclone:0") in plan.actions


def test_no_quorum_stop_stops_everything():
    plan = compute_transition(state(members=("node2",), active=placed()), canonical(),
                              QuorumVerdict.STOP_ALL)
    assert plan.quorum_stop
    assert {a.kind for a in plan.actions} == {"stop"}
    assert {a.resource for a in plan.actions} == {"vm3", "vm4", "stonithclone:1"}


def test_fail_counts_push_resources_away():
    cfg = canonical()
    cfg.properties.default_resource_failure_stickiness = Score.finite(-500)
    st = state(active={}, fail_counts={("vm1", "node1"): 1})
    assert choose_node(cfg.resources["vm1"], st, cfg.properties) == "node2"


def test_ties_go_to_the_lowest_node():
    cfg = cib("bootstrap.xml", "vm01.xml")
    assert choose_node(cfg.resources["vm01"], state(config=cfg, fence_hosts={}),
                       cfg.properties) == "node1"


def test_plan_phase_order():
    active = {"vm1": {"node1"}, "vm3": {"node1"}}
    cfg = cib("bootstrap.xml", "stonith-power.xml", "vms-migratable.xml")
    plan = compute_transition(state(active=active, config=cfg), cfg)
    kinds = [a.kind for a in plan.actions]
    order = {"fence": 0, "stop": 1, "migrate": 2, "start": 3}
    assert kinds == sorted(kinds, key=order.__getitem__)
    assert "migrate" in kinds and "start" in kinds
