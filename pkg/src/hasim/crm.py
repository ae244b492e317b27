"""Cluster resource manager.

Holds cluster properties and resource definitions (parsed from CIB XML),
scores nodes for each resource, plans transitions in fence -> stop ->
migrate -> start order and executes them through the per-node local
resource managers.  The designated coordinator (DC) is the lowest node id
in a node's own membership view; only the DC plans.
"""

from __future__ import annotations

import dataclasses
import itertools
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Callable, Iterable, Optional

from .drbd import DeviceError, ReplicatedDevice, Role
from .engine import Message, Power, Simulator
from .fencing import AGENT_TYPES, FenceAction, FenceDevice, FenceKind, FenceResult, fence
from .membership import QuorumVerdict
from .units import parse_duration
from .workload import GuestVM, VmState

if TYPE_CHECKING:
    from .membership import Membership


class ConfigError(ValueError):
    pass


FAILURE_BACKOFF = 1000  # ms between a failed action and the next plan
PLANS_PER_MS = 10  # more transitions than this in one millisecond is a loop


# ---------------------------------------------------------------------------
# score algebra

@dataclass(frozen=True, order=False)
class Score:
    """Finite integer or +/-INFINITY; -INFINITY absorbs everything."""

    rank: int  # -1 minus infinity, 0 finite, +1 plus infinity
    value: int = 0

    @classmethod
    def finite(cls, n: int) -> "Score":
        return cls(0, int(n))

    @classmethod
    def parse(cls, text) -> "Score":
        if isinstance(text, Score):
            return text
        t = str(text).strip().upper()
        if t in ("INFINITY", "+INFINITY", "INF", "+INF"):
            return PLUS_INFINITY
        if t in ("-INFINITY", "-INF"):
            return MINUS_INFINITY
        try:
            return cls.finite(int(t))
        except ValueError:
            raise ConfigError(f"bad score {text!r}") from None

    def __add__(self, other: "Score") -> "Score":
        if not isinstance(other, Score):
            other = Score.finite(other)
        if self.rank < 0 or other.rank < 0:
            return MINUS_INFINITY
        if self.rank > 0 or other.rank > 0:
            return PLUS_INFINITY
        return Score.finite(self.value + other.value)

    __radd__ = __add__

    def __mul__(self, n: int) -> "Score":
        if n == 0:
            return ZERO
        if self.rank == 0:
            return Score.finite(self.value * n)
        return self if n > 0 else Score(-self.rank)

    def _key(self) -> tuple[int, int]:
        return (self.rank, self.value if self.rank == 0 else 0)

    def __lt__(self, other: "Score") -> bool:
        return self._key() < other._key()

    def __le__(self, other: "Score") -> bool:
        return self._key() <= other._key()

    def __gt__(self, other: "Score") -> bool:
        return self._key() > other._key()

    def __ge__(self, other: "Score") -> bool:
        return self._key() >= other._key()

    def __str__(self) -> str:
        if self.rank > 0:
            return "INFINITY"
        if self.rank < 0:
            return "-INFINITY"
        return str(self.value)


PLUS_INFINITY = Score(1)
MINUS_INFINITY = Score(-1)
ZERO = Score(0, 0)


# ---------------------------------------------------------------------------
# configuration

def _bool(text: str) -> bool:
    return str(text).strip().lower() in ("true", "yes", "on", "1")


@dataclass
class ClusterProperties:
    transition_idle_timeout: int = 60_000
    default_resource_stickiness: Score = ZERO
    default_resource_failure_stickiness: Score = ZERO
    stonith_enabled: bool = True
    stonith_action: FenceAction = FenceAction.REBOOT
    symmetric_cluster: bool = True
    no_quorum_policy: str = "stop"
    stop_orphan_resources: bool = True
    stop_orphan_actions: bool = True
    is_managed_default: bool = True
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_nvpairs(cls, pairs: dict) -> "ClusterProperties":
        p = cls()
        for name, value in pairs.items():
            key = name.replace("_", "-")
            if key == "transition-idle-timeout":
                p.transition_idle_timeout = parse_duration(value, "s")
            elif key == "default-resource-stickiness":
                p.default_resource_stickiness = Score.parse(value)
            elif key == "default-resource-failure-stickiness":
                p.default_resource_failure_stickiness = Score.parse(value)
            elif key == "stonith-enabled":
                p.stonith_enabled = _bool(value)
            elif key == "stonith-action":
                try:
                    p.stonith_action = FenceAction(value.lower())
                except ValueError:
                    raise ConfigError(f"bad stonith-action {value!r}") from None
            elif key == "symmetric-cluster":
                p.symmetric_cluster = _bool(value)
            elif key == "no-quorum-policy":
                if value.lower() not in ("stop", "ignore"):
                    raise ConfigError(f"unsupported no-quorum-policy {value!r}")
                p.no_quorum_policy = value.lower()
            elif key == "stop-orphan-resources":
                p.stop_orphan_resources = _bool(value)
            elif key == "stop-orphan-actions":
                p.stop_orphan_actions = _bool(value)
            elif key == "is-managed-default":
                p.is_managed_default = _bool(value)
            else:
                p.extra[name] = value
        if p.transition_idle_timeout <= 0:
            raise ConfigError("transition-idle-timeout must be positive")
        return p


@dataclass(frozen=True)
class Op:
    name: str
    interval: int = 0
    timeout: int = 20_000


class Kind(Enum):
    PRIMITIVE = "primitive"
    CLONE = "clone"


@dataclass
class ResourceSpec:
    id: str
    kind: Kind = Kind.PRIMITIVE
    agent: str = "GuestVM"  # or "FenceDevice"
    agent_type: str = "Xen"
    ops: dict = field(default_factory=dict)
    target_role: str = "started"
    allow_migrate: bool = False
    location_preferences: dict = field(default_factory=dict)
    clone_node_max: int = 1
    clone_max: Optional[int] = None
    params: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def validate(self) -> "ResourceSpec":
        for op in self.ops.values():
            if op.timeout <= 0:
                raise ConfigError(f"{self.id}: nonpositive timeout on op {op.name}")
            if op.interval < 0:
                raise ConfigError(f"{self.id}: negative interval on op {op.name}")
        if self.clone_node_max < 1:
            raise ConfigError(f"{self.id}: clone_node_max must be >= 1")
        if self.agent not in ("GuestVM", "FenceDevice"):
            raise ConfigError(f"{self.id}: unknown agent kind {self.agent!r}")
        return self

    def op(self, name: str) -> Op:
        defaults = {"start": Op("start", 0, 20_000), "stop": Op("stop", 0, 20_000),
                    "monitor": Op("monitor", 0, 20_000), "migrate": Op("migrate", 0, 20_000)}
        return self.ops.get(name) or defaults[name]

    @property
    def started(self) -> bool:
        return self.target_role.lower() == "started"

    def fence_device(self, props: ClusterProperties) -> FenceDevice:
        hosts = [h.strip() for h in self.params.get("hostlist", "").replace(" ", ",").split(",")]
        return FenceDevice(AGENT_TYPES[self.agent_type], frozenset(h for h in hosts if h),
                           props.stonith_action, self.op("start").timeout)

    def instance_ids(self, nodes: list[str]) -> list[str]:
        if self.kind is Kind.PRIMITIVE:
            return [self.id]
        return [f"{self.id}:{i}" for i in range(self.clone_max or len(nodes))]


@dataclass
class CibDocument:
    properties: dict = field(default_factory=dict)
    resources: list = field(default_factory=list)
    locations: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


def _nvpairs(elem: Optional[ET.Element]) -> dict:
    if elem is None:
        return {}
    return {nv.get("name"): nv.get("value") for nv in elem.iter("nvpair")}


_OP_ATTRS = {"id", "name", "interval", "timeout", "prereq", "start_delay", "start-delay",
             "on_fail", "on-fail", "role"}
_PRIM_ATTRS = {"id", "class", "type", "provider"}


def _parse_primitive(prim: ET.Element, doc: CibDocument) -> ResourceSpec:
    rid = prim.get("id")
    if not rid:
        raise ConfigError("primitive without id")
    cls, typ = (prim.get("class") or "").lower(), prim.get("type") or ""
    for attr in set(prim.attrib) - _PRIM_ATTRS:
        doc.warnings.append(f"{rid}: unknown attribute {attr}={prim.get(attr)!r} ignored")
    if cls == "stonith":
        if typ not in AGENT_TYPES:
            raise ConfigError(f"{rid}: unknown agent kind stonith:{typ}")
        agent = "FenceDevice"
    elif cls in ("ocf", "heartbeat", "lsb") and typ.lower() == "xen":
        agent = "GuestVM"
    else:
        raise ConfigError(f"{rid}: unknown agent kind {cls}:{typ}")
    ops = {}
    for op in prim.iter("op"):
        name = op.get("name")
        for attr in set(op.attrib) - _OP_ATTRS:
            doc.warnings.append(f"{rid}: unknown op attribute {attr} ignored")
        try:
            ops[name] = Op(name, parse_duration(op.get("interval", "0"), "s"),
                           parse_duration(op.get("timeout", "20s"), "s"))
        except ValueError as exc:
            raise ConfigError(f"{rid}: malformed op {name}: {exc}") from None
    params = _nvpairs(prim.find("instance_attributes"))
    meta = _nvpairs(prim.find("meta_attributes"))
    spec = ResourceSpec(rid, Kind.PRIMITIVE, agent, typ, ops, params=params, meta=meta)
    role = meta.get("target_role") or meta.get("target-role") or params.get("target_role") \
        or params.get("target-role")
    if role:
        spec.target_role = role.lower()
    spec.allow_migrate = _bool(meta.get("allow_migrate") or meta.get("allow-migrate") or "false")
    return spec


def parse_cib(text: str) -> CibDocument:
    """Parse a CIB-XML fragment: property sets, primitives, clones, locations."""
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise ConfigError(f"bad CIB XML: {exc}") from None
    doc = CibDocument()
    for cps in root.iter("cluster_property_set"):
        doc.properties.update(_nvpairs(cps))
    in_clone = set()
    for clone in root.iter("clone"):
        prim = clone.find("primitive")
        if prim is None:
            raise ConfigError(f"clone {clone.get('id')} has no primitive")
        in_clone.add(id(prim))
        spec = _parse_primitive(prim, doc)
        spec.id = clone.get("id") or spec.id
        spec.kind = Kind.CLONE
        clone_attrs = {}
        for child in clone:
            if child.tag in ("instance_attributes", "meta_attributes"):
                clone_attrs.update(_nvpairs(child))
        spec.clone_node_max = int(clone_attrs.get("clone_node_max", clone_attrs.get("clone-node-max", 1)))
        if "clone_max" in clone_attrs or "clone-max" in clone_attrs:
            spec.clone_max = int(clone_attrs.get("clone_max", clone_attrs.get("clone-max")))
        doc.resources.append(spec)
    for prim in root.iter("primitive"):
        if id(prim) not in in_clone:
            doc.resources.append(_parse_primitive(prim, doc))
    for loc in root.iter("rsc_location"):
        doc.locations.append((loc.get("rsc"), loc.get("node"), Score.parse(loc.get("score", "0"))))
    return doc


@dataclass
class ManagerConfig:
    properties: ClusterProperties
    resources: dict

    @property
    def primitives(self) -> list[ResourceSpec]:
        return [r for r in self.resources.values() if r.kind is Kind.PRIMITIVE]

    @property
    def clones(self) -> list[ResourceSpec]:
        return [r for r in self.resources.values() if r.kind is Kind.CLONE]


def load_config(docs: Iterable[CibDocument]) -> ManagerConfig:
    """Merge CIB documents into one validated manager configuration."""
    props: dict = {}
    resources: dict = {}
    locations = []
    for doc in docs:
        props.update(doc.properties)
        for spec in doc.resources:
            if spec.id in resources:
                raise ConfigError(f"duplicate resource id {spec.id!r}")
            resources[spec.id] = spec.validate()
        locations.extend(doc.locations)
    for rsc, node, score in locations:
        if rsc not in resources:
            raise ConfigError(f"location constraint for unknown resource {rsc!r}")
        resources[rsc].location_preferences[node] = score
    return ManagerConfig(ClusterProperties.from_nvpairs(props),
                         dict(sorted(resources.items())))


# ---------------------------------------------------------------------------
# planning

@dataclass
class ClusterState:
    """The DC's picture of the cluster at planning time."""

    nodes: list
    members: set
    unclean: set = field(default_factory=set)
    leaving: set = field(default_factory=set)
    active: dict = field(default_factory=dict)  # instance id -> set of nodes
    failed: set = field(default_factory=set)  # (resource, node)
    fail_counts: dict = field(default_factory=dict)  # (resource, node) -> int
    fence_hosts: dict = field(default_factory=dict)  # node -> [FenceDevice]
    eligible: Optional[set] = None  # nodes allowed to run guests

    def where(self, rid: str) -> set:
        return set(self.active.get(rid, ()))


@dataclass(frozen=True)
class Action:
    kind: str  # fence | stop | migrate | start
    node: str
    resource: Optional[str] = None
    target: Optional[str] = None

    def __str__(self) -> str:
        if self.kind == "fence":
            return f"fence({self.node})"
        if self.kind == "migrate":
            return f"migrate({self.resource}@{self.node}->{self.target})"
        return f"{self.kind}({self.resource}@{self.node})"


PHASES = ("fence", "stop", "migrate", "start")


@dataclass
class Plan:
    actions: list = field(default_factory=list)
    blocked: Optional[str] = None
    quorum_stop: bool = False

    def phase(self, kind: str) -> list[Action]:
        return [a for a in self.actions if a.kind == kind]

    def __str__(self) -> str:
        return "[" + ", ".join(str(a) for a in self.actions) + "]"


def resource_of(instance: str) -> str:
    return instance.split(":", 1)[0]


def score(spec: ResourceSpec, node: str, state: ClusterState,
          props: ClusterProperties) -> Score:
    if (node not in state.members or node in state.unclean or node in state.leaving):
        return MINUS_INFINITY
    if spec.agent == "GuestVM" and state.eligible is not None and node not in state.eligible:
        return MINUS_INFINITY
    if node in spec.location_preferences:
        s = spec.location_preferences[node]
    else:
        s = ZERO if props.symmetric_cluster else MINUS_INFINITY
    if node in state.where(spec.id) and (spec.id, node) not in state.failed:
        sticky = spec.meta.get("resource_stickiness") or spec.meta.get("resource-stickiness")
        s = s + (Score.parse(sticky) if sticky is not None else props.default_resource_stickiness)
    fails = state.fail_counts.get((spec.id, node), 0)
    if fails:
        s = s + props.default_resource_failure_stickiness * fails
    return s


def choose_node(spec: ResourceSpec, state: ClusterState,
                props: ClusterProperties) -> Optional[str]:
    """Argmax of the score; ties go to the lowest node id."""
    best, best_score = None, MINUS_INFINITY
    for node in sorted(state.nodes):
        s = score(spec, node, state, props)
        if s.rank < 0:
            continue
        if best is None or s > best_score:
            best, best_score = node, s
    return best


def compute_transition(state: ClusterState, config: ManagerConfig,
                       quorum: QuorumVerdict = QuorumVerdict.PROCEED) -> Plan:
    props = config.properties
    members = state.members
    if quorum is QuorumVerdict.STOP_ALL:
        stops = []
        for spec in config.resources.values():
            for inst in spec.instance_ids(state.nodes):
                for n in sorted(state.where(inst) & members):
                    stops.append(Action("stop", n, inst))
        return Plan(stops, quorum_stop=True)

    fences = []
    if props.stonith_enabled:
        for target in sorted(state.unclean):
            capable = any(target in dev.hostlist
                          for n in sorted(members - {target})
                          for dev in state.fence_hosts.get(n, ()))
            if not capable:
                return Plan([], blocked=f"no fence device can reach {target}")
            fences.append(Action("fence", target))

    stops, migrates, starts = [], [], []
    for spec in config.primitives:
        live = state.where(spec.id) & members
        failed_here = {n for n in live if (spec.id, n) in state.failed}
        if not spec.started:
            stops += [Action("stop", n, spec.id) for n in sorted(live)]
            continue
        chosen = choose_node(spec, state, props)
        if chosen is None:
            stops += [Action("stop", n, spec.id) for n in sorted(live)]
            continue
        keep = chosen in live and chosen not in failed_here
        if keep and live == {chosen}:
            continue
        stranded = state.where(spec.id) - members
        if (not keep and spec.allow_migrate and len(live) == 1 and not failed_here
                and not stranded and chosen not in live):
            migrates.append(Action("migrate", next(iter(live)), spec.id, chosen))
            continue
        stops += [Action("stop", n, spec.id) for n in sorted(live)
                  if n != chosen or n in failed_here]
        if not keep:
            starts.append(Action("start", chosen, spec.id))

    for spec in config.clones:
        ids = spec.instance_ids(state.nodes)
        for idx, inst in enumerate(ids):
            node = state.nodes[idx] if idx < len(state.nodes) else None
            live = state.where(inst) & members
            if node is None or not spec.started:
                stops += [Action("stop", n, inst) for n in sorted(live)]
                continue
            want = node in members and node not in state.unclean and node not in state.leaving \
                and (inst, node) not in state.failed
            stops += [Action("stop", n, inst) for n in sorted(live)
                      if n != node or not want or (inst, n) in state.failed]
            if want and (node not in live or (inst, node) in state.failed):
                starts.append(Action("start", node, inst))

    return Plan(fences + stops + migrates + starts)


# ---------------------------------------------------------------------------
# local resource manager

Done = Callable[[bool, str], None]


class Lrm:
    """Executes actions for one node and monitors what runs there."""

    def __init__(self, sim: Simulator, node: str, config: ManagerConfig,
                 device: Optional[ReplicatedDevice], durations: dict) -> None:
        self.sim = sim
        self.node = node
        self.config = config
        self.device = device
        self.durations = durations
        self.instances: dict[str, GuestVM] = {}
        self.crashed: set = set()
        self.monitor_sink: Optional[Callable[[str, str, bool], None]] = None
        self.suspended = False
        self.peers: dict[str, "Lrm"] = {}
        self._waiting_ready: list[Callable[[], None]] = []
        if device is not None:
            device.ready_listeners.append(self._device_ready)

    def spec(self, inst: str) -> ResourceSpec:
        return self.config.resources[resource_of(inst)]

    def active(self) -> dict[str, VmState]:
        return {i: vm.state for i, vm in self.instances.items() if vm.active}

    def _trace(self, kind: str, detail: str) -> None:
        self.sim.record(self.node, "vm", kind, detail)

    def _new_instance(self, inst: str) -> GuestVM:
        spec = self.spec(inst)
        if spec.agent == "GuestVM":
            d = self.durations
            return GuestVM(inst, self.node, boot_duration=d["vm_boot"], stop_duration=d["vm_stop"],
                           migrate_duration=d["vm_migrate"])
        return GuestVM(inst, self.node, boot_duration=self.durations["fence_start"],
                       stop_duration=0, migrate_duration=0)

    def uses_device(self, inst: str) -> bool:
        return self.device is not None and self.spec(inst).agent == "GuestVM" \
            and self.node in self.device.replicas

    # -- warm start -----------------------------------------------------
    def adopt_running(self, inst: str) -> None:
        vm = self._new_instance(inst)
        vm.state = VmState.RUNNING
        self.instances[inst] = vm
        self._trace("running", f"{inst} running on {self.node}")
        self._schedule_monitor(inst)

    # -- actions --------------------------------------------------------
    def execute(self, action: Action, done: Done) -> None:
        handler = {"start": self.start, "stop": self.stop, "migrate": self.migrate}[action.kind]
        handler(action, done)

    def start(self, action: Action, done: Done) -> None:
        inst = action.resource
        vm = self.instances.get(inst)
        if vm is not None and vm.active:
            done(vm.state in (VmState.RUNNING, VmState.STARTING), "already active")
            return
        vm = self._new_instance(inst)
        vm.state = VmState.STARTING
        self.instances[inst] = vm
        self.crashed.discard(inst)
        self._trace("start", f"start {inst} on {self.node}")
        timeout = self.spec(inst).op("start").timeout

        def fail(reason: str) -> None:
            if self.instances.get(inst) is not vm or vm.state is not VmState.STARTING:
                return
            vm.state = VmState.STOPPED
            del self.instances[inst]
            self._trace("start-failed", f"start {inst} on {self.node} failed: {reason}")
            done(False, reason)

        def booted() -> None:
            if self.instances.get(inst) is not vm or vm.state is not VmState.STARTING:
                return
            vm.state = VmState.RUNNING
            vm.until = None
            self._trace("running", f"{inst} running on {self.node}")
            self._schedule_monitor(inst)
            done(True, "")

        def begin_boot() -> None:
            if self.instances.get(inst) is not vm or vm.state is not VmState.STARTING:
                return
            if self.uses_device(inst):
                try:
                    self.device.set_role(self.node, Role.PRIMARY)
                except DeviceError as exc:
                    if str(exc) == "inconsistent data":
                        self._waiting_ready.append(begin_boot)
                        return
                    fail(str(exc))
                    return
            vm.until = self.sim.clock + vm.boot_duration
            self.sim.timer(self.node, vm.boot_duration, booted, label=f"boot {inst}")

        self.sim.timer(self.node, timeout, lambda: fail("timeout"), label=f"start timeout {inst}")
        begin_boot()

    def _device_ready(self, node: str) -> None:
        if node != self.node:
            return
        waiting, self._waiting_ready = self._waiting_ready, []
        for fn in waiting:
            fn()

    def stop(self, action: Action, done: Done) -> None:
        inst = action.resource
        vm = self.instances.get(inst)
        if vm is None or not vm.active:
            done(True, "not running")
            return
        if vm.state is VmState.STOPPING:
            done(False, "stop already in progress")
            return
        vm.state = VmState.STOPPING
        vm.until = self.sim.clock + vm.stop_duration
        self._trace("stop", f"stop {inst} on {self.node}")
        timeout = self.spec(inst).op("stop").timeout
        result = {"sent": False}

        def stopped() -> None:
            if self.instances.get(inst) is not vm:
                return
            del self.instances[inst]
            vm.state = VmState.STOPPED
            self._trace("stopped", f"{inst} stopped on {self.node}")
            self._maybe_demote()
            if not result["sent"]:
                result["sent"] = True
                done(True, "")

        def expire() -> None:
            if not result["sent"] and self.instances.get(inst) is vm:
                result["sent"] = True
                self._trace("stop-timeout", f"stop {inst} on {self.node} timed out")
                done(False, "timeout")

        if vm.stop_duration > timeout:
            self.sim.timer(self.node, timeout, expire, label=f"stop timeout {inst}")
        self.sim.timer(self.node, vm.stop_duration, stopped, label=f"stop {inst}")

    def _maybe_demote(self) -> None:
        if self.device is None or self.node not in self.device.replicas:
            return
        if any(self.uses_device(i) for i, vm in self.instances.items() if vm.active):
            return
        r = self.device.replica(self.node)
        if r.role is Role.PRIMARY:
            self.device.set_role(self.node, Role.SECONDARY)

    def migrate(self, action: Action, done: Done) -> None:
        inst, dst = action.resource, action.target
        vm = self.instances.get(inst)
        if vm is None or vm.state is not VmState.RUNNING:
            done(False, "not running")
            return
        target = self.peers.get(dst)
        if target is None or not self.sim.is_running(dst):
            done(False, "target down")
            return
        if self.uses_device(inst):
            try:
                self.device.set_role(dst, Role.PRIMARY)
            except DeviceError as exc:
                done(False, str(exc))
                return
        vm.state = VmState.MIGRATING
        vm.until = self.sim.clock + vm.migrate_duration
        self.sim.record(self.node, "vm", "migrate", f"migrate {inst} from {self.node} to {dst}")

        def finished() -> None:
            if self.instances.get(inst) is not vm or vm.state is not VmState.MIGRATING:
                return
            if not self.sim.is_running(dst):
                vm.state = VmState.RUNNING
                done(False, "target lost during migration")
                return
            del self.instances[inst]
            self._trace("stopped", f"{inst} stopped on {self.node} (migrated)")
            new = target._new_instance(inst)
            new.state = VmState.RUNNING
            target.instances[inst] = new
            self.sim.record(self.node, "vm", "running", f"{inst} running on {dst}")
            target._schedule_monitor(inst)
            self._maybe_demote()
            done(True, "")

        self.sim.timer(self.node, vm.migrate_duration, finished, label=f"migrate {inst}")

    # -- monitoring -------------------------------------------------------
    def _schedule_monitor(self, inst: str) -> None:
        interval = self.spec(inst).op("monitor").interval
        if interval <= 0:
            return
        vm = self.instances[inst]
        self.sim.timer(self.node, interval, lambda: self._monitor(inst, vm),
                       label=f"monitor {inst}")

    def _monitor(self, inst: str, vm: GuestVM) -> None:
        if self.instances.get(inst) is not vm or vm.state is not VmState.RUNNING:
            return
        if not self.suspended:
            ok = self.check(inst)
            if not ok:
                self._trace("monitor-failed", f"monitor {inst} on {self.node} failed")
                if self.monitor_sink is not None:
                    self.monitor_sink(inst, self.node, False)
                return
        self._schedule_monitor(inst)

    def check(self, inst: str) -> bool:
        if inst in self.crashed:
            return False
        if self.uses_device(inst):
            return self.device.io_available(self.node)
        return True

    def power_lost(self) -> None:
        for inst, vm in sorted(self.instances.items()):
            if vm.active:
                self.sim.record(None, "vm", "killed", f"{inst} killed on {self.node}")
        self.instances.clear()
        self._waiting_ready.clear()
        self.crashed.clear()
        self.suspended = False


# ---------------------------------------------------------------------------
# cluster resource manager (one per node)

@dataclass
class _InFlight:
    action: Action
    id: int


class Crm:
    def __init__(self, sim: Simulator, node: str, config: ManagerConfig,
                 membership: "Membership", lrm: Lrm, registry: dict,
                 fail_counts: dict, settle: int, eligible: Optional[set] = None) -> None:
        self.sim = sim
        self.node = node
        self.config = config
        self.membership = membership
        self.lrm = lrm
        self.registry = registry  # node -> Crm, the probe channel
        self.fail_counts = fail_counts
        self.settle = settle
        self.eligible = eligible
        self.nodes = list(membership.cfg.node_list)
        self.ready = False
        self.unclean: set = set()
        self.leaving: set = set()
        self.last_known: dict[str, set] = {}
        self.failed: set = set()
        self.plan: Optional[Plan] = None
        self.plan_actions: list[Action] = []
        self.phase_idx = 0
        self.inflight: dict[int, Action] = {}
        self.dirty = False
        self.progress_at = 0
        self.retry_timer = None
        self.shutting_down = False
        self.fence_latency = 500
        self.plans: list[tuple[int, Plan]] = []
        self._ids = itertools.count(1)
        membership.listeners.append(self._on_membership)
        lrm.monitor_sink = self._monitor_report
        for kind, fn in (("crm-action", self._on_action_msg), ("crm-result", self._on_result_msg),
                         ("crm-monitor", self._on_monitor_msg), ("crm-leave", self._on_leave_msg),
                         ("crm-fenced", self._on_fenced_msg)):
            sim.register(node, kind, fn)

    # -- lifecycle ------------------------------------------------------
    def warm_start(self) -> None:
        self.ready = True

    def boot(self) -> None:
        self.ready = False
        self.unclean.clear()
        self.leaving.clear()
        self.last_known.clear()
        self.failed.clear()
        self._reset_plan()
        self.shutting_down = False
        self.sim.timer(self.node, self.settle, self._settled, label=f"crm settle {self.node}")

    def _settled(self) -> None:
        self.ready = True
        for peer in self.nodes:
            if peer != self.node and peer not in self.membership.view.alive:
                self.unclean.add(peer)
        self.sim.record(self.node, "crm", "settled", f"{self.node} crm settled, view "
                        f"{','.join(sorted(self.membership.view.alive))}")
        self.kick("startup")

    def _reset_plan(self) -> None:
        self.plan = None
        self.plan_actions = []
        self.inflight.clear()
        self.dirty = False

    @property
    def active_service(self) -> bool:
        return self.sim.is_running(self.node) and not self.membership.stopped

    @property
    def dc(self) -> str:
        return min(self.membership.view.alive)

    @property
    def is_dc(self) -> bool:
        return self.active_service and self.ready and self.dc == self.node

    # -- triggers -------------------------------------------------------
    def _on_membership(self, owner: str, peer: str, change: str) -> None:
        if change == "dead":
            # silent before its final goodbye: the shutdown did not finish cleanly
            self.unclean.add(peer)
            self.leaving.discard(peer)
        elif change == "left":
            self.unclean.discard(peer)
            self.leaving.discard(peer)
            self.last_known.pop(peer, None)
        elif change == "alive":
            self.unclean.discard(peer)
            self.leaving.discard(peer)
        if self.plan is not None and not (self.dc == self.node):
            self._reset_plan()
        self.kick(f"membership {peer} {change}")

    def kick(self, reason: str = "") -> None:
        if not self.is_dc:
            return
        if self.plan is not None:
            self.dirty = True
            return
        recent = sum(1 for t, _p in self.plans[-PLANS_PER_MS:] if t == self.sim.clock)
        if recent >= PLANS_PER_MS:
            self.sim.record(self.node, "crm", "throttle", "transition loop: replanning deferred")
            self._defer_kick(reason)
            return
        self._compute_and_run(reason)

    def _defer_kick(self, reason: str) -> None:
        self.sim.timer(self.node, FAILURE_BACKOFF, lambda: self.kick(reason), label="replan")

    # -- state probe ----------------------------------------------------
    def cluster_state(self) -> ClusterState:
        members = set(self.membership.view.alive)
        active: dict[str, set] = {}
        fence_hosts: dict[str, list] = {}
        for n in sorted(members):
            if not self.sim.is_running(n):
                # unreachable but not yet declared dead: the probe times out and
                # the last answer stands
                for inst in self.last_known.get(n, ()):
                    active.setdefault(inst, set()).add(n)
                continue
            insts = self.registry[n].lrm.active()
            self.last_known[n] = set(insts)
            for inst, vstate in insts.items():
                active.setdefault(inst, set()).add(n)
                spec = self.config.resources[resource_of(inst)]
                if spec.agent == "FenceDevice" and vstate is VmState.RUNNING:
                    fence_hosts.setdefault(n, []).append(spec.fence_device(self.config.properties))
        for n in sorted(self.unclean - members):
            for inst in self.last_known.get(n, ()):
                active.setdefault(inst, set()).add(n)
        return ClusterState(list(self.nodes), members, set(self.unclean) - members,
                            set(self.leaving) & members, active, set(self.failed),
                            self.fail_counts, fence_hosts, self.eligible)

    # -- planning & execution ----------------------------------------------
    def _compute_and_run(self, reason: str) -> None:
        if any(not self.sim.is_running(n) and n not in self.last_known
               for n in self.membership.view.alive):
            return  # a member never answered a probe; its death will kick us again
        state = self.cluster_state()
        verdict = self.membership.quorum(self.config.properties.no_quorum_policy)
        plan = compute_transition(state, self.config, verdict)
        previous = self.plans[-1][1] if self.plans else None
        if plan.blocked:
            self.plans.append((self.sim.clock, plan))
            self.sim.record(self.node, "crm", "blocked", f"transition blocked: {plan.blocked}")
            self._schedule_retry()
            return
        if not plan.actions:
            if previous is not None and previous.actions and self._all_started(state):
                self.sim.record(self.node, "crm", "normal", "service normal: all resources started")
            if previous is None or previous.actions:
                self.plans.append((self.sim.clock, plan))
            return
        if plan.quorum_stop:
            self.sim.record(self.node, "crm", "quorum",
                            f"{self.node} has no quorum: stopping all resources")
        self.plans.append((self.sim.clock, plan))
        self.sim.record(self.node, "crm", "transition", f"{self.node} plan {plan}")
        self.plan = plan
        self.plan_actions = list(plan.actions)
        self.phase_idx = 0
        self._touch()
        self._run_phase()

    def _all_started(self, state: ClusterState) -> bool:
        for spec in self.config.primitives:
            if spec.started:
                nodes = state.where(spec.id) & state.members
                if not any(self.registry[n].lrm.active().get(spec.id) is VmState.RUNNING
                           for n in nodes):
                    return False
        return True

    def _touch(self) -> None:
        self.progress_at = self.sim.clock
        plan = self.plan
        idle = self.config.properties.transition_idle_timeout
        self.sim.timer(self.node, idle, lambda: self._idle_check(plan), label="transition idle")

    def _idle_check(self, plan: Optional[Plan]) -> None:
        idle = self.config.properties.transition_idle_timeout
        if self.plan is plan and plan is not None and self.sim.clock - self.progress_at >= idle:
            self.sim.record(self.node, "crm", "abort", "transition aborted: idle timeout")
            self._reset_plan()
            self.kick("idle timeout")

    def _schedule_retry(self) -> None:
        idle = self.config.properties.transition_idle_timeout
        self.sim.timer(self.node, idle, lambda: self.kick("retry"), label="transition retry")

    def _run_phase(self) -> None:
        while self.phase_idx < len(PHASES):
            kind = PHASES[self.phase_idx]
            actions = [a for a in self.plan_actions if a.kind == kind]
            if actions:
                for a in actions:
                    self._dispatch(a)
                return
            self.phase_idx += 1
        self._plan_done()

    def _plan_done(self) -> None:
        self._reset_plan()
        self.kick("transition complete")

    def _dispatch(self, action: Action) -> None:
        aid = next(self._ids)
        self.inflight[aid] = action
        plan = self.plan
        if action.kind == "fence":
            self._fence(aid, action)
            return
        spec = self.config.resources[resource_of(action.resource)]
        timeout = spec.op("migrate" if action.kind == "migrate" else action.kind).timeout
        if action.kind == "migrate":
            timeout = max(timeout, spec.op("stop").timeout)
        self.sim.timer(self.node, timeout + 2000,
                       lambda: self._result(plan, aid, False, "no result before timeout"),
                       label=f"action timeout {action}")
        if action.node == self.node:
            self.lrm.execute(action, lambda ok, why: self._result(plan, aid, ok, why))
        else:
            self.sim.send(self.node, action.node, "crm-action", 128,
                          {"id": aid, "action": action, "dc": self.node})

    def _fence(self, aid: int, action: Action) -> None:
        plan = self.plan
        state_hosts = self.cluster_state().fence_hosts
        executor, device = None, None
        for n in [self.node] + sorted(set(state_hosts) - {self.node}):
            for dev in state_hosts.get(n, ()):
                if action.node in dev.hostlist and n != action.node:
                    executor, device = n, dev
                    break
            if executor:
                break
        if executor is None:
            self._result(plan, aid, False, "no fence device")
            return

        def done(res: FenceResult) -> None:
            if res.ok:
                self.unclean.discard(action.node)
                self.last_known.pop(action.node, None)
                for peer in self.membership.view.alive:
                    if peer != self.node:
                        self.sim.send(self.node, peer, "crm-fenced", 64, {"target": action.node})
            self._result(plan, aid, res.ok, res.reason)

        device = dataclasses.replace(device, latency=self.fence_latency)

        def relay(res: FenceResult) -> None:
            # a remote executor reports back only if the DC is still there
            if self.sim.is_running(self.node):
                done(res)

        fence(self.sim, device, executor, action.node, done if executor == self.node else relay)

    def _result(self, plan: Optional[Plan], aid: int, ok: bool, why: str) -> None:
        if plan is None or self.plan is not plan or aid not in self.inflight:
            return
        action = self.inflight.pop(aid)
        self._touch()
        if not ok:
            if action.kind in ("start", "stop", "migrate"):
                # a failed migration counts against the node that could not take it
                where = action.target if action.kind == "migrate" else action.node
                key = (resource_of(action.resource), where)
                self.fail_counts[key] = self.fail_counts.get(key, 0) + 1
                self.sim.record(self.node, "crm", "action-failed",
                                f"{action} failed: {why}; fail-count {key[0]}@{key[1]}="
                                f"{self.fail_counts[key]}")
            else:
                self.sim.record(self.node, "crm", "action-failed", f"{action} failed: {why}")
            self._reset_plan()
            if action.kind == "fence" and action.node in self.unclean:
                self.sim.record(self.node, "crm", "blocked",
                                f"transition blocked: fencing {action.node} failed")
                self._schedule_retry()
            else:
                self._defer_kick("action failed")
            return
        if action.kind == "stop":
            self.failed.discard((resource_of(action.resource), action.node))
        if not self.inflight:
            self.phase_idx += 1
            if self.dirty and self.phase_idx < len(PHASES):
                # membership moved under us: replan from the new state
                self._reset_plan()
                self.kick("replan")
                return
            self._run_phase()

    # -- remote execution --------------------------------------------------
    def _on_action_msg(self, msg: Message) -> None:
        if self.membership.stopped:
            return
        aid, action, dc = msg.payload["id"], msg.payload["action"], msg.payload["dc"]

        def reply(ok: bool, why: str) -> None:
            if self.sim.is_running(self.node):
                self.sim.send(self.node, dc, "crm-result", 64, {"id": aid, "ok": ok, "why": why})

        self.lrm.execute(action, reply)

    def _on_result_msg(self, msg: Message) -> None:
        p = msg.payload
        self._result(self.plan, p["id"], p["ok"], p["why"])

    # -- monitors -------------------------------------------------------
    def _monitor_report(self, inst: str, node: str, ok: bool) -> None:
        if self.membership.stopped:
            return
        if self.dc == self.node:
            self.on_monitor_result(inst, node, ok)
        else:
            self.sim.send(self.node, self.dc, "crm-monitor", 64, {"inst": inst, "node": node, "ok": ok})

    def _on_monitor_msg(self, msg: Message) -> None:
        p = msg.payload
        self.on_monitor_result(p["inst"], p["node"], p["ok"])

    def on_monitor_result(self, inst: str, node: str, ok: bool) -> None:
        if ok:
            return
        key = (resource_of(inst), node)
        self.fail_counts[key] = self.fail_counts.get(key, 0) + 1
        self.failed.add((inst, node))
        self.sim.record(self.node, "crm", "monitor-failed",
                        f"{inst} failed on {node}; fail-count={self.fail_counts[key]}")
        self.kick("monitor failure")

    # -- clean shutdown -------------------------------------------------------
    def request_leave(self) -> None:
        self.shutting_down = True
        self.leaving.add(self.node)
        self.sim.record(self.node, "crm", "leave", f"{self.node} shutting down: moving resources away")
        for peer in sorted(self.membership.view.alive - {self.node}):
            self.sim.send(self.node, peer, "crm-leave", 64, {"node": self.node})
        self.kick("leave")

    def _on_leave_msg(self, msg: Message) -> None:
        self.leaving.add(msg.payload["node"])
        self.kick("peer leaving")

    def _on_fenced_msg(self, msg: Message) -> None:
        target = msg.payload["target"]
        self.unclean.discard(target)
        self.last_known.pop(target, None)


def crm_mon(config: ManagerConfig, crms: dict, sim: Simulator, owner: str) -> str:
    """Placement dump in the crm_mon layout."""
    me = crms[owner]
    lines = ["============", f"Current DC: {me.dc}",
             f"{len(me.nodes)} Nodes configured.",
             f"{len(config.resources)} Resources configured.", "============"]
    for n in me.nodes:
        online = n in me.membership.view.alive and sim.power(n) is Power.RUNNING
        lines.append(f"Node: {n}: {'online' if online else 'OFFLINE'}")
    for spec in config.resources.values():
        agent = f"stonith:{spec.agent_type}" if spec.agent == "FenceDevice" \
            else f"heartbeat::ocf:{spec.agent_type}"
        if spec.kind is Kind.CLONE:
            lines.append(f"Clone Set: {spec.id}")
        for inst in spec.instance_ids(me.nodes):
            where = [n for n in me.nodes if crms[n].lrm.active().get(inst) is VmState.RUNNING
                     and sim.is_running(n)]
            status = f"Started {where[0]}" if where else "Stopped"
            indent = "        " if spec.kind is Kind.CLONE else "   "
            lines.append(f"{indent}{inst}\t({agent}):\t{status}")
    return "\n".join(lines)
