"""Wire a scenario into a running cluster and turn the outcome into a report."""

from __future__ import annotations

import dataclasses
import random
import re
from dataclasses import dataclass, field
from typing import Optional

from .crm import (ConfigError as CibError, Crm, Kind, Lrm, ManagerConfig, ClusterProperties,
                  ClusterState, compute_transition, load_config, parse_cib)
from .drbd import (DeviceConfig, DeviceError, DiskState, ConnState, Protocol, ReplicatedDevice,
                   parse_drbd_conf)
from .engine import EventKind, LinkState, Power, Simulator, SimulationError, Trace
from .membership import ConfigError as HaError, HeartbeatConfig, Membership, parse_ha_cf
from .scenario import InjectionKind, Scenario, ScenarioError, Verdict, check_expected_steps
from .units import parse_duration, parse_rate
from .workload import (CommitWorkload, DurabilityReport, RequestWorkload, VmState,
                       measure_availability, running_intervals, verify_durability)

COMMIT_RANGE = 4096  # default blocks per commit workload


@dataclass
class Timings:
    vm_boot: int = 20_000
    vm_stop: int = 5_000
    vm_migrate: int = 5_000
    fence_start: int = 1_000
    fence_latency: int = 500
    reboot_delay: int = 30_000


@dataclass
class EffectiveConfig:
    heartbeat: HeartbeatConfig
    device: Optional[DeviceConfig]
    manager: ManagerConfig
    timings: Timings
    warnings: list = field(default_factory=list)


_CLUSTER_KEYS = {"transition-idle-timeout", "default-resource-stickiness",
                 "default-resource-failure-stickiness", "stonith-enabled", "stonith-action",
                 "symmetric-cluster", "no-quorum-policy"}


def build_config(sc: Scenario) -> EffectiveConfig:
    """Parse every referenced config and apply `set` overrides."""
    warnings = []
    s = sc.settings
    try:
        if sc.ha_text is not None:
            ha, w = parse_ha_cf(sc.ha_text)
            warnings += [f"ha.cf {x}" for x in w]
        else:
            ha = HeartbeatConfig()
        if not ha.node_list:
            ha.node_list = list(sc.nodes)
        if set(ha.node_list) != set(sc.nodes):
            raise ScenarioError(f"ha.cf nodes {ha.node_list} differ from scenario nodes {sc.nodes}")
        for key in ("keepalive", "warntime", "deadtime"):
            if key in s:
                setattr(ha, key, parse_duration(s[key], "ms"))
        ha.validate()
    except HaError as exc:
        raise ScenarioError(f"ha.cf: {exc}") from None

    device = None
    if sc.drbd_text is not None:
        try:
            device, w = parse_drbd_conf(sc.drbd_text)
        except DeviceError as exc:
            raise ScenarioError(f"drbd.conf: {exc}") from None
        warnings += [f"drbd.conf {x}" for x in w]
        if "protocol" in s:
            try:
                device.protocol = Protocol(s["protocol"].upper())
            except ValueError:
                raise ScenarioError(f"unknown protocol {s['protocol']!r}") from None
        if "sync_rate" in s:
            device.sync_rate = parse_rate(s["sync_rate"], "K")
        missing = [h for h in device.hosts if h not in sc.nodes]
        if missing:
            raise ScenarioError(f"drbd.conf hosts {missing} are not scenario nodes")

    try:
        docs = [parse_cib(text) for _path, text in sc.cib_texts]
        for (path, _t), doc in zip(sc.cib_texts, docs):
            warnings += [f"{path}: {x}" for x in doc.warnings]
        manager = load_config(docs)
        props = dict(p for d in docs for p in d.properties.items())
        props.update({k: v for k, v in s.items() if k in _CLUSTER_KEYS})
        manager.properties = ClusterProperties.from_nvpairs(props)
    except CibError as exc:
        raise ScenarioError(f"cib: {exc}") from None
    if "allow_migrate" in s:
        flag = s["allow_migrate"].lower() in ("true", "yes", "1", "on")
        for spec in manager.primitives:
            if spec.agent == "GuestVM":
                spec.allow_migrate = flag
    if "stonith_device" in s:
        for spec in manager.resources.values():
            if spec.agent == "FenceDevice":
                spec.agent_type = s["stonith_device"]
    for spec in manager.resources.values():
        for node in spec.location_preferences:
            if node not in sc.nodes:
                raise ScenarioError(f"location constraint for {spec.id} names unknown node {node}")

    t = Timings()
    for key in ("vm_boot", "vm_stop", "vm_migrate", "fence_start", "fence_latency", "reboot_delay"):
        if key in s:
            setattr(t, key, parse_duration(s[key], "ms"))
    return EffectiveConfig(ha, device, manager, t, warnings)


def show_config(sc: Scenario) -> str:
    cfg = build_config(sc)
    ha, dev, mgr, t = cfg.heartbeat, cfg.device, cfg.manager, cfg.timings
    out = [f"scenario {sc.name}", f"nodes {' '.join(sc.nodes)}",
           f"heartbeat keepalive={ha.keepalive}ms warntime={ha.warntime}ms deadtime={ha.deadtime}ms"]
    for link in sc.links:
        out.append(f"link {link.a} {link.b} latency={link.latency}ms bandwidth={link.bandwidth}B/s "
                   f"jitter={link.jitter}ms")
    if dev is not None:
        out.append(f"drbd {dev.name} protocol={dev.protocol.value} rate={dev.sync_rate}B/s "
                   f"al-extents={dev.al_extents} allow-two-primaries={dev.allow_two_primaries} "
                   f"after-sb={dev.after_sb_0pri}/{dev.after_sb_1pri}/{dev.after_sb_2pri} "
                   f"hosts={','.join(dev.hosts)}")
    p = mgr.properties
    out.append(f"properties transition-idle-timeout={p.transition_idle_timeout}ms "
               f"stickiness={p.default_resource_stickiness} "
               f"failure-stickiness={p.default_resource_failure_stickiness} "
               f"stonith-enabled={p.stonith_enabled} stonith-action={p.stonith_action.value} "
               f"symmetric-cluster={p.symmetric_cluster} no-quorum-policy={p.no_quorum_policy}")
    for spec in mgr.resources.values():
        prefs = ",".join(f"{n}={sc_}" for n, sc_ in sorted(spec.location_preferences.items()))
        ops = ",".join(f"{o.name}/{o.interval}/{o.timeout}" for o in spec.ops.values())
        extra = f" hostlist={spec.params.get('hostlist')}" if spec.agent == "FenceDevice" else ""
        out.append(f"resource {spec.id} {spec.kind.value} {spec.agent}:{spec.agent_type} "
                   f"migrate={spec.allow_migrate} prefs=[{prefs}] ops=[{ops}]{extra}")
    out.append("timings " + " ".join(f"{k}={v}ms" for k, v in dataclasses.asdict(t).items()))
    for key, value in sorted(sc.settings.items()):
        out.append(f"set {key} {value}")
    for w in cfg.warnings:
        out.append(f"warning: {w}")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# report

@dataclass
class RunReport:
    scenario: str
    seed: int
    failover_ms: Optional[int] = None
    downtime_ms: Optional[int] = None
    lost_acked: int = 0
    lost_unacked: int = 0
    resync_ms: Optional[int] = None
    peak_utilization: Optional[float] = None
    verdict: str = "Matched"
    first_divergence: Optional[str] = None
    nearest: Optional[str] = None
    breakdown: dict = field(default_factory=dict)
    lost_acked_ids: list = field(default_factory=list)
    lost_unacked_ids: list = field(default_factory=list)
    durability_indeterminate: bool = False
    dirty_at_crash: dict = field(default_factory=dict)
    failed_requests: int = 0
    violations: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    trace: Trace = field(default_factory=Trace, repr=False)

    def to_json(self) -> dict:
        return {"scenario": self.scenario, "seed": self.seed, "failover_ms": self.failover_ms,
                "downtime_ms": self.downtime_ms, "lost_acked": self.lost_acked,
                "lost_unacked": self.lost_unacked, "resync_ms": self.resync_ms,
                "verdict": self.verdict, "first_divergence": self.first_divergence}

    def to_text(self) -> str:
        def ms(v):
            return "n/a" if v is None else f"{v} ms"
        lines = [f"scenario {self.scenario} (seed {self.seed})",
                 f"  verdict: {self.verdict}"]
        if self.first_divergence is not None:
            lines.append(f"  first divergence: {self.first_divergence!r}")
            if self.nearest:
                lines.append(f"  nearest entry: {self.nearest}")
        fo = f"  failover: {ms(self.failover_ms)}"
        b = self.breakdown
        if b.get("detection") is not None and self.failover_ms is not None:
            fo += f" (detection {b['detection']} + fence {b['fence']} + start {b['start']})"
        lines.append(fo)
        lines.append(f"  downtime: {ms(self.downtime_ms)}")
        dur = "indeterminate" if self.durability_indeterminate else \
            f"{self.lost_acked} acked / {self.lost_unacked} unacked"
        lines.append(f"  lost commits: {dur}")
        if self.failed_requests:
            lines.append(f"  failed requests: {self.failed_requests}")
        res = f"  resync: {ms(self.resync_ms)}"
        if self.peak_utilization is not None:
            res += f", peak link utilization {self.peak_utilization:.1%}"
        lines.append(res)
        lines.append("  invariants: " + ("ok" if not self.violations else "; ".join(self.violations)))
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# the cluster

class Cluster:
    def __init__(self, sc: Scenario, seed: Optional[int] = None,
                 trace_network: bool = False) -> None:
        self.sc = sc
        self.seed = sc.seed if seed is None else seed
        self.cfg = build_config(sc)
        cfg = self.cfg
        t = cfg.timings
        sim = self.sim = Simulator(self.seed, t.reboot_delay, trace_network)
        for n in sc.nodes:
            sim.add_node(n)
        for link in sc.links:
            sim.add_link(link.a, link.b, link.latency, link.bandwidth, link.jitter)
        sim.ensure_full_mesh()
        self.device = ReplicatedDevice(sim, cfg.device) if cfg.device is not None else None
        durations = {"vm_boot": t.vm_boot, "vm_stop": t.vm_stop, "vm_migrate": t.vm_migrate,
                     "fence_start": t.fence_start}
        self.memberships = {n: Membership(sim, n, cfg.heartbeat) for n in sc.nodes}
        self.lrms = {n: Lrm(sim, n, cfg.manager, self.device, durations) for n in sc.nodes}
        for lrm in self.lrms.values():
            lrm.peers = self.lrms
        self.fail_counts: dict = {}
        self.crms: dict[str, Crm] = {}
        eligible = set(self.device.nodes) if self.device is not None else None
        for n in sc.nodes:
            crm = Crm(sim, n, cfg.manager, self.memberships[n], self.lrms[n], self.crms,
                      self.fail_counts, cfg.heartbeat.deadtime, eligible)
            crm.fence_latency = t.fence_latency
            self.crms[n] = crm
        sim.on_power_change(self._on_power)
        self.injected: list[tuple[int, object, dict]] = []
        self.dirty_at_crash: dict[str, list] = {}
        self.commits: list[CommitWorkload] = []
        self.requests: list[RequestWorkload] = []
        self._inject_rng = random.Random(f"{self.seed}:inject")

    # -- bring-up ---------------------------------------------------------
    def locate(self, vm: str) -> Optional[str]:
        for n in self.sc.nodes:
            inst = self.lrms[n].instances.get(vm)
            if inst is not None and inst.state in (VmState.RUNNING, VmState.MIGRATING) \
                    and self.sim.is_running(n):
                return n
        return None

    def warm_start(self) -> None:
        """Everything up at t=0: members joined, resources placed, disks in sync."""
        for m in self.memberships.values():
            m.start(warm=True)
        state = ClusterState(list(self.sc.nodes), set(self.sc.nodes),
                             eligible=set(self.device.nodes) if self.device else None)
        plan = compute_transition(state, self.cfg.manager)
        starts = sorted((a for a in plan.actions if a.kind == "start"),
                        key=lambda a: (self.sc.nodes.index(a.node), a.resource))
        primaries = []
        for a in starts:
            lrm = self.lrms[a.node]
            if lrm.uses_device(a.resource) and a.node not in primaries:
                primaries.append(a.node)
        if self.device is not None:
            self.device.start_connected(tuple(primaries))
        for a in starts:
            self.lrms[a.node].adopt_running(a.resource)
        for crm in self.crms.values():
            crm.warm_start()

    def _start_workloads(self) -> None:
        for i, w in enumerate(self.sc.workloads):
            if w.kind == "commits":
                if self.device is None:
                    raise ScenarioError(f"commit workload on {w.vm} needs a drbd config")
                span = w.blocks or COMMIT_RANGE
                base = w.base if w.base is not None else i * COMMIT_RANGE
                if base + span > self.device.cfg.block_count:
                    raise ScenarioError(f"commit workload on {w.vm} exceeds the device")
                self.commits.append(CommitWorkload(self.sim, self.device, w.vm, self.locate,
                                                   w.interval, base, span, w.start, w.until,
                                                   w.batch))
            else:
                self.requests.append(RequestWorkload(self.sim, w.vm, self.locate, w.interval,
                                                     w.start, w.until))
            if w.vm not in self.cfg.manager.resources:
                raise ScenarioError(f"workload names unknown resource {w.vm!r}")

    def _on_power(self, node: str, old: Power, new: Power) -> None:
        if self.device is not None:
            self.device.on_power(node, old, new)
        if old is Power.RUNNING and new is not Power.RUNNING:
            self.lrms[node].power_lost()
            self.crms[node]._reset_plan()
        if new is Power.RUNNING:
            self.lrms[node].suspended = False
            self.memberships[node].start()
            self.crms[node].boot()

    # -- injections -------------------------------------------------------
    def _schedule_injections(self) -> None:
        for inj in self.sc.timeline:
            at = inj.at + (self._inject_rng.randint(0, inj.jitter) if inj.jitter else 0)
            # re-arm inside the target millisecond so node work due then runs first
            self.sim.schedule(at, lambda inj=inj, at=at: self.sim.schedule(
                at, lambda: self._inject(inj), kind=EventKind.INJECTION, label=str(inj)),
                kind=EventKind.INJECTION, label=f"arm {inj}")

    def _inject(self, inj) -> None:
        sim, kind = self.sim, inj.kind
        sim.record(None, "inject", kind.value, f"inject {inj}")
        hosts = {vm: n for n in self.sc.nodes for vm, st in self.lrms[n].active().items()
                 if st is VmState.RUNNING}
        self.injected.append((sim.clock, inj, hosts))
        target = inj.target[0]
        if kind is InjectionKind.HEARTBEAT_STOP:
            if sim.is_running(target) and not self.memberships[target].stopped:
                self.memberships[target].stop()
                self.lrms[target].suspended = True
                if inj.restore is not None:
                    sim.timer(target, inj.restore, lambda: self._heartbeat_restart(target))
        elif kind is InjectionKind.POWER_PULL:
            if self.device is not None and target in self.device.replicas:
                self.dirty_at_crash[target] = list(self.device.replica(target).dirty)
            if sim.power(target) in (Power.RUNNING, Power.REBOOTING):
                sim.set_node_power(target, Power.POWERED_OFF)
            if inj.restore is not None:
                sim.later(inj.restore, lambda: sim.power_on(target), label=f"restore {target}")
        elif kind is InjectionKind.CLEAN_SHUTDOWN:
            if sim.is_running(target) and not self.crms[target].shutting_down:
                self.crms[target].request_leave()
                sim.timer(target, 0, lambda: self._leave_poll(target))
            if inj.restore is not None:
                sim.later(inj.restore, lambda: sim.power_on(target), label=f"restore {target}")
        elif kind is InjectionKind.LINK_PARTITION:
            a, b = inj.target
            sim.set_link_state(a, b, LinkState.PARTITIONED)
            if inj.restore is not None:
                sim.later(inj.restore, lambda: sim.set_link_state(a, b, LinkState.UP))
        elif kind is InjectionKind.LINK_HEAL:
            sim.set_link_state(*inj.target, LinkState.UP)
        elif kind is InjectionKind.DISK_FAULT:
            if self.device is not None and target in self.device.replicas and sim.is_running(target):
                self.device.handle_io_error(target)
        elif kind is InjectionKind.RESOLVE_SPLIT_BRAIN:
            if self.device is None:
                raise SimulationError("resolve-split-brain without a replicated device")
            self.device.resolve_split_brain(target)

    def _heartbeat_restart(self, node: str) -> None:
        self.memberships[node].restart()
        self.lrms[node].suspended = False

    def _leave_poll(self, node: str) -> None:
        crm = self.crms[node]
        if not crm.shutting_down:
            return
        if self.lrms[node].active() or crm.plan is not None:
            self.sim.timer(node, 500, lambda: self._leave_poll(node), label=f"leave {node}")
            return
        self.sim.record(node, "crm", "shutdown", f"{node} shutdown complete")
        self.memberships[node].announce_leave()
        if self.device is not None and node in self.device.replicas:
            self.device.disconnect(node)
        # let the goodbye leave the wire before the power goes
        self.sim.timer(node, 100, lambda: self.sim.set_node_power(node, Power.CLEANLY_DOWN))

    # -- run ----------------------------------------------------------------
    def run(self) -> RunReport:
        self.warm_start()
        self._start_workloads()
        self._schedule_injections()
        self.sim.run(self.sc.end_at)
        return self.report()

    def survivor(self, vm: Optional[str] = None) -> Optional[str]:
        dev = self.device
        if dev is None:
            return None
        unresolved = any(r.conn is ConnState.STANDALONE for r in dev.replicas.values()
                         if self.sim.is_running(r.node)) and dev.split_brains
        if unresolved and (not dev.resolutions or dev.resolutions[-1]["t"] < dev.split_brains[-1][0]):
            return None
        ok = [n for n in dev.nodes if self.sim.is_running(n)
              and dev.replica(n).disk is DiskState.UP_TO_DATE]
        if not ok:
            return None
        host = self.locate(vm) if vm else None
        return host if host in ok else min(ok, key=self.sc.nodes.index)

    def report(self) -> RunReport:
        sim, sc = self.sim, self.sc
        trace = sim.trace
        rep = RunReport(sc.name, self.seed, trace=trace, warnings=list(self.cfg.warnings))
        verdict: Verdict = check_expected_steps(trace, sc.expected)
        rep.verdict = "Matched" if verdict.matched else "Diverged"
        rep.first_divergence = verdict.first_divergence
        rep.nearest = verdict.nearest

        timing = failover_from_trace(trace, self.injected_node_events(), sc.end_at)
        rep.failover_ms, rep.downtime_ms, rep.breakdown = timing

        dur = DurabilityReport()
        for w in self.commits:
            node = self.survivor(w.vm)
            store = self.device.replica(node).store if node is not None else None
            dur = dur.merge(verify_durability(w.journal, store))
        rep.lost_acked, rep.lost_unacked = len(dur.lost_acked), len(dur.lost_unacked)
        rep.lost_acked_ids = sorted(dur.lost_acked, key=_seq_key)
        rep.lost_unacked_ids = sorted(dur.lost_unacked, key=_seq_key)
        rep.durability_indeterminate = dur.indeterminate
        rep.dirty_at_crash = dict(self.dirty_at_crash)
        rep.failed_requests = sum(r.log.failed for r in self.requests)

        if self.device is not None:
            done = [s for s in self.device.sessions if s.finished_at is not None]
            if done:
                rep.resync_ms = max(s.duration for s in done)
                utils = [u for u in (self.device.resync_utilization(s) for s in done) if u is not None]
                rep.peak_utilization = max(utils) if utils else None
        rep.violations = self.check_invariants(rep)
        return rep

    def injected_node_events(self) -> list[tuple[int, str, str, dict]]:
        out = []
        for t, inj, hosts in self.injected:
            if inj.kind in (InjectionKind.POWER_PULL, InjectionKind.HEARTBEAT_STOP,
                            InjectionKind.CLEAN_SHUTDOWN):
                vms = sorted(vm for vm, n in hosts.items() if n == inj.target[0]
                             and self.cfg.manager.resources[vm.split(":")[0]].agent == "GuestVM")
                out.append((t, inj.kind.value, inj.target[0], {"vms": vms}))
        return out

    # -- invariants ---------------------------------------------------------
    def check_invariants(self, rep: RunReport) -> list[str]:
        trace = self.sim.trace
        out = []
        last = 0
        for e in trace:
            if e.t < last:
                out.append(f"clock went backwards at {e.line()}")
                break
            last = e.t
        vms = [s.id for s in self.cfg.manager.primitives if s.agent == "GuestVM"]
        out += single_instance_violations(trace, vms, self.sc.end_at)
        if self.cfg.manager.properties.stonith_enabled:
            out += fence_order_violations(trace, self.injected_node_events())
        again = failover_from_trace(trace, self.injected_node_events(), self.sc.end_at)
        if again != (rep.failover_ms, rep.downtime_ms, rep.breakdown):
            out.append("report timing differs from trace recomputation")
        resync = resync_from_trace(trace)
        if resync != rep.resync_ms:
            out.append(f"resync {rep.resync_ms} differs from trace {resync}")
        return out


def _seq_key(write_id: str) -> tuple[str, int]:
    vm, _, seq = write_id.partition("#")
    return vm, int(seq) if seq.isdigit() else 0


# ---------------------------------------------------------------------------
# trace-only computations (also used to cross-check the report)

def failover_from_trace(trace, events, end: int):
    """(failover_ms, downtime_ms, breakdown) for the first node-level injection."""
    if not events:
        return None, None, {}
    t0, kind, node, info = events[0]
    vms = info["vms"]
    if not vms:
        return None, None, {}
    failovers, downtimes = [], []
    for vm in vms:
        av = measure_availability(trace, vm, t0, end, node)
        failovers.append(av.failover_time)
        downtimes.append(av.downtime)
    failover = None if any(f is None for f in failovers) else max(failovers)
    breakdown: dict = {"detection": None, "fence": None, "start": None}
    detected = next((e.t for e in trace if e.t >= t0 and e.module == "membership"
                     and e.kind == "dead" and e.detail.endswith(f"declares {node} dead")), None)
    if detected is not None:
        breakdown["detection"] = detected - t0
        fenced = next((e.t for e in trace if e.t >= detected and e.kind == "fenced"
                       and e.detail.startswith(f"fenced {node} ")), None)
        if fenced is not None:
            breakdown["fence"] = fenced - detected
            if failover is not None:
                breakdown["start"] = failover - (fenced - t0)
    return failover, max(downtimes), breakdown


_RESYNC = re.compile(r"^resync \S+ -> \S+ complete: .* in (\d+)ms$")


def resync_from_trace(trace) -> Optional[int]:
    found = [int(m.group(1)) for e in trace if e.module == "drbd"
             for m in [_RESYNC.match(e.detail)] if m]
    return max(found) if found else None


def single_instance_violations(trace, vms, end: int) -> list[str]:
    out = []
    for vm in vms:
        spans = running_intervals(trace, vm, end)
        for i, (n1, lo1, hi1) in enumerate(spans):
            for n2, lo2, hi2 in spans[i + 1:]:
                if n1 != n2 and lo2 < hi1 and lo1 < hi2:
                    out.append(f"{vm} running on {n1} and {n2} during [{max(lo1, lo2)}, {min(hi1, hi2)})")
    return out


def fence_order_violations(trace, events) -> list[str]:
    """A victim's resources must not start elsewhere before the victim is fenced or back."""
    out = []
    entries = list(trace)
    for t0, kind, node, info in events:
        if kind == "clean-shutdown":
            continue
        fenced = False
        back = {f"heartbeat started on {node}", f"{node} shutdown complete"}
        for e in entries:
            if e.t < t0:
                continue
            if e.kind == "fenced" and e.detail.startswith(f"fenced {node} "):
                fenced = True
            elif (e.module == "sim" and e.detail == f"{node} running") or e.detail in back:
                break  # back in the cluster: its resources are accounted for again
            elif e.module == "membership" and e.detail.endswith(f"sees {node} alive"):
                break
            elif e.module == "vm" and e.kind == "start" and not fenced:
                words = e.detail.split()
                if words[1] in info["vms"] and words[-1] != node:
                    out.append(f"start {words[1]} on {words[-1]} at {e.t} before {node} was fenced")
    return out


def run_scenario(sc: Scenario, seed: Optional[int] = None, trace_network: bool = False,
                 **overrides) -> RunReport:
    if overrides:
        sc = sc.with_settings(**overrides)
    return Cluster(sc, seed, trace_network).run()
