"""Heartbeat failure detector, membership views and quorum verdicts."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .engine import Message, Simulator
from .units import parse_duration

log = logging.getLogger(__name__)

HEARTBEAT_SIZE = 64


class ConfigError(ValueError):
    pass


@dataclass
class HeartbeatConfig:
    keepalive: int = 1000
    warntime: int = 6000
    deadtime: int = 10000
    node_list: list = field(default_factory=list)
    bcast: Optional[str] = None
    crm: bool = False

    def validate(self) -> "HeartbeatConfig":
        if not 0 < self.keepalive < self.warntime <= self.deadtime:
            raise ConfigError(
                f"need 0 < keepalive < warntime <= deadtime, got "
                f"{self.keepalive}/{self.warntime}/{self.deadtime}")
        if len(set(self.node_list)) != len(self.node_list):
            raise ConfigError("duplicate node in node list")
        return self


def parse_ha_cf(text: str) -> tuple[HeartbeatConfig, list[str]]:
    """Parse the ha.cf subset.  Returns (config, warnings)."""
    cfg = HeartbeatConfig()
    warnings = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *args = line.split()
        key = key.lower()
        if key in ("keepalive", "warntime", "deadtime"):
            if len(args) != 1:
                raise ConfigError(f"line {lineno}: {key} takes one value")
            try:
                setattr(cfg, key, parse_duration(args[0], "s"))
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: {exc}") from None
        elif key == "node":
            cfg.node_list.extend(args)
        elif key == "bcast":
            cfg.bcast = args[0] if args else None
        elif key == "crm":
            cfg.crm = bool(args) and args[0].lower() in ("on", "yes", "true", "respawn")
        else:
            warnings.append(f"line {lineno}: unknown directive {key!r} ignored")
    return cfg.validate(), warnings


class PeerStatus(Enum):
    ALIVE = "Alive"
    WARNED = "Warned"
    DEAD = "Dead"


def classify(now: int, last_seen: Optional[int], cfg: HeartbeatConfig) -> PeerStatus:
    if last_seen is None:
        return PeerStatus.DEAD
    silence = now - last_seen
    if silence > cfg.deadtime:
        return PeerStatus.DEAD
    if silence > cfg.warntime:
        return PeerStatus.WARNED
    return PeerStatus.ALIVE


@dataclass
class PeerRecord:
    peer: str
    last_seen: Optional[int] = None
    status: PeerStatus = PeerStatus.DEAD


@dataclass
class MembershipView:
    owner: str
    alive: set
    epoch: int = 0


class QuorumVerdict(Enum):
    PROCEED = "Proceed"
    STOP_ALL = "StopAll"
    IGNORE = "Ignore"


def has_quorum(alive_count: int, total: int, policy: str) -> QuorumVerdict:
    """Majority check; without one the no-quorum policy decides."""
    if alive_count * 2 > total:
        return QuorumVerdict.PROCEED
    policy = policy.lower()
    if policy == "stop":
        return QuorumVerdict.STOP_ALL
    if policy == "ignore":
        return QuorumVerdict.PROCEED
    raise ConfigError(f"unsupported no-quorum-policy {policy!r}")


# listener(owner, peer, change) with change in {"alive", "dead", "left"}
Listener = Callable[[str, str, str], None]


class Membership:
    """Heartbeat service of one node."""

    def __init__(self, sim: Simulator, node: str, cfg: HeartbeatConfig) -> None:
        self.sim = sim
        self.node = node
        self.cfg = cfg
        self.view = MembershipView(node, {node})
        self.peers: dict[str, PeerRecord] = {}
        self.stopped = False
        self.listeners: list[Listener] = []
        self.changes: list[tuple[int, int, str, str]] = []
        sim.register(node, "hb", self._on_heartbeat)
        sim.register(node, "hb-leave", self._on_leave)

    @property
    def others(self) -> list[str]:
        return [n for n in self.cfg.node_list if n != self.node]

    def start(self, warm: bool = False) -> None:
        now = self.sim.clock
        self.stopped = False
        self.peers = {p: PeerRecord(p) for p in self.others}
        self.view.alive = {self.node}
        if warm:
            for rec in self.peers.values():
                rec.last_seen, rec.status = now, PeerStatus.ALIVE
                self.view.alive.add(rec.peer)
        self.sim.timer(self.node, 0, self.heartbeat_tick, label=f"hb {self.node}")

    def stop(self) -> None:
        """Injected service stop: the detector goes silent, the node keeps running."""
        self.stopped = True
        self.sim.record(self.node, "membership", "service", f"heartbeat stopped on {self.node}")

    def restart(self) -> None:
        if not self.stopped:
            return
        self.sim.record(self.node, "membership", "service", f"heartbeat started on {self.node}")
        self.stopped = False
        # silence while stopped does not count against peers
        now = self.sim.clock
        for rec in self.peers.values():
            if rec.status is not PeerStatus.DEAD:
                rec.last_seen = now
        self.sim.timer(self.node, 0, self.heartbeat_tick, label=f"hb {self.node}")

    def heartbeat_tick(self) -> None:
        if self.stopped:
            return
        self.sim.broadcast(self.node, self.others, "hb", HEARTBEAT_SIZE)
        self.evaluate_peers(self.sim.clock)
        self.sim.timer(self.node, self.cfg.keepalive, self.heartbeat_tick, label=f"hb {self.node}")

    def _on_heartbeat(self, msg: Message) -> None:
        if not self.stopped:
            self.record_heartbeat(msg.src, self.sim.clock)

    def record_heartbeat(self, src: str, now: int) -> None:
        rec = self.peers.get(src)
        if rec is None:
            self.sim.record(self.node, "membership", "warn", f"heartbeat from unknown node {src} ignored")
            return
        previous = rec.status
        rec.last_seen = now
        rec.status = PeerStatus.ALIVE
        if previous is PeerStatus.DEAD:
            self._change(src, "alive", f"{self.node} sees {src} alive")

    def evaluate_peers(self, now: int) -> list[str]:
        newly_dead = []
        for peer in self.others:
            rec = self.peers[peer]
            if rec.status is PeerStatus.DEAD:
                continue
            status = classify(now, rec.last_seen, self.cfg)
            if status is PeerStatus.WARNED and rec.status is PeerStatus.ALIVE:
                self.sim.record(self.node, "membership", "warn",
                                f"late heartbeat from {peer} ({now - rec.last_seen}ms)")
            rec.status = status
            if status is PeerStatus.DEAD:
                newly_dead.append(peer)
                self._change(peer, "dead", f"{self.node} declares {peer} dead")
        return newly_dead

    def announce_leave(self) -> None:
        self.sim.broadcast(self.node, self.others, "hb-leave", HEARTBEAT_SIZE)
        # nothing after the goodbye, or peers would see the node come back
        self.stopped = True

    def _on_leave(self, msg: Message) -> None:
        rec = self.peers.get(msg.src)
        if self.stopped or rec is None or rec.status is PeerStatus.DEAD:
            return
        rec.status = PeerStatus.DEAD
        self._change(msg.src, "left", f"{self.node} sees {msg.src} leave")

    def _change(self, peer: str, change: str, detail: str) -> None:
        if change == "alive":
            self.view.alive.add(peer)
        else:
            self.view.alive.discard(peer)
        self.view.epoch += 1
        self.changes.append((self.sim.clock, self.view.epoch, peer, change))
        self.sim.record(self.node, "membership", change, detail)
        for fn in list(self.listeners):
            fn(self.node, peer, change)

    def quorum(self, policy: str) -> QuorumVerdict:
        return has_quorum(len(self.view.alive), len(self.cfg.node_list), policy)
