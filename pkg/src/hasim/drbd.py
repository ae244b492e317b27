"""DRBD-style mirrored block device between two nodes.

Write replication under protocols A/B/C, role management, a connection
handshake driven by generation tags, throttled resync of the dirty
bitmap, split-brain detection with after-split-brain policies, and the
detach-on-io-error path.

Each replica is mutated only by events addressed to its own node; the
replicas talk to each other through ``Simulator.send``.
"""

from __future__ import annotations

import re
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .engine import Message, Power, Simulator
from .units import parse_rate

BLOCK_SIZE = 4096
DEFAULT_BLOCK_COUNT = 65_536
EXTENT_SIZE = 4 * 1024 * 1024
CONTROL_SIZE = 64
GENERATION_DEPTH = 4


class DeviceError(RuntimeError):
    pass


class Protocol(Enum):
    A = "A"
    B = "B"
    C = "C"


class Role(Enum):
    PRIMARY = "Primary"
    SECONDARY = "Secondary"


class ConnState(Enum):
    STANDALONE = "StandAlone"
    WF_CONNECTION = "WFConnection"
    CONNECTED = "Connected"
    SYNC_SOURCE = "SyncSource"
    SYNC_TARGET = "SyncTarget"


class DiskState(Enum):
    UP_TO_DATE = "UpToDate"
    CONSISTENT = "Consistent"
    OUTDATED = "Outdated"
    INCONSISTENT = "Inconsistent"
    DETACHED = "Detached"


LINKED = (ConnState.CONNECTED, ConnState.SYNC_SOURCE, ConnState.SYNC_TARGET)


# ---------------------------------------------------------------------------
# configuration

@dataclass
class DeviceConfig:
    name: str = "r0"
    protocol: Protocol = Protocol.C
    sync_rate: int = 250 * 1024
    al_extents: int = 127
    on_io_error: str = "detach"
    allow_two_primaries: bool = False
    after_sb_0pri: str = "disconnect"
    after_sb_1pri: str = "disconnect"
    after_sb_2pri: str = "disconnect"
    rr_conflict: str = "disconnect"
    block_size: int = BLOCK_SIZE
    block_count: int = DEFAULT_BLOCK_COUNT
    hosts: dict = field(default_factory=dict)
    handlers: dict = field(default_factory=dict)

    def validate(self) -> "DeviceConfig":
        if self.al_extents < 7:
            raise DeviceError(f"al-extents must be >= 7, got {self.al_extents}")
        if self.sync_rate <= 0:
            raise DeviceError("sync rate must be positive")
        if self.block_count <= 0 or self.block_size <= 0:
            raise DeviceError("block geometry must be positive")
        if self.on_io_error != "detach":
            raise DeviceError(f"unsupported on-io-error {self.on_io_error!r}")
        return self

    @property
    def nodes(self) -> list[str]:
        return list(self.hosts)


_TOKEN = re.compile(r'"[^"]*"|[{};]|[^\s{};"]+')


def _tokenize(text: str) -> list[tuple[str, int]]:
    tokens = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0]
        for tok in _TOKEN.findall(line):
            tokens.append((tok, lineno))
    return tokens


def _parse_block(tokens, pos, depth):
    """-> (list of (words, children|None, lineno), new pos)"""
    stmts = []
    words: list[str] = []
    start_line = None
    while pos < len(tokens):
        tok, lineno = tokens[pos]
        pos += 1
        if start_line is None:
            start_line = lineno
        if tok == ";":
            if words:
                stmts.append((words, None, start_line))
            words, start_line = [], None
        elif tok == "{":
            children, pos = _parse_block(tokens, pos, depth + 1)
            stmts.append((words, children, start_line))
            words, start_line = [], None
        elif tok == "}":
            if depth == 0:
                raise DeviceError(f"line {lineno}: unbalanced '}}'")
            if words:
                raise DeviceError(f"line {lineno}: missing ';' after {' '.join(words)!r}")
            return stmts, pos
        else:
            words.append(tok.strip('"'))
    if depth:
        raise DeviceError("unterminated '{' block")
    if words:
        raise DeviceError(f"missing ';' after {' '.join(words)!r}")
    return stmts, pos


def parse_drbd_conf(text: str, resource: Optional[str] = None) -> tuple[DeviceConfig, list[str]]:
    """Parse the drbd.conf subset.  Returns (config, warnings)."""
    stmts, _ = _parse_block(_tokenize(text), 0, 0)
    warnings: list[str] = []
    cfg = DeviceConfig()

    def apply_section(section: str, body, lineno: int) -> None:
        for words, children, ln in body:
            key, args = words[0], words[1:]
            if section == "net":
                if key == "allow-two-primaries":
                    cfg.allow_two_primaries = True
                elif key in ("after-sb-0pri", "after-sb-1pri", "after-sb-2pri", "rr-conflict"):
                    setattr(cfg, key.replace("-", "_"), args[0])
                else:
                    warnings.append(f"line {ln}: net option {key!r} ignored")
            elif section == "syncer":
                if key == "rate":
                    cfg.sync_rate = parse_rate(args[0])
                elif key == "al-extents":
                    cfg.al_extents = int(args[0])
                else:
                    warnings.append(f"line {ln}: syncer option {key!r} ignored")
            elif section == "disk":
                if key == "on-io-error":
                    cfg.on_io_error = args[0]
                elif key == "size":
                    cfg.block_count = parse_rate(args[0]) // cfg.block_size
                else:
                    warnings.append(f"line {ln}: disk option {key!r} ignored")
            elif section == "handlers":
                # recorded, never executed
                cfg.handlers[key] = " ".join(args)
            else:
                warnings.append(f"line {ln}: option {key!r} in {section} ignored")

    def apply_resource(body) -> None:
        for words, children, ln in body:
            key = words[0]
            if children is None:
                if key == "protocol":
                    try:
                        cfg.protocol = Protocol(words[1].upper())
                    except (IndexError, ValueError):
                        raise DeviceError(f"line {ln}: bad protocol {words[1:]}") from None
                else:
                    warnings.append(f"line {ln}: resource option {key!r} ignored")
            elif key == "on":
                host = {w[0]: " ".join(w[1:]) for w, _c, _l in children}
                cfg.hosts[words[1]] = host
            elif key in ("net", "syncer", "disk", "handlers", "startup"):
                apply_section(key, children, ln)
            else:
                warnings.append(f"line {ln}: section {key!r} ignored")

    found = False
    for words, children, ln in stmts:
        key = words[0]
        if key == "global":
            continue
        if key == "common" and children is not None:
            for w, c, l2 in children:
                if c is not None:
                    apply_section(w[0], c, l2)
        elif key == "resource" and children is not None:
            if found or (resource is not None and words[1] != resource):
                continue
            cfg.name = words[1]
            apply_resource(children)
            found = True
        else:
            warnings.append(f"line {ln}: top-level {key!r} ignored")
    if not found:
        raise DeviceError("no resource section found")
    return cfg.validate(), warnings


# ---------------------------------------------------------------------------
# state

@dataclass(frozen=True)
class BlockRecord:
    write_id: str
    node: str
    digest: int


def make_record(write_id: str, node: str) -> BlockRecord:
    return BlockRecord(write_id, node, zlib.crc32(write_id.encode()))


class BlockStore:
    """Sparse array of last-writer records; unwritten blocks are None."""

    def __init__(self, block_count: int) -> None:
        self.block_count = block_count
        self._blocks: dict[int, BlockRecord] = {}

    def __len__(self) -> int:
        return self.block_count

    def get(self, idx: int) -> Optional[BlockRecord]:
        return self._blocks.get(idx)

    def put(self, idx: int, record: Optional[BlockRecord]) -> None:
        if not 0 <= idx < self.block_count:
            raise IndexError(idx)
        if record is None:
            self._blocks.pop(idx, None)
        else:
            self._blocks[idx] = record

    def written(self) -> set[int]:
        return set(self._blocks)

    def diff(self, other: "BlockStore") -> set[int]:
        keys = set(self._blocks) | set(other._blocks)
        return {k for k in keys if self._blocks.get(k) != other._blocks.get(k)}

    def contains(self, write_id: str) -> bool:
        return any(r.write_id == write_id for r in self._blocks.values())


class ActivityLog:
    """LRU set of recently written extents, bounded by al-extents."""

    def __init__(self, capacity: int) -> None:
        self.capacity = capacity
        self._extents: OrderedDict[int, None] = OrderedDict()
        self.evictions = 0

    def touch(self, extent: int) -> None:
        if extent in self._extents:
            self._extents.move_to_end(extent)
            return
        self._extents[extent] = None
        if len(self._extents) > self.capacity:
            self._extents.popitem(last=False)
            self.evictions += 1

    def __len__(self) -> int:
        return len(self._extents)

    def __contains__(self, extent: int) -> bool:
        return extent in self._extents

    def extents(self) -> list[int]:
        return list(self._extents)


@dataclass
class Generation:
    current: int
    history: list = field(default_factory=list)

    def bump(self, new: int) -> None:
        self.history = ([self.current] + self.history)[:GENERATION_DEPTH]
        self.current = new

    def copy(self) -> "Generation":
        return Generation(self.current, list(self.history))


@dataclass
class Snapshot:
    node: str
    current: int
    history: list
    dirty: list
    role: Role
    disk: DiskState
    discard: bool = False


class HandshakeKind(Enum):
    ALREADY_IN_SYNC = "AlreadyInSync"
    RESYNC_NEEDED = "ResyncNeeded"
    SPLIT_BRAIN = "SplitBrain"


@dataclass(frozen=True)
class HandshakeResult:
    kind: HandshakeKind
    source: Optional[str] = None
    target: Optional[str] = None

    def __str__(self) -> str:
        if self.kind is HandshakeKind.RESYNC_NEEDED:
            return f"ResyncNeeded(source={self.source}, target={self.target})"
        return self.kind.value


def classify_handshake(a: Snapshot, b: Snapshot) -> HandshakeResult:
    """Decide sync direction from generation tags and dirty bitmaps."""
    def resync(src: Snapshot, dst: Snapshot) -> HandshakeResult:
        return HandshakeResult(HandshakeKind.RESYNC_NEEDED, src.node, dst.node)

    if a.discard != b.discard:
        return resync(b, a) if a.discard else resync(a, b)
    a_bad = a.disk is DiskState.INCONSISTENT
    b_bad = b.disk is DiskState.INCONSISTENT
    if a_bad != b_bad:
        return resync(b, a) if a_bad else resync(a, b)
    if a.current == b.current:
        if a.dirty and b.dirty:
            return HandshakeResult(HandshakeKind.SPLIT_BRAIN)
        if a.dirty:
            return resync(a, b)
        if b.dirty:
            return resync(b, a)
        return HandshakeResult(HandshakeKind.ALREADY_IN_SYNC)
    if a.current in b.history:
        return resync(b, a)
    if b.current in a.history:
        return resync(a, b)
    return HandshakeResult(HandshakeKind.SPLIT_BRAIN)


@dataclass
class ResyncSession:
    source: str
    target: str
    started_at: int
    blocks: int
    bytes_sent: int = 0
    blocks_acked: int = 0
    finished_at: Optional[int] = None
    aborted: bool = False
    first_tx_us: Optional[int] = None
    last_tx_end_us: Optional[int] = None
    queue: list = field(default_factory=list, repr=False)
    pos: int = 0
    budget: int = 0

    @property
    def duration(self) -> Optional[int]:
        return None if self.finished_at is None else self.finished_at - self.started_at


@dataclass
class PendingWrite:
    block: int
    write_id: str
    needs: str  # "recv" or "applied"
    on_ack: Optional[Callable[[int], None]]


class Replica:
    def __init__(self, node: str, peer: str, cfg: DeviceConfig, gen: int) -> None:
        self.node = node
        self.peer = peer
        self.role = Role.SECONDARY
        self.conn = ConnState.STANDALONE
        self.disk = DiskState.UP_TO_DATE
        self.gen = Generation(gen)
        self.dirty: dict[int, None] = {}
        self.activity_log = ActivityLog(cfg.al_extents)
        self.store = BlockStore(cfg.block_count)
        self.pending: dict[str, PendingWrite] = {}
        self.peer_disk_detached = False
        self.disconnected_write_seen = False
        self.discard = False
        self.last_heard = 0
        self.session: Optional[ResyncSession] = None
        self.resync_target: Optional[ResyncSession] = None

    def snapshot(self) -> Snapshot:
        return Snapshot(self.node, self.gen.current, list(self.gen.history),
                        list(self.dirty), self.role, self.disk, self.discard)


class ReplicatedDevice:
    """Both halves of one DRBD resource plus their wire protocol."""

    def __init__(self, sim: Simulator, cfg: DeviceConfig, nodes: Optional[list[str]] = None,
                 local_latency: int = 0, ping_interval: int = 1000, ping_timeout: int = 5000,
                 connect_interval: int = 1000, resync_tick: int = 100) -> None:
        nodes = list(nodes or cfg.nodes)
        if len(nodes) != 2:
            raise DeviceError(f"a device needs exactly two hosts, got {nodes}")
        self.sim = sim
        self.cfg = cfg
        self.local_latency = local_latency
        self.ping_interval = ping_interval
        self.ping_timeout = ping_timeout
        self.connect_interval = connect_interval
        self.tick_ms = resync_tick
        self._tags = 1
        self.replicas = {
            nodes[0]: Replica(nodes[0], nodes[1], cfg, self._tags),
            nodes[1]: Replica(nodes[1], nodes[0], cfg, self._tags),
        }
        self.sessions: list[ResyncSession] = []
        self.split_brains: list[tuple[int, int]] = []
        self.resolutions: list[dict] = []
        self.ready_listeners: list[Callable[[str], None]] = []
        self.max_al = 0
        for n in nodes:
            for kind, fn in (("drbd-data", self._on_data), ("drbd-recv", self._on_recv),
                             ("drbd-applied", self._on_applied), ("drbd-ping", self._on_ping),
                             ("drbd-pong", self._on_pong), ("drbd-connect", self._on_connect),
                             ("drbd-connect-ack", self._on_connect_ack),
                             ("drbd-resync", self._on_resync), ("drbd-resync-ack", self._on_resync_ack),
                             ("drbd-detached", self._on_peer_detached),
                             ("drbd-disconnect", self._on_disconnect)):
                sim.register(n, kind, fn)

    # -- helpers ----------------------------------------------------
    @property
    def nodes(self) -> list[str]:
        return list(self.replicas)

    def replica(self, node: str) -> Replica:
        try:
            return self.replicas[node]
        except KeyError:
            raise DeviceError(f"{node} does not host {self.cfg.name}") from None

    def _trace(self, node: Optional[str], kind: str, detail: str) -> None:
        self.sim.record(node, "drbd", kind, detail)

    def _new_tag(self) -> int:
        self._tags += 1
        return self._tags

    def _send(self, r: Replica, kind: str, size: int = CONTROL_SIZE, **payload) -> None:
        self.sim.send(r.node, r.peer, kind, size, payload)

    def _heard(self, msg: Message) -> Replica:
        r = self.replicas[msg.dst]
        r.last_heard = self.sim.clock
        return r

    def _extent(self, block: int) -> int:
        return block * self.cfg.block_size // EXTENT_SIZE

    # -- bring-up ---------------------------------------------------
    def start_connected(self, primaries: tuple[str, ...] = ()) -> None:
        """Warm start: both sides Connected and UpToDate, as after initial sync."""
        for r in self.replicas.values():
            r.conn = ConnState.CONNECTED
            r.disk = DiskState.UP_TO_DATE
            r.last_heard = self.sim.clock
            self._schedule_ping(r)
        for n in primaries:
            self.replicas[n].role = Role.PRIMARY

    def on_power(self, node: str, old: Power, new: Power) -> None:
        r = self.replicas.get(node)
        if r is None:
            return
        if new is Power.RUNNING:
            r.conn = ConnState.WF_CONNECTION
            self._trace(node, "conn", f"{node} {self.cfg.name} WFConnection")
            self._connect_loop(r)
        elif old is Power.RUNNING:
            # volatile state dies; disk, bitmap, activity log and tags persist
            r.role = Role.SECONDARY
            r.conn = ConnState.STANDALONE
            r.pending.clear()
            r.session = None
            r.resync_target = None
            r.peer_disk_detached = False
            r.disconnected_write_seen = False
            self._abort_session(node)

    def _abort_session(self, node: str) -> None:
        for s in self.sessions:
            if s.finished_at is None and not s.aborted and node in (s.source, s.target):
                s.aborted = True

    # -- keepalive ----------------------------------------------------
    def _schedule_ping(self, r: Replica) -> None:
        self.sim.timer(r.node, self.ping_interval, lambda: self._ping(r), label=f"drbd ping {r.node}")

    def _ping(self, r: Replica) -> None:
        if r.conn not in LINKED:
            return
        if self.sim.clock - r.last_heard > self.ping_timeout:
            self._lose_connection(r, "ping timeout")
            return
        self._send(r, "drbd-ping")
        self._schedule_ping(r)

    def _on_ping(self, msg: Message) -> None:
        r = self.replicas[msg.dst]
        if r.conn in LINKED:
            r.last_heard = self.sim.clock
            self._send(r, "drbd-pong")

    def _on_pong(self, msg: Message) -> None:
        r = self.replicas[msg.dst]
        if r.conn in LINKED:
            r.last_heard = self.sim.clock

    def _lose_connection(self, r: Replica, reason: str) -> None:
        was = r.conn
        r.conn = ConnState.WF_CONNECTION
        r.pending.clear()
        r.peer_disk_detached = False
        r.disconnected_write_seen = False
        if r.session is not None or r.resync_target is not None:
            self._abort_session(r.node)
        r.session = None
        r.resync_target = None
        self._trace(r.node, "conn", f"{r.node} {self.cfg.name} lost connection ({reason}) "
                                    f"{was.value} -> WFConnection")
        self._connect_loop(r)

    # -- handshake ----------------------------------------------------
    def _connect_loop(self, r: Replica) -> None:
        if r.conn is not ConnState.WF_CONNECTION or r.node > r.peer:
            return
        self._send(r, "drbd-connect", snapshot=r.snapshot())
        self.sim.timer(r.node, self.connect_interval, lambda: self._connect_loop(r),
                       label=f"drbd connect {r.node}")

    def _on_connect(self, msg: Message) -> None:
        r = self.replicas[msg.dst]
        if r.conn is not ConnState.WF_CONNECTION:
            return
        theirs: Snapshot = msg.payload["snapshot"]
        mine = r.snapshot()
        result = self.handshake(theirs, mine)
        primaries = (theirs.role is Role.PRIMARY) + (mine.role is Role.PRIMARY)
        self._send(r, "drbd-connect-ack", snapshot=mine, result=result, primaries=primaries)
        self._apply_handshake(r, result, theirs, primaries, initiator=False)

    def _on_connect_ack(self, msg: Message) -> None:
        r = self.replicas[msg.dst]
        if r.conn is not ConnState.WF_CONNECTION:
            return
        p = msg.payload
        self._apply_handshake(r, p["result"], p["snapshot"], p["primaries"], initiator=True)

    def handshake(self, a: Snapshot, b: Snapshot) -> HandshakeResult:
        return classify_handshake(a, b)

    def _apply_handshake(self, r: Replica, result: HandshakeResult, peer: Snapshot,
                         primaries: int, initiator: bool) -> None:
        now = self.sim.clock
        r.last_heard = now
        r.discard = False
        if initiator:
            self._trace(r.node, "handshake", f"{self.cfg.name} handshake {r.node}/{r.peer}: {result}")
        if result.kind is HandshakeKind.SPLIT_BRAIN:
            action = self.apply_after_sb_policy(primaries)
            if initiator:
                self.split_brains.append((now, primaries))
                self._trace(r.node, "split-brain",
                            f"split-brain detected on {self.cfg.name} ({primaries} primaries): {action}")
            r.conn = ConnState.STANDALONE
            self._trace(r.node, "conn", f"{r.node} {self.cfg.name} StandAlone")
            return
        r.disconnected_write_seen = False
        if r.disk is DiskState.DETACHED or peer.disk is DiskState.DETACHED:
            r.conn = ConnState.CONNECTED
            r.peer_disk_detached = peer.disk is DiskState.DETACHED
            self._schedule_ping(r)
            return
        if result.kind is HandshakeKind.ALREADY_IN_SYNC:
            r.conn = ConnState.CONNECTED
            r.disk = DiskState.UP_TO_DATE
            self._trace(r.node, "conn", f"{r.node} {self.cfg.name} Connected")
            self._schedule_ping(r)
            self._notify_ready(r.node)
            return
        union = list(r.dirty) + [b for b in peer.dirty if b not in r.dirty]
        self._schedule_ping(r)
        if not union:
            r.conn = ConnState.CONNECTED
            r.disk = DiskState.UP_TO_DATE
            if result.target == r.node:
                r.gen = Generation(peer.current, list(peer.history))
            self._trace(r.node, "conn", f"{r.node} {self.cfg.name} Connected (nothing to resync)")
            self._notify_ready(r.node)
            return
        if result.source == r.node:
            r.conn = ConnState.SYNC_SOURCE
            session = ResyncSession(r.node, r.peer, now, len(union), queue=union)
            r.session = session
            self.sessions.append(session)
            self._trace(r.node, "resync", f"resync {r.node} -> {r.peer} started: {len(union)} blocks")
            self.resync_tick(r.node)
        else:
            r.conn = ConnState.SYNC_TARGET
            r.disk = DiskState.INCONSISTENT
            self._trace(r.node, "conn", f"{r.node} {self.cfg.name} SyncTarget Inconsistent")

    def apply_after_sb_policy(self, primaries: int) -> str:
        policy = {0: self.cfg.after_sb_0pri, 1: self.cfg.after_sb_1pri,
                  2: self.cfg.after_sb_2pri}[primaries]
        # only the disconnect arm is modeled; anything else degrades to it
        return "disconnect" if policy != "disconnect" else policy

    def resolve_split_brain(self, victim: str) -> None:
        """Operator discards `victim`'s divergent data and reconnects both sides."""
        v = self.replica(victim)
        other = self.replicas[v.peer]
        self.resolutions.append({"t": self.sim.clock, "victim": victim,
                                 "differing": v.store.diff(other.store)})
        self._trace(None, "resolve", f"operator discards data on {victim} ({self.cfg.name})")
        v.discard = True
        for r in (v, other):
            if r.conn is ConnState.STANDALONE and self.sim.is_running(r.node):
                r.conn = ConnState.WF_CONNECTION
                self._connect_loop(r)

    # -- resync -------------------------------------------------------
    def resync_tick(self, node: str) -> None:
        r = self.replicas[node]
        s = r.session
        if s is None or r.conn is not ConnState.SYNC_SOURCE:
            return
        bs = self.cfg.block_size
        s.budget += self.cfg.sync_rate * self.tick_ms // 1000
        n = min(s.budget // bs, len(s.queue) - s.pos)
        if n > 0:
            s.budget -= n * bs
            chunk = s.queue[s.pos:s.pos + n]
            s.pos += n
            final = s.pos >= len(s.queue)
            blocks = [(i, r.store.get(i)) for i in chunk]
            msg = self.sim.send(node, r.peer, "drbd-resync", n * bs,
                                {"blocks": blocks, "final": final,
                                 "gen": r.gen.copy()})
            s.bytes_sent += n * bs
            if msg is not None:
                if s.first_tx_us is None:
                    s.first_tx_us = msg.tx_start_us
                s.last_tx_end_us = msg.tx_end_us
            if final:
                return
        self.sim.timer(node, self.tick_ms, lambda: self.resync_tick(node), label=f"resync {node}")

    def _on_resync(self, msg: Message) -> None:
        r = self._heard(msg)
        if r.conn is not ConnState.SYNC_TARGET:
            return
        for idx, rec in msg.payload["blocks"]:
            r.store.put(idx, rec)
            r.dirty.pop(idx, None)
        ids = [(i, rec.write_id if rec else None) for i, rec in msg.payload["blocks"]]
        final = msg.payload["final"]
        if final:
            r.conn = ConnState.CONNECTED
            r.disk = DiskState.UP_TO_DATE
            r.gen = msg.payload["gen"].copy()
            self._trace(r.node, "resync", f"{r.node} {self.cfg.name} resync received, UpToDate")
        self._send(r, "drbd-resync-ack", blocks=ids, final=final)
        if final:
            self._notify_ready(r.node)

    def _on_resync_ack(self, msg: Message) -> None:
        r = self._heard(msg)
        s = r.session
        if s is None or r.conn is not ConnState.SYNC_SOURCE:
            return
        for idx, wid in msg.payload["blocks"]:
            cur = r.store.get(idx)
            if (cur.write_id if cur else None) == wid:
                r.dirty.pop(idx, None)
        s.blocks_acked += len(msg.payload["blocks"])
        if msg.payload["final"]:
            s.finished_at = self.sim.clock
            r.conn = ConnState.CONNECTED
            r.session = None
            self._trace(r.node, "resync",
                        f"resync {s.source} -> {s.target} complete: {s.blocks} blocks "
                        f"{s.bytes_sent} bytes in {s.duration}ms")

    def _notify_ready(self, node: str) -> None:
        for fn in list(self.ready_listeners):
            fn(node)

    # -- roles ----------------------------------------------------------
    def set_role(self, node: str, role: Role) -> None:
        r = self.replica(node)
        if role is r.role:
            return
        if role is Role.PRIMARY:
            if r.disk is DiskState.INCONSISTENT:
                raise DeviceError("inconsistent data")
            if r.disk is DiskState.DETACHED and r.conn not in LINKED:
                raise DeviceError("no usable disk")
            peer = self.replicas[r.peer]
            if (r.conn in LINKED and peer.role is Role.PRIMARY
                    and not self.cfg.allow_two_primaries):
                raise DeviceError("peer is primary")
            if r.conn not in LINKED:
                self._disconnected_write(r)
        r.role = role
        self._trace(node, "role", f"{node} {self.cfg.name} {role.value}")

    def _disconnected_write(self, r: Replica) -> None:
        if not r.disconnected_write_seen:
            r.disconnected_write_seen = True
            r.gen.bump(self._new_tag())
            self._trace(r.node, "generation",
                        f"{r.node} {self.cfg.name} new generation {r.gen.current}")

    def promotable(self, node: str) -> bool:
        r = self.replicas[node]
        return r.disk is not DiskState.INCONSISTENT

    # -- writes -------------------------------------------------------
    def submit_write(self, node: str, block: int, write_id: str,
                     on_ack: Optional[Callable[[int], None]] = None) -> None:
        """Issue a write; `on_ack(time)` fires when the protocol says it is durable."""
        r = self.replica(node)
        if r.role is not Role.PRIMARY:
            raise DeviceError("wrong role")
        if not 0 <= block < self.cfg.block_count:
            raise DeviceError(f"block {block} out of range")
        record = make_record(write_id, node)
        if r.disk is DiskState.DETACHED:
            peer = self.replicas[r.peer]
            if r.conn in LINKED and not r.peer_disk_detached and peer.disk is not DiskState.DETACHED:
                r.pending[write_id] = PendingWrite(block, write_id, "applied", on_ack)
                self._send(r, "drbd-data", self.cfg.block_size, block=block, record=record,
                           diskless=True)
                return
            self._trace(node, "io-error", f"{node} {self.cfg.name} write {write_id} failed: no disk")
            raise DeviceError("io error")
        if self.local_latency:
            self.sim.timer(node, self.local_latency,
                           lambda: self._local_complete(r, block, record, on_ack),
                           label=f"local write {write_id}")
        else:
            self._local_complete(r, block, record, on_ack)

    def _local_complete(self, r: Replica, block: int, record: BlockRecord,
                        on_ack: Optional[Callable[[int], None]]) -> None:
        if r.disk is DiskState.DETACHED:
            return
        r.store.put(block, record)
        r.activity_log.touch(self._extent(block))
        self.max_al = max(self.max_al, len(r.activity_log))
        r.dirty[block] = None
        replicate = r.conn in LINKED and not r.peer_disk_detached
        if r.conn not in LINKED:
            self._disconnected_write(r)
        proto = self.cfg.protocol
        if replicate:
            if proto is not Protocol.A:
                r.pending[record.write_id] = PendingWrite(
                    block, record.write_id, "recv" if proto is Protocol.B else "applied", on_ack)
            self._send(r, "drbd-data", self.cfg.block_size, block=block, record=record,
                       diskless=False, protocol=proto.value)
        if (proto is Protocol.A or not replicate) and on_ack is not None:
            on_ack(self.sim.clock)

    def _on_data(self, msg: Message) -> None:
        r = self._heard(msg)
        if r.conn not in LINKED or r.disk is DiskState.DETACHED:
            return
        p = msg.payload
        if p.get("protocol") == "B":
            self._send(r, "drbd-recv", write_id=p["record"].write_id)
        r.store.put(p["block"], p["record"])
        r.activity_log.touch(self._extent(p["block"]))
        self.max_al = max(self.max_al, len(r.activity_log))
        self._send(r, "drbd-applied", write_id=p["record"].write_id, block=p["block"])

    def _on_recv(self, msg: Message) -> None:
        r = self._heard(msg)
        pw = r.pending.get(msg.payload["write_id"])
        if pw is not None and pw.needs == "recv":
            del r.pending[pw.write_id]
            if pw.on_ack is not None:
                pw.on_ack(self.sim.clock)

    def _on_applied(self, msg: Message) -> None:
        r = self._heard(msg)
        wid, block = msg.payload["write_id"], msg.payload["block"]
        cur = r.store.get(block)
        if cur is not None and cur.write_id == wid:
            r.dirty.pop(block, None)
        pw = r.pending.get(wid)
        if pw is not None and pw.needs == "applied":
            del r.pending[wid]
            if pw.on_ack is not None:
                pw.on_ack(self.sim.clock)

    # -- disk faults --------------------------------------------------
    def handle_io_error(self, node: str) -> None:
        r = self.replica(node)
        if r.disk is DiskState.DETACHED:
            return
        r.disk = DiskState.DETACHED
        self._trace(node, "detach", f"{node} {self.cfg.name} disk detached after io error")
        if r.conn in LINKED:
            self._send(r, "drbd-detached")

    def _on_peer_detached(self, msg: Message) -> None:
        r = self._heard(msg)
        r.peer_disk_detached = True
        self._trace(r.node, "detach", f"{r.node} {self.cfg.name} peer disk detached; replication suspended")

    def io_available(self, node: str) -> bool:
        r = self.replicas[node]
        if r.disk is not DiskState.DETACHED:
            return True
        peer = self.replicas[r.peer]
        return r.conn in LINKED and peer.disk is not DiskState.DETACHED

    # -- graceful disconnect -----------------------------------------
    def disconnect(self, node: str) -> None:
        r = self.replica(node)
        if r.conn in LINKED:
            self._send(r, "drbd-disconnect")
        r.conn = ConnState.STANDALONE
        r.session = None
        r.role = Role.SECONDARY
        self._trace(node, "conn", f"{node} {self.cfg.name} disconnected cleanly")

    def _on_disconnect(self, msg: Message) -> None:
        r = self.replicas[msg.dst]
        if r.conn in LINKED:
            self._lose_connection(r, "peer disconnected")

    # -- status -------------------------------------------------------
    def status(self, node: str) -> str:
        r = self.replica(node)
        if r.conn in LINKED:
            peer = self.replicas[r.peer]
            peer_role, peer_disk = peer.role.value, peer.disk.value
        else:
            peer_role, peer_disk = "Unknown", "DUnknown"
        return (f"cs:{r.conn.value} st:{r.role.value}/{peer_role} "
                f"ds:{r.disk.value}/{peer_disk}")

    def resync_utilization(self, session: ResyncSession) -> Optional[float]:
        """Fraction of the source->target link busy during the resync window."""
        if session.first_tx_us is None or session.last_tx_end_us is None:
            return None
        window = session.last_tx_end_us - session.first_tx_us
        if window <= 0:
            return None
        link = self.sim.link(session.source, session.target)
        busy = link.busy_us(session.source, session.target, session.first_tx_us,
                            session.last_tx_end_us)
        return busy / window
