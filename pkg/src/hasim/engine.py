"""Deterministic discrete-event core.

Virtual clock in integer milliseconds, a (time, seq) ordered event queue,
seeded randomness, and a simulated switch with per-link latency, FIFO
bandwidth sharing and partitions.  Node power states gate everything a
node does: a node that is not Running sends nothing, fires no timers and
receives nothing.
"""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Optional

# 100 Mb/s switch
DEFAULT_BANDWIDTH = 12_500_000
DEFAULT_LATENCY_MS = 1
DEFAULT_REBOOT_DELAY_MS = 30_000


class SimulationError(RuntimeError):
    """A contract violation inside the simulation; aborts the run."""


class Power(Enum):
    RUNNING = "Running"
    POWERED_OFF = "PoweredOff"
    REBOOTING = "Rebooting"
    CLEANLY_DOWN = "CleanlyDown"


class LinkState(Enum):
    UP = "Up"
    PARTITIONED = "Partitioned"


class EventKind(Enum):
    DELIVERY = "MessageDelivery"
    TIMER = "TimerFire"
    INJECTION = "Injection"
    INTERNAL = "InternalAction"


@dataclass(frozen=True)
class TraceEntry:
    t: int
    node: Optional[str]
    module: str
    kind: str
    detail: str

    def line(self) -> str:
        return f"{self.t} {self.node or '-'} {self.module} {self.kind} {self.detail}"

    def to_dict(self) -> dict:
        return {"t": self.t, "node": self.node, "module": self.module,
                "kind": self.kind, "detail": self.detail}


class Trace(list):
    """Ordered list of TraceEntry with text / JSON-lines renderings."""

    def lines(self) -> list[str]:
        return [e.line() for e in self]

    def to_text(self) -> str:
        return "".join(e.line() + "\n" for e in self)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict()) + "\n" for e in self)

    def write(self, path: str) -> None:
        text = self.to_jsonl() if str(path).endswith((".json", ".jsonl")) else self.to_text()
        with open(path, "w") as fh:
            fh.write(text)

    def where(self, module: str | None = None, kind: str | None = None,
              node: str | None = None) -> list[TraceEntry]:
        return [e for e in self
                if (module is None or e.module == module)
                and (kind is None or e.kind == kind)
                and (node is None or e.node == node)]


@dataclass(eq=False)
class SimEvent:
    at: int
    seq: int
    kind: EventKind
    action: Callable[[], None]
    owner: Optional[str] = None
    incarnation: int = 0
    label: str = ""
    cancelled: bool = False

    def cancel(self) -> None:
        self.cancelled = True


@dataclass(eq=False)
class Message:
    id: int
    src: str
    dst: str
    kind: str
    size: int
    payload: dict
    sent_at: int
    tx_start_us: int
    tx_end_us: int


@dataclass(eq=False)
class Link:
    a: str
    b: str
    latency: int = DEFAULT_LATENCY_MS
    bandwidth: int = DEFAULT_BANDWIDTH
    jitter: int = 0
    state: LinkState = LinkState.UP
    # per direction: (src, dst) -> ...
    free_us: dict = field(default_factory=dict)
    last_delivery: dict = field(default_factory=dict)
    transmissions: dict = field(default_factory=dict)
    rng: Optional[random.Random] = None

    def __post_init__(self) -> None:
        if self.latency < 0:
            raise ValueError("link latency must be >= 0")
        if self.bandwidth <= 0:
            raise ValueError("link bandwidth must be > 0")

    @property
    def endpoints(self) -> tuple[str, str]:
        return (self.a, self.b)

    def busy_us(self, src: str, dst: str, start_us: int, end_us: int) -> int:
        """Microseconds the src->dst direction spent transmitting within a window."""
        total = 0
        for s, e, _size, _kind in self.transmissions.get((src, dst), ()):
            lo, hi = max(s, start_us), min(e, end_us)
            if hi > lo:
                total += hi - lo
        return total


@dataclass(eq=False)
class NodeState:
    name: str
    power: Power = Power.RUNNING
    incarnation: int = 0
    rebooting_until: Optional[int] = None
    off_times: list = field(default_factory=list)
    handlers: dict = field(default_factory=dict)


def _round_ms(us: int) -> int:
    return (us + 500) // 1000


class Simulator:
    """Single-threaded event loop; one instance per run."""

    def __init__(self, seed: int = 0, reboot_delay: int = DEFAULT_REBOOT_DELAY_MS,
                 trace_network: bool = True) -> None:
        self.seed = seed
        self.clock = 0
        self.reboot_delay = reboot_delay
        self.trace_network = trace_network
        self.trace = Trace()
        self.rng = random.Random(seed)
        self.nodes: dict[str, NodeState] = {}
        self.links: dict[frozenset, Link] = {}
        self._queue: list = []
        self._seq = 0
        self._msg_ids = 0
        self._power_listeners: list[Callable[[str, Power, Power], None]] = []

    # -- topology -----------------------------------------------------
    def add_node(self, name: str) -> NodeState:
        if name in self.nodes:
            raise SimulationError(f"duplicate node {name}")
        st = self.nodes[name] = NodeState(name)
        return st

    def add_link(self, a: str, b: str, latency: int = DEFAULT_LATENCY_MS,
                 bandwidth: int = DEFAULT_BANDWIDTH, jitter: int = 0) -> Link:
        for n in (a, b):
            if n not in self.nodes:
                raise SimulationError(f"link endpoint {n} is not a node")
        link = Link(a, b, latency, bandwidth, jitter,
                    rng=random.Random(f"{self.seed}:{min(a, b)}:{max(a, b)}"))
        self.links[frozenset((a, b))] = link
        return link

    def link(self, a: str, b: str) -> Link:
        try:
            return self.links[frozenset((a, b))]
        except KeyError:
            raise SimulationError(f"no link between {a} and {b}") from None

    def ensure_full_mesh(self) -> None:
        names = sorted(self.nodes)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                if frozenset((a, b)) not in self.links:
                    self.add_link(a, b)

    def set_link_state(self, a: str, b: str, state: LinkState) -> None:
        link = self.link(a, b)
        link.state = state
        self.record(None, "sim", "link", f"link {link.a}-{link.b} {state.value}")

    def reachable(self, a: str, b: str) -> bool:
        return (self.is_running(b)
                and self.link(a, b).state is LinkState.UP)

    # -- power --------------------------------------------------------
    def is_running(self, node: str) -> bool:
        return self.nodes[node].power is Power.RUNNING

    def power(self, node: str) -> Power:
        return self.nodes[node].power

    def on_power_change(self, fn: Callable[[str, Power, Power], None]) -> None:
        self._power_listeners.append(fn)

    def set_node_power(self, node: str, state: Power, at: Optional[int] = None) -> None:
        """Change a node's power state now, or at a later time via the queue."""
        if at is not None and at != self.clock:
            self.schedule(at, lambda: self.set_node_power(node, state),
                          kind=EventKind.INTERNAL, label=f"power {node} {state.value}")
            return
        st = self.nodes[node]
        old = st.power
        if old is state:
            return
        if state is Power.RUNNING and old is not Power.REBOOTING:
            # cold power-on still goes through the boot delay
            state = Power.REBOOTING
        if state is not Power.RUNNING:
            # timers and unsent buffers of the old incarnation die here
            st.incarnation += 1
        if state in (Power.POWERED_OFF, Power.REBOOTING, Power.CLEANLY_DOWN) \
                and old is Power.RUNNING:
            st.off_times.append(self.clock)
        st.power = state
        if state is Power.REBOOTING:
            st.rebooting_until = self.clock + self.reboot_delay
            token = st.incarnation
            self.schedule(st.rebooting_until, lambda: self._finish_boot(node, token),
                          kind=EventKind.INTERNAL, label=f"boot {node}")
            self.record(None, "sim", "power", f"{node} rebooting until {st.rebooting_until}")
        elif state is Power.POWERED_OFF:
            self.record(None, "sim", "power", f"{node} powered off")
        elif state is Power.CLEANLY_DOWN:
            self.record(None, "sim", "power", f"{node} cleanly down")
        for fn in list(self._power_listeners):
            fn(node, old, state)

    def power_on(self, node: str) -> None:
        if self.nodes[node].power in (Power.POWERED_OFF, Power.CLEANLY_DOWN):
            self.set_node_power(node, Power.REBOOTING)

    def _finish_boot(self, node: str, token: int) -> None:
        st = self.nodes[node]
        if st.power is not Power.REBOOTING or st.incarnation != token:
            return
        st.power = Power.RUNNING
        st.rebooting_until = None
        self.record(None, "sim", "power", f"{node} running")
        for fn in list(self._power_listeners):
            fn(node, Power.REBOOTING, Power.RUNNING)

    # -- scheduling ---------------------------------------------------
    def schedule(self, at: int, action: Callable[[], None], *,
                 kind: EventKind = EventKind.TIMER, owner: Optional[str] = None,
                 label: str = "") -> SimEvent:
        if at < self.clock:
            raise SimulationError(
                f"past event: {label or kind.value} at {at} scheduled when clock={self.clock}")
        inc = self.nodes[owner].incarnation if owner is not None else 0
        ev = SimEvent(at, self._seq, kind, action, owner, inc, label)
        self._seq += 1
        heapq.heappush(self._queue, (at, ev.seq, ev))
        return ev

    def timer(self, node: str, delay: int, action: Callable[[], None],
              label: str = "") -> SimEvent:
        """A timer owned by `node`; silently dies if the node loses power."""
        return self.schedule(self.clock + delay, action, kind=EventKind.TIMER,
                             owner=node, label=label)

    def later(self, delay: int, action: Callable[[], None], label: str = "") -> SimEvent:
        return self.schedule(self.clock + delay, action, kind=EventKind.INTERNAL, label=label)

    def pending(self) -> int:
        return len(self._queue)

    def peek_time(self) -> Optional[int]:
        return self._queue[0][0] if self._queue else None

    def advance(self) -> Optional[SimEvent]:
        """Process the next event; None when the queue is empty."""
        while self._queue:
            at, _seq, ev = heapq.heappop(self._queue)
            self.clock = at
            if ev.cancelled:
                continue
            if ev.owner is not None:
                st = self.nodes[ev.owner]
                if st.power is not Power.RUNNING or st.incarnation != ev.incarnation:
                    continue
            ev.action()
            return ev
        return None

    def run(self, until: int) -> None:
        while self._queue and self._queue[0][0] <= until:
            self.advance()
        if until > self.clock:
            self.clock = until

    # -- tracing ------------------------------------------------------
    def record(self, node: Optional[str], module: str, kind: str, detail: str) -> None:
        if node is not None and self.nodes[node].power is not Power.RUNNING:
            raise SimulationError(f"{node} authored '{kind}' while {self.nodes[node].power.value}")
        self.trace.append(TraceEntry(self.clock, node, module, kind, detail))

    # -- network ------------------------------------------------------
    def register(self, node: str, kind: str, handler: Callable[[Message], None]) -> None:
        self.nodes[node].handlers[kind] = handler

    def send(self, src: str, dst: str, kind: str, size: int = 64,
             payload: Optional[dict] = None) -> Optional[Message]:
        if self.nodes[src].power is not Power.RUNNING:
            raise SimulationError(f"send from {src} while {self.nodes[src].power.value}")
        link = self.link(src, dst)
        self._msg_ids += 1
        mid = self._msg_ids
        if link.state is not LinkState.UP:
            if self.trace_network:
                self.record(src, "net", "drop", f"msg {mid} {kind} {src}->{dst} partitioned")
            return None
        direction = (src, dst)
        now_us = self.clock * 1000
        start_us = max(now_us, link.free_us.get(direction, 0))
        end_us = start_us + -(-size * 1_000_000 // link.bandwidth)
        link.free_us[direction] = end_us
        link.transmissions.setdefault(direction, []).append((start_us, end_us, size, kind))
        delay = link.latency + (link.rng.randint(0, link.jitter) if link.jitter else 0)
        deliver_at = max(_round_ms(end_us) + delay, link.last_delivery.get(direction, 0),
                         self.clock)
        link.last_delivery[direction] = deliver_at
        msg = Message(mid, src, dst, kind, size, payload or {}, self.clock, start_us, end_us)
        if self.trace_network:
            self.record(src, "net", "send", f"msg {mid} {kind} {src}->{dst} {size}B")
        self.schedule(deliver_at, lambda: self._deliver(msg, link),
                      kind=EventKind.DELIVERY, label=f"deliver {kind} {src}->{dst}")
        return msg

    def _deliver(self, msg: Message, link: Link) -> None:
        src_state = self.nodes[msg.src]
        # unsent bytes die with the sender; power changes land at the end of their millisecond
        cut = any(msg.sent_at * 1000 <= off * 1000 + 999 < msg.tx_end_us
                  for off in src_state.off_times)
        if cut or link.state is not LinkState.UP or not self.is_running(msg.dst):
            return
        if self.trace_network:
            self.record(msg.dst, "net", "deliver", f"msg {msg.id} {msg.kind} {msg.src}->{msg.dst}")
        handler = self.nodes[msg.dst].handlers.get(msg.kind)
        if handler is not None:
            handler(msg)

    def broadcast(self, src: str, peers: Iterable[str], kind: str, size: int = 64,
                  payload: Optional[dict] = None) -> None:
        for p in peers:
            if p != src:
                self.send(src, p, kind, size, payload)
