"""Guest VMs and the traffic they generate.

Two workloads: a stateless request stream, measured only by availability,
and a sequenced-commit stream written through the replicated device,
checked afterwards against a surviving replica.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Optional

from .drbd import BlockStore, DeviceError, ReplicatedDevice
from .engine import Simulator, TraceEntry

DEFAULT_COMMIT_INTERVAL = 100
DEFAULT_REQUEST_INTERVAL = 50
DEFAULT_BOOT = 20_000
DEFAULT_STOP = 5_000
DEFAULT_MIGRATE = 5_000


class VmState(Enum):
    STOPPED = "Stopped"
    STARTING = "Starting"
    RUNNING = "Running"
    STOPPING = "Stopping"
    MIGRATING = "Migrating"


@dataclass
class GuestVM:
    id: str
    host: Optional[str] = None
    state: VmState = VmState.STOPPED
    until: Optional[int] = None
    boot_duration: int = DEFAULT_BOOT
    stop_duration: int = DEFAULT_STOP
    migrate_duration: int = DEFAULT_MIGRATE

    @property
    def active(self) -> bool:
        return self.state is not VmState.STOPPED


@dataclass
class JournalEntry:
    seq: int
    issued_at: int
    block: int
    write_id: str
    host: Optional[str]
    attempted: bool = True
    acked_at: Optional[int] = None
    error: Optional[str] = None


@dataclass
class CommitJournal:
    vm: str
    entries: list = field(default_factory=list)

    def append(self, entry: JournalEntry) -> None:
        if self.entries and entry.seq <= self.entries[-1].seq:
            raise ValueError("journal seq must increase")
        self.entries.append(entry)

    def acked(self) -> list[JournalEntry]:
        return [e for e in self.entries if e.acked_at is not None]


@dataclass
class RequestLog:
    vm: str
    entries: list = field(default_factory=list)  # (seq, issued_at, served)

    @property
    def failed(self) -> int:
        return sum(1 for _s, _t, ok in self.entries if not ok)


HostLookup = Callable[[str], Optional[str]]


class CommitWorkload:
    """Durable sequenced commits, one block per commit, round-robin over a range."""

    def __init__(self, sim: Simulator, device: ReplicatedDevice, vm: str, locate: HostLookup,
                 interval: int = DEFAULT_COMMIT_INTERVAL, block_base: int = 0,
                 block_span: Optional[int] = None, start: int = 0,
                 until: Optional[int] = None, batch: int = 1) -> None:
        if interval <= 0 or batch <= 0:
            raise ValueError("commit interval and batch must be positive")
        self.sim = sim
        self.device = device
        self.batch = batch
        self.vm = vm
        self.locate = locate
        self.interval = interval
        self.block_base = block_base
        self.block_span = block_span or device.cfg.block_count - block_base
        self.until = until
        self.journal = CommitJournal(vm)
        self._seq = 0
        sim.schedule(start, self.tick, label=f"commit {vm}")

    def tick(self) -> None:
        now = self.sim.clock
        if self.until is not None and now >= self.until:
            return
        if self.batch == 1:
            self.issue_commit(now)
        else:
            host = self.locate(self.vm)
            first = self._seq + 1
            if host is not None:
                self.sim.record(host, "workload", "commit",
                                f"commit {self.vm}#{first}..{first + self.batch - 1} on {host}")
            for _ in range(self.batch):
                self.issue_commit(now, quiet=True)
        self.sim.schedule(now + self.interval, self.tick, label=f"commit {self.vm}")

    def issue_commit(self, now: int, quiet: bool = False) -> int:
        self._seq += 1
        seq = self._seq
        block = self.block_base + (seq - 1) % self.block_span
        write_id = f"{self.vm}#{seq}"
        host = self.locate(self.vm)
        entry = JournalEntry(seq, now, block, write_id, host)
        self.journal.append(entry)
        if host is None:
            entry.attempted = False
            return seq

        def acked(t: int) -> None:
            entry.acked_at = t
            if not quiet:
                self.sim.record(host, "workload", "ack", f"commit {write_id} acked")

        if not quiet:
            self.sim.record(host, "workload", "commit", f"commit {write_id} block {block} on {host}")
        try:
            self.device.submit_write(host, block, write_id, acked)
        except DeviceError as exc:
            entry.error = str(exc)
            self.sim.record(host, "workload", "commit-error", f"commit {write_id} failed: {exc}")
        return seq


class RequestWorkload:
    """Stateless requests: served iff the VM is Running somewhere."""

    def __init__(self, sim: Simulator, vm: str, locate: HostLookup,
                 interval: int = DEFAULT_REQUEST_INTERVAL, start: int = 0,
                 until: Optional[int] = None) -> None:
        self.sim = sim
        self.vm = vm
        self.locate = locate
        self.interval = interval
        self.until = until
        self.log = RequestLog(vm)
        self._seq = 0
        sim.schedule(start, self.tick, label=f"request {vm}")

    def tick(self) -> None:
        now = self.sim.clock
        if self.until is not None and now >= self.until:
            return
        self._seq += 1
        self.log.entries.append((self._seq, now, self.locate(self.vm) is not None))
        self.sim.schedule(now + self.interval, self.tick, label=f"request {self.vm}")


@dataclass
class DurabilityReport:
    lost_acked: set = field(default_factory=set)
    lost_unacked: set = field(default_factory=set)
    preserved: int = 0
    not_attempted: int = 0
    total: int = 0
    indeterminate: bool = False

    def merge(self, other: "DurabilityReport") -> "DurabilityReport":
        return DurabilityReport(self.lost_acked | other.lost_acked,
                                self.lost_unacked | other.lost_unacked,
                                self.preserved + other.preserved,
                                self.not_attempted + other.not_attempted,
                                self.total + other.total,
                                self.indeterminate or other.indeterminate)


def verify_durability(journal: CommitJournal, store: Optional[BlockStore]) -> DurabilityReport:
    """Compare what the client believes committed with what survived."""
    rep = DurabilityReport(total=len(journal.entries))
    if store is None:
        rep.indeterminate = True
        return rep
    for e in journal.entries:
        if not e.attempted:
            rep.not_attempted += 1
            continue
        rec = store.get(e.block)
        if rec is not None and rec.write_id == e.write_id:
            rep.preserved += 1
        elif e.acked_at is not None:
            rep.lost_acked.add(e.write_id)
        else:
            rep.lost_unacked.add(e.write_id)
    return rep


# ---------------------------------------------------------------------------
# trace-derived availability

_OPEN_KINDS = {"running"}
_CLOSE_KINDS = {"stop", "stopped", "killed", "start-failed"}


def _vm_event(entry: TraceEntry) -> Optional[tuple[str, str]]:
    """-> (vm, node) for vm-module entries; detail is '<verb> <vm> on <node>'-shaped."""
    if entry.module != "vm":
        return None
    words = entry.detail.split()
    try:
        on = words.index("on")
    except ValueError:
        return None
    if entry.kind in ("start", "stop", "start-failed"):
        return words[1], words[on + 1]
    return words[0], words[on + 1]


def running_intervals(trace: Iterable[TraceEntry], vm: str, end: int) -> list[tuple[str, int, int]]:
    """[(node, from, to)] during which `vm` was Running on `node`."""
    open_at: dict[str, int] = {}
    out = []
    for e in trace:
        ev = _vm_event(e)
        if ev is None or ev[0] != vm:
            continue
        node = ev[1]
        if e.kind in _OPEN_KINDS and node not in open_at:
            open_at[node] = e.t
        elif e.kind in _CLOSE_KINDS and node in open_at:
            out.append((node, open_at.pop(node), e.t))
    for node, t in open_at.items():
        out.append((node, t, end))
    return sorted(out, key=lambda x: (x[1], x[0]))


def occupancy_intervals(trace: Iterable[TraceEntry], vm: str, end: int) -> list[tuple[str, int, int]]:
    """Intervals during which a node holds any instance of `vm` (starting through stopped)."""
    open_at: dict[str, int] = {}
    out = []
    for e in trace:
        ev = _vm_event(e)
        if ev is None or ev[0] != vm:
            continue
        node = ev[1]
        if e.kind in ("start", "running") and node not in open_at:
            open_at[node] = e.t
        elif e.kind in ("stopped", "killed", "start-failed") and node in open_at:
            out.append((node, open_at.pop(node), e.t))
    for node, t in open_at.items():
        out.append((node, t, end))
    return sorted(out, key=lambda x: (x[1], x[0]))


@dataclass
class Availability:
    downtime: int
    failed_requests: int
    failover_time: Optional[int]


def measure_availability(trace: Iterable[TraceEntry], vm: str, injected_at: int, end: int,
                         original_host: Optional[str] = None,
                         request_log: Optional[RequestLog] = None) -> Availability:
    """Downtime within [injected_at, end] and time to first Running on a new host."""
    trace = list(trace)
    intervals = running_intervals(trace, vm, end)
    covered = 0
    cursor = injected_at
    for _node, lo, hi in sorted(intervals, key=lambda x: x[1]):
        lo, hi = max(lo, cursor), min(hi, end)
        if hi > lo:
            covered += hi - lo
            cursor = hi
    downtime = (end - injected_at) - covered
    failover = None
    for node, lo, _hi in intervals:
        if lo >= injected_at and node != original_host:
            failover = lo - injected_at
            break
    failed = 0
    if request_log is not None:
        failed = sum(1 for _s, t, ok in request_log.entries if not ok and injected_at <= t <= end)
    return Availability(downtime, failed, failover)
