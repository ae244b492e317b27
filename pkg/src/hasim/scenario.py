"""Line-oriented scenario files and expected-step checking.

    node node1
    link node1 node2 latency 1ms bandwidth 12M
    config ha ha.cf
    config drbd drbd.conf
    config cib bootstrap.xml
    set vm_boot 20s
    workload commits vm=vm1 interval=100ms
    inject 20s power-pull node1 restore=60s
    expect "node2 declares node1 dead"
    end 180s

Config paths are relative to the scenario file.  Durations take ms/s
suffixes (bare numbers are milliseconds).
"""

from __future__ import annotations

import difflib
import fnmatch
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

from .membership import parse_ha_cf
from .units import parse_duration, parse_rate

BUILTIN_DIR = Path(__file__).parent / "builtin"


class ScenarioError(ValueError):
    def __init__(self, message: str, line: int = 0, col: int = 0, source: str = "") -> None:
        self.message, self.line, self.col, self.source = message, line, col, source
        where = f"{source}:" if source else ""
        super().__init__(f"{where}{line}:{col}: {message}" if line else f"{where}{message}")


class InjectionKind(Enum):
    HEARTBEAT_STOP = "heartbeat-stop"
    POWER_PULL = "power-pull"
    CLEAN_SHUTDOWN = "clean-shutdown"
    LINK_PARTITION = "link-partition"
    LINK_HEAL = "link-heal"
    DISK_FAULT = "disk-fault"
    RESOLVE_SPLIT_BRAIN = "resolve-split-brain"

    @property
    def targets_link(self) -> bool:
        return self in (InjectionKind.LINK_PARTITION, InjectionKind.LINK_HEAL)


@dataclass
class Injection:
    at: int
    kind: InjectionKind
    target: tuple
    restore: Optional[int] = None
    jitter: int = 0
    line: int = 0
    cols: tuple = field(default=(), repr=False, compare=False)

    def __str__(self) -> str:
        return f"{self.kind.value} {' '.join(self.target)}"


@dataclass
class LinkSpec:
    a: str
    b: str
    latency: int = 1
    bandwidth: int = 12_500_000
    jitter: int = 0


@dataclass
class WorkloadSpec:
    kind: str  # commits | requests
    vm: str
    interval: int
    start: int = 0
    until: Optional[int] = None
    batch: int = 1
    base: Optional[int] = None
    blocks: Optional[int] = None


# keys accepted by `set`; values stay strings until the cluster is built
SETTINGS = {
    "protocol", "reboot_delay", "vm_boot", "vm_stop", "vm_migrate", "fence_start",
    "fence_latency", "fence_timeout", "sync_rate", "keepalive", "warntime", "deadtime",
    "allow_migrate", "stonith_device",
    "transition-idle-timeout", "default-resource-stickiness",
    "default-resource-failure-stickiness", "stonith-enabled", "stonith-action",
    "symmetric-cluster", "no-quorum-policy",
}


@dataclass
class Scenario:
    name: str
    seed: int = 0
    nodes: list = field(default_factory=list)
    links: list = field(default_factory=list)
    ha_text: Optional[str] = None
    drbd_text: Optional[str] = None
    cib_texts: list = field(default_factory=list)  # [(path, text)]
    settings: dict = field(default_factory=dict)
    workloads: list = field(default_factory=list)
    timeline: list = field(default_factory=list)
    end_at: int = 0
    expected: list = field(default_factory=list)
    source: str = ""

    def with_settings(self, **overrides) -> "Scenario":
        """Copy with extra `set` overrides (keys use the file spelling)."""
        settings = {**self.settings, **{k: str(v) for k, v in overrides.items()}}
        return replace(self, settings=settings)

    def shifted(self, index: int, at: int) -> "Scenario":
        """Copy with timeline entry `index` moved to time `at`."""
        timeline = list(self.timeline)
        timeline[index] = replace(timeline[index], at=at)
        return replace(self, timeline=timeline)


_TOKEN = re.compile(r'"[^"]*"|\S+')


def _tokens(line: str) -> list[tuple[str, int]]:
    out = []
    for m in _TOKEN.finditer(line):
        tok = m.group(0)
        if tok.startswith("#"):
            break
        out.append((tok[1:-1] if tok.startswith('"') else tok, m.start() + 1))
    return out


def parse_scenario(text: str, name: str = "scenario", base_dir: Optional[Path] = None,
                   source: str = "") -> Scenario:
    sc = Scenario(name, source=source)
    base = Path(base_dir) if base_dir is not None else Path(".")
    node_lines: dict[str, int] = {}
    seen_end = False

    def err(msg: str, lineno: int, col: int) -> ScenarioError:
        return ScenarioError(msg, lineno, col, source)

    def duration(tok: str, lineno: int, col: int) -> int:
        try:
            return parse_duration(tok, "ms")
        except ValueError as exc:
            raise err(str(exc), lineno, col) from None

    def keyvals(toks, lineno) -> dict:
        out = {}
        for tok, col in toks:
            if "=" not in tok:
                raise err(f"expected key=value, got {tok!r}", lineno, col)
            k, v = tok.split("=", 1)
            out[k] = (v, col)
        return out

    def read(path_tok: str, lineno: int, col: int) -> str:
        p = base / path_tok
        try:
            return p.read_text()
        except OSError:
            raise err(f"missing config file {path_tok!r}", lineno, col) from None

    for lineno, raw in enumerate(text.splitlines(), 1):
        toks = _tokens(raw)
        if not toks:
            continue
        word, col0 = toks[0]
        args = toks[1:]
        if seen_end and word != "expect":
            raise err(f"{word!r} after end", lineno, col0)
        if word == "node":
            if len(args) != 1:
                raise err("node takes one name", lineno, col0)
            n, c = args[0]
            if n in node_lines:
                raise err(f"duplicate node {n!r}", lineno, c)
            node_lines[n] = lineno
            sc.nodes.append(n)
        elif word == "seed":
            try:
                sc.seed = int(args[0][0])
            except (IndexError, ValueError):
                raise err("seed takes an integer", lineno, col0) from None
        elif word == "link":
            if len(args) < 2:
                raise err("link needs two endpoints", lineno, col0)
            link = LinkSpec(args[0][0], args[1][0])
            rest = args[2:]
            if len(rest) % 2:
                raise err("link options come in pairs", lineno, rest[-1][1])
            for (k, kc), (v, vc) in zip(rest[::2], rest[1::2]):
                if k == "latency":
                    link.latency = duration(v, lineno, vc)
                elif k == "bandwidth":
                    try:
                        link.bandwidth = parse_rate(v, "")
                    except ValueError as exc:
                        raise err(str(exc), lineno, vc) from None
                elif k == "jitter":
                    link.jitter = duration(v, lineno, vc)
                else:
                    raise err(f"unknown link option {k!r}", lineno, kc)
            sc.links.append((link, lineno, args[0][1]))
        elif word == "config":
            if len(args) != 2:
                raise err("config takes a kind and a path", lineno, col0)
            (kind, kc), (path, pc) = args
            content = read(path, lineno, pc)
            if kind == "ha":
                sc.ha_text = content
            elif kind == "drbd":
                sc.drbd_text = content
            elif kind == "cib":
                sc.cib_texts.append((path, content))
            else:
                raise err(f"unknown config kind {kind!r}", lineno, kc)
        elif word == "set":
            if len(args) != 2:
                raise err("set takes a key and a value", lineno, col0)
            (k, kc), (v, _vc) = args
            if k not in SETTINGS:
                raise err(f"unknown setting {k!r}", lineno, kc)
            sc.settings[k] = v
        elif word == "workload":
            if not args or args[0][0] not in ("commits", "requests"):
                raise err("workload kind must be commits or requests", lineno,
                          args[0][1] if args else col0)
            kv = keyvals(args[1:], lineno)
            if "vm" not in kv:
                raise err("workload needs vm=<id>", lineno, col0)
            kind = args[0][0]
            spec = WorkloadSpec(kind, kv.pop("vm")[0], 100 if kind == "commits" else 50)
            for k, (v, c) in kv.items():
                if k == "interval":
                    spec.interval = duration(v, lineno, c)
                elif k == "from":
                    spec.start = duration(v, lineno, c)
                elif k == "until":
                    spec.until = duration(v, lineno, c)
                elif k in ("batch", "base", "blocks") and kind == "commits":
                    try:
                        setattr(spec, k, int(v))
                    except ValueError:
                        raise err(f"{k} takes an integer", lineno, c) from None
                else:
                    raise err(f"unknown workload option {k!r}", lineno, c)
            if spec.interval <= 0:
                raise err("interval must be positive", lineno, col0)
            sc.workloads.append(spec)
        elif word == "inject":
            if len(args) < 3:
                raise err("inject needs <at> <kind> <target>", lineno, col0)
            at = duration(args[0][0], lineno, args[0][1])
            kname, kc = args[1]
            try:
                kind = InjectionKind(kname)
            except ValueError:
                raise err(f"unknown injection kind {kname!r}", lineno, kc) from None
            positional = [t for t in args[2:] if "=" not in t[0]]
            opts = keyvals([t for t in args[2:] if "=" in t[0]], lineno)
            want = 2 if kind.targets_link else 1
            if len(positional) != want:
                raise err(f"{kind.value} takes {want} target(s)", lineno, args[2][1])
            inj = Injection(at, kind, tuple(t for t, _c in positional), line=lineno)
            for k, (v, c) in opts.items():
                if k == "restore":
                    inj.restore = duration(v, lineno, c)
                elif k == "jitter":
                    inj.jitter = duration(v, lineno, c)
                else:
                    raise err(f"unknown inject option {k!r}", lineno, c)
            if sc.timeline and at < sc.timeline[-1].at:
                raise err(f"timeline not sorted: {at}ms after {sc.timeline[-1].at}ms", lineno, args[0][1])
            inj.cols = tuple(c for _t, c in positional)
            sc.timeline.append(inj)
        elif word == "expect":
            if len(args) != 1:
                raise err('expect takes one quoted pattern', lineno, col0)
            sc.expected.append(args[0][0])
        elif word == "end":
            if len(args) != 1:
                raise err("end takes a time", lineno, col0)
            sc.end_at = duration(args[0][0], lineno, args[0][1])
            seen_end = True
        else:
            raise err(f"unknown directive {word!r}", lineno, col0)

    if not seen_end:
        raise ScenarioError("missing 'end <at>'", 0, 0, source)
    if not sc.nodes and sc.ha_text:
        sc.nodes = list(parse_ha_cf(sc.ha_text)[0].node_list)
    known = set(sc.nodes)
    links = []
    for link, lineno, col in sc.links:
        for n in (link.a, link.b):
            if n not in known:
                raise err(f"unknown node {n!r} in link", lineno, col)
        links.append(link)
    sc.links = links
    for inj in sc.timeline:
        for t, c in zip(inj.target, inj.cols):
            if t not in known:
                raise err(f"unknown target {t!r}", inj.line, c)
        if inj.at >= sc.end_at:
            raise err("end must come after the last injection", inj.line, 1)
    return sc


def resolve_builtin(name: str) -> Optional[Path]:
    p = BUILTIN_DIR / f"{name}.scn"
    return p if p.is_file() else None


def list_builtin() -> list[str]:
    return sorted(p.stem for p in BUILTIN_DIR.glob("*.scn"))


def load_scenario(ref: str) -> Scenario:
    """Load a scenario from a path, or by builtin name."""
    path = Path(ref)
    if not path.is_file():
        builtin = resolve_builtin(ref)
        if builtin is None:
            raise ScenarioError(f"no such scenario file or builtin: {ref}")
        path = builtin
    name = path.stem
    return parse_scenario(path.read_text(), name, path.parent, str(path))


# ---------------------------------------------------------------------------
# expected steps

@dataclass
class Verdict:
    matched: bool
    first_divergence: Optional[str] = None
    nearest: Optional[str] = None
    consumed: int = 0

    def __str__(self) -> str:
        if self.matched:
            return "Matched"
        near = f" (nearest: {self.nearest})" if self.nearest else ""
        return f"Diverged at {self.first_divergence!r}{near}"


def check_expected_steps(trace: Iterable, expected: list[str]) -> Verdict:
    """Greedy in-order subsequence match of glob patterns on trace details."""
    entries = list(trace)
    pos = 0
    for i, pattern in enumerate(expected):
        while pos < len(entries) and not fnmatch.fnmatchcase(entries[pos].detail, pattern):
            pos += 1
        if pos == len(entries):
            nearest = _nearest(entries, pattern)
            return Verdict(False, pattern, nearest, i)
        pos += 1
    return Verdict(True, consumed=len(expected))


def _nearest(entries: list, pattern: str) -> Optional[str]:
    best, best_ratio = None, 0.0
    plain = pattern.replace("*", "").replace("?", "")
    for e in entries:
        ratio = difflib.SequenceMatcher(None, plain, e.detail).ratio()
        if ratio > best_ratio:
            best, best_ratio = e, ratio
    return best.line() if best is not None else None
