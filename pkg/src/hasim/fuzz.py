"""Random injection timelines over the two-node canonical configuration."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .cluster import run_scenario
from .scenario import BUILTIN_DIR, Scenario, parse_scenario

NODE_FAULTS = ("power-pull", "heartbeat-stop", "clean-shutdown", "link-partition", "disk-fault")


def random_scenario_text(seed: int) -> str:
    rng = random.Random(seed)
    device = rng.choice(["stonith-power.xml", "stonith-ssh.xml"])
    vms = rng.choice(["vms.xml", "vms-migratable.xml"])
    lines = [
        f"# fuzz run {seed}",
        "node node1", "node node2",
        f"link node1 node2 latency 1ms bandwidth 12500000 jitter {rng.randint(0, 3)}ms",
        "config ha configs/ha.cf", "config drbd configs/drbd.conf",
        "config cib configs/bootstrap.xml", f"config cib configs/{device}",
        f"config cib configs/{vms}",
        "workload commits vm=vm1 interval=250ms", "workload commits vm=vm3 interval=250ms",
        f"seed {seed}",
    ]
    t = 0
    for _ in range(rng.randint(1, 4)):
        t += rng.randint(1000, 60000)
        kind = rng.choice(NODE_FAULTS)
        target = "node1 node2" if kind == "link-partition" else rng.choice(["node1", "node2"])
        restore = "" if kind == "disk-fault" else f" restore={rng.randint(1000, 40000)}ms"
        lines.append(f"inject {t}ms {kind} {target}{restore}")
    lines.append(f"end {t + 150000}ms")
    return "\n".join(lines) + "\n"


def random_scenario(seed: int) -> Scenario:
    return parse_scenario(random_scenario_text(seed), f"fuzz-{seed}", BUILTIN_DIR)


@dataclass
class FuzzSummary:
    runs: int = 0
    failures: dict = field(default_factory=dict)  # seed -> violations

    @property
    def ok(self) -> bool:
        return not self.failures


def fuzz(seeds) -> FuzzSummary:
    out = FuzzSummary()
    for seed in seeds:
        rep = run_scenario(random_scenario(seed))
        out.runs += 1
        if rep.violations:
            out.failures[seed] = rep.violations
    return out
