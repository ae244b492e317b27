"""Deterministic simulator of a small high-availability cluster.

Heartbeat membership, a replicated block device, a score-based resource
manager with fencing, guest VM workloads and a scenario runner.
"""

from .cluster import Cluster, RunReport, build_config, run_scenario, show_config
from .engine import Power, Simulator, SimulationError, Trace, TraceEntry
from .scenario import (Injection, InjectionKind, Scenario, ScenarioError, check_expected_steps,
                       list_builtin, load_scenario, parse_scenario)

__version__ = "0.1.0"

__all__ = [
    "Cluster", "Injection", "InjectionKind", "Power", "RunReport", "Scenario", "ScenarioError",
    "SimulationError", "Simulator", "Trace", "TraceEntry", "build_config", "check_expected_steps",
    "list_builtin", "load_scenario", "parse_scenario", "run_scenario", "show_config",
]
