"""STONITH devices: forcibly reset a node before its resources move."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

from .engine import LinkState, Power, Simulator

DEFAULT_FENCE_LATENCY = 500
DEFAULT_FENCE_TIMEOUT = 20_000


class FenceKind(Enum):
    SSH_RESET = "SshReset"
    POWER_SWITCH = "PowerSwitch"


class FenceAction(Enum):
    REBOOT = "reboot"
    OFF = "off"


AGENT_TYPES = {"external/ssh": FenceKind.SSH_RESET, "ssh": FenceKind.SSH_RESET,
               "power-switch": FenceKind.POWER_SWITCH}


@dataclass(frozen=True)
class FenceDevice:
    kind: FenceKind
    hostlist: frozenset
    action: FenceAction = FenceAction.REBOOT
    op_timeout: int = DEFAULT_FENCE_TIMEOUT
    latency: int = DEFAULT_FENCE_LATENCY

    def __post_init__(self) -> None:
        if not self.hostlist:
            raise ValueError("fence device needs a nonempty hostlist")
        if self.op_timeout <= 0:
            raise ValueError("fence op_timeout must be positive")


@dataclass(frozen=True)
class FenceResult:
    ok: bool
    at: int
    reason: str = ""

    def __str__(self) -> str:
        return f"Succeeded({self.at})" if self.ok else f"Failed({self.reason})"


def fence(sim: Simulator, device: FenceDevice, requester: str, target: str,
          on_done: Optional[Callable[[FenceResult], None]] = None) -> None:
    """Fire a fence operation from `requester`; the result arrives asynchronously.

    The callback is a timer owned by the requester, so a requester that dies
    mid-operation never learns the outcome.
    """
    now = sim.clock
    sim.record(requester, "fencing", "fence", f"fence {device.kind.value} {target}")

    def finish(result: FenceResult) -> None:
        if result.ok:
            sim.record(requester, "fencing", "fenced",
                       f"fenced {target} via {device.kind.value}: succeeded")
        else:
            sim.record(requester, "fencing", "fence-failed",
                       f"fence {device.kind.value} {target} failed: {result.reason}")
        if on_done is not None:
            on_done(result)

    if target not in device.hostlist:
        sim.timer(requester, 0, lambda: finish(FenceResult(False, now, "unknown target")))
        return

    if device.kind is FenceKind.SSH_RESET:
        link = sim.link(requester, target)
        if sim.power(target) is not Power.RUNNING or link.state is not LinkState.UP:
            sim.timer(requester, device.op_timeout,
                      lambda: finish(FenceResult(False, sim.clock, "unreachable")),
                      label=f"fence timeout {target}")
            return

    def shoot() -> None:
        state = sim.power(target)
        if device.action is FenceAction.REBOOT:
            if state in (Power.RUNNING, Power.REBOOTING):
                sim.set_node_power(target, Power.REBOOTING)
        elif state in (Power.RUNNING, Power.REBOOTING):
            sim.set_node_power(target, Power.POWERED_OFF)
        # a pulled cord already counts as off
        finish(FenceResult(True, sim.clock))

    sim.timer(requester, device.latency, shoot, label=f"fence {target}")
