"""Duration and byte-rate literals used by every config format."""

from __future__ import annotations

import re

_DURATION = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(ms|s|sec|m|min|h)?\s*$", re.IGNORECASE)
_SCALE_MS = {"ms": 1, "s": 1000, "sec": 1000, "m": 60_000, "min": 60_000, "h": 3_600_000}

_RATE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([KMG]?)(?:i?B)?(?:/s)?\s*$", re.IGNORECASE)
_SCALE_BYTES = {"": 1, "K": 1024, "M": 1024 ** 2, "G": 1024 ** 3}


def parse_duration(text: str, default_unit: str = "s") -> int:
    """'10s' -> 10000, '500ms' -> 500, bare numbers take `default_unit`."""
    m = _DURATION.match(str(text))
    if not m:
        raise ValueError(f"bad duration {text!r}")
    unit = (m.group(2) or default_unit).lower()
    value = float(m.group(1)) * _SCALE_MS[unit]
    if value != int(value):
        raise ValueError(f"duration {text!r} is not a whole number of milliseconds")
    return int(value)


def parse_rate(text: str, default_suffix: str = "K") -> int:
    """DRBD-style rate: '10M' -> 10 MiB/s in bytes.  Bare numbers are KiB/s."""
    m = _RATE.match(str(text))
    if not m:
        raise ValueError(f"bad rate {text!r}")
    suffix = m.group(2).upper() if m.group(2) else default_suffix
    return int(float(m.group(1)) * _SCALE_BYTES[suffix])


def format_ms(ms: int) -> str:
    if ms % 1000 == 0:
        return f"{ms // 1000}s"
    return f"{ms}ms"
