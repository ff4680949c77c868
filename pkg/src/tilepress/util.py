"""Small shared helpers: timestamps, durations, digests, logging."""

from __future__ import annotations

import logging
import re
from datetime import datetime, timezone

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF

_DURATION_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(ms|s|m|h|d)?\s*$")
_DURATION_UNITS = {"ms": 0.001, "s": 1.0, "m": 60.0, "h": 3600.0, "d": 86400.0}


def fnv1a64(data: bytes) -> str:
    """64-bit FNV-1a digest of ``data``, as 16 lowercase hex chars.

    Used for content corruption detection, not cryptography.
    """
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _U64
    return f"{h:016x}"


def rfc3339_ms(epoch_seconds: float) -> str:
    """Format epoch seconds as RFC 3339 UTC with exactly millisecond precision."""
    millis = round(epoch_seconds * 1000.0)
    dt = datetime.fromtimestamp(millis / 1000.0, tz=timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%S.") + f"{millis % 1000:03d}Z"


def parse_rfc3339(text: str) -> float:
    """Parse an RFC 3339 UTC timestamp back to epoch seconds."""
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    return datetime.fromisoformat(text).timestamp()


def parse_duration(text: str | float | int) -> float:
    """Parse a duration like ``"10s"``, ``"500ms"``, ``"2m"`` into seconds.

    Bare numbers are taken as seconds.
    """
    if isinstance(text, (int, float)):
        return float(text)
    m = _DURATION_RE.match(text)
    if not m:
        raise ValueError(f"unparseable duration: {text!r}")
    value, unit = m.groups()
    return float(value) * _DURATION_UNITS[unit or "s"]


def configure_logging(level: int = logging.INFO) -> None:
    """Route all pipeline services to one shared, structured log stream."""
    handler = logging.StreamHandler()
    handler.setFormatter(
        logging.Formatter("%(asctime)s %(levelname)s %(name)s %(message)s")
    )
    root = logging.getLogger("tilepress")
    root.handlers[:] = [handler]
    root.setLevel(level)
