"""Injectable time source.

Every service takes a clock at construction so expiry behaviour is
deterministic under test. Timestamps are float epoch seconds throughout.
"""

from __future__ import annotations

import threading
import time
from typing import Protocol


class Clock(Protocol):
    def now(self) -> float: ...


class SystemClock:
    """Wall clock, for running the services for real."""

    def now(self) -> float:
        return time.time()


class VirtualClock:
    """Manually advanced clock shared by every module in a harness run.

    Never moves backwards; `advance` with a negative delta is rejected.
    """

    def __init__(self, start: float = 1_750_000_000.0):
        self._now = float(start)
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._now

    def advance(self, seconds: float) -> float:
        if seconds < 0:
            raise ValueError("virtual clock cannot move backwards")
        with self._lock:
            self._now += seconds
            return self._now

    def set_to(self, timestamp: float) -> float:
        with self._lock:
            if timestamp < self._now:
                raise ValueError("virtual clock cannot move backwards")
            self._now = float(timestamp)
            return self._now
