"""Wall-clock vs. simulated time.

Seeded runs substitute SimClock so timestamps and latencies embedded in run
state are reproducible byte-for-byte; unseeded runs use real time.
"""

from __future__ import annotations

import time


class WallClock:
    def now(self) -> float:
        return time.time()


class SimClock:
    """Deterministic clock: each reading advances by a fixed tick.

    Not shared across worker threads; give each worker its own instance so
    thread interleaving cannot change the values a worker observes.
    """

    def __init__(self, start: float = 0.0, tick: float = 0.001):
        self._t = start
        self._tick = tick

    def now(self) -> float:
        self._t = round(self._t + self._tick, 9)
        return self._t
