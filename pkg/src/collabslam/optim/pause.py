"""Per-map pause flags used while global optimisation rewrites a map."""

from __future__ import annotations

import threading
from collections import Counter
from typing import Callable, Iterable


class PauseGuard:
    def __init__(self, registry: "PauseRegistry", map_ids: tuple):
        self._registry = registry
        self.map_ids = map_ids
        self.released = False

    def release(self) -> None:
        if not self.released:
            self.released = True
            self._registry._release(self.map_ids)

    def __enter__(self) -> "PauseGuard":
        return self

    def __exit__(self, *exc) -> None:
        self.release()


class PauseRegistry:
    """Reference-counted pause flags; ``on_resume`` fires when a map's count drops to 0."""

    def __init__(self, on_resume: Callable[[int], None] | None = None):
        self._lock = threading.Lock()
        self._counts: Counter = Counter()
        self.on_resume = on_resume

    def is_paused(self, map_id: int) -> bool:
        with self._lock:
            return self._counts[map_id] > 0

    def paused_maps(self) -> set:
        with self._lock:
            return {m for m, c in self._counts.items() if c > 0}

    def pause_scope(self, map_ids: Iterable[int]) -> PauseGuard:
        ids = tuple(sorted(set(map_ids)))
        with self._lock:
            for m in ids:
                self._counts[m] += 1
        return PauseGuard(self, ids)

    def _release(self, ids: tuple) -> None:
        resumed = []
        with self._lock:
            for m in ids:
                self._counts[m] -= 1
                if self._counts[m] <= 0:
                    del self._counts[m]
                    resumed.append(m)
        if self.on_resume is not None:
            for m in resumed:
                self.on_resume(m)
