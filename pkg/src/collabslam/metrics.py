"""Run metrics: trajectory error, per-procedure timing, link bandwidth."""

from __future__ import annotations

import threading
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import TooFewAssociations
from .geom import align_point_sets

TIMING_CATEGORIES = (
    "tracking",
    "local mapping",
    "sending map updates",
    "updating global map",
    "retrieving nearby landmarks",
    "map merging",
    "pose graph optimization",
)


class Timings:
    """Thread-safe duration collector keyed by procedure name."""

    def __init__(self):
        self._lock = threading.Lock()
        self.samples: dict[str, list] = defaultdict(list)

    def record(self, category: str, seconds: float) -> None:
        if category not in TIMING_CATEGORIES:
            raise KeyError(category)
        with self._lock:
            self.samples[category].append(seconds)

    @contextmanager
    def timed(self, category: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.record(category, time.perf_counter() - t0)

    def merge(self, other: "Timings") -> None:
        with self._lock:
            for k, v in other.samples.items():
                self.samples[k].extend(v)

    def summary(self) -> dict:
        out = {}
        for cat in TIMING_CATEGORIES:
            s = np.asarray(self.samples.get(cat, []), dtype=float) * 1e3
            out[cat] = {
                "count": int(s.size),
                "mean_ms": float(s.mean()) if s.size else None,
                "std_ms": float(s.std()) if s.size else None,
                "max_ms": float(s.max()) if s.size else None,
            }
        return out


@dataclass
class LinkRecord:
    time: float
    link: str  # "client:<id>"
    direction: str  # "up" | "down"
    nbytes: int
    msg_type: int
    retransmit: bool


@dataclass
class BandwidthMeter:
    records: list = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, t: float, link: str, direction: str, frame: bytes, msg_type: int, retransmit: bool = False):
        with self._lock:
            self.records.append(LinkRecord(t, link, direction, len(frame), int(msg_type), retransmit))

    def total(self, direction: str | None = None, msg_type: int | None = None, first_only: bool = True,
              link: str | None = None) -> int:
        return sum(
            r.nbytes
            for r in self.records
            if (direction is None or r.direction == direction)
            and (msg_type is None or r.msg_type == msg_type)
            and (link is None or r.link == link)
            and not (first_only and r.retransmit)
        )

    def timeline(self, bin_s: float = 1.0) -> list[dict]:
        """Bytes per (link, direction) per time bin: rows for the bandwidth plot."""
        acc: dict = defaultdict(int)
        for r in self.records:
            acc[(r.link, r.direction, int(r.time // bin_s))] += r.nbytes
        return [
            {"link": l, "direction": d, "t": b * bin_s, "bytes": n}
            for (l, d, b), n in sorted(acc.items())
        ]


def associate(est_t, truth_t, max_dt: float = 0.01):
    """Nearest-timestamp pairs (i, j) with |dt| <= max_dt, one-to-one in time order."""
    est_t = np.asarray(est_t, float)
    truth_t = np.asarray(truth_t, float)
    order = np.argsort(truth_t)
    ts = truth_t[order]
    pairs = []
    used = set()
    for i, t in enumerate(est_t):
        k = int(np.searchsorted(ts, t))
        best = None
        for c in (k - 1, k):
            if 0 <= c < len(ts) and abs(ts[c] - t) <= max_dt and (best is None or abs(ts[c] - t) < abs(ts[best] - t)):
                best = c
        if best is not None and order[best] not in used:
            used.add(order[best])
            pairs.append((i, int(order[best])))
    return pairs


def compute_ate(est_t, est_xyz, truth_t, truth_xyz, with_scale: bool = False, max_dt: float = 0.01) -> float:
    """Translation RMSE after aligning the estimate onto the truth."""
    pairs = associate(est_t, truth_t, max_dt)
    if len(pairs) < 3:
        raise TooFewAssociations(f"{len(pairs)} associated poses, need 3")
    est = np.asarray(est_xyz, float)[[i for i, _ in pairs]]
    gt = np.asarray(truth_xyz, float)[[j for _, j in pairs]]
    _, _, rms = align_point_sets(est, gt, with_scale=with_scale)
    return rms
