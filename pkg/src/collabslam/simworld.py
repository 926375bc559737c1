"""Synthetic test bed: landmark world, ground-robot trajectories, camera frames, lossy links.

Every random draw comes from a generator seeded by the scenario seed plus a
stable stream key, so a scenario replays bit-identically.  Frames handed to
clients never carry the true pose; it travels in a separate ``TruthSample``
that only the evaluation code reads.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .geom import CameraIntrinsics, Pose, compose, inverse, project_many, se3_exp
from .protocol import UNSEQUENCED, peek_header

DESCRIPTOR_BYTES = 32


def stream_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in key]])


# ---------------------------------------------------------------------------
# world
# ---------------------------------------------------------------------------


@dataclass
class WorldModel:
    tags: np.ndarray  # (n,) uint64, unique
    positions: np.ndarray  # (n, 3)
    descriptors: np.ndarray  # (n, 32) uint8
    bounds: tuple = ((0.0, 0.0), (0.0, 0.0))
    seed: int = 0

    def __len__(self) -> int:
        return len(self.tags)

    def descriptor(self, i: int) -> bytes:
        return self.descriptors[i].tobytes()


def generate_world(
    bounds=((0.0, 0.0), (50.0, 30.0)),
    count: int = 3000,
    seed: int = 0,
    height=(0.2, 3.0),
    regions=None,
) -> WorldModel:
    """Uniform landmarks over ``bounds`` (or over each ``(lo, hi, count)`` region)."""
    rng = stream_rng(seed, 0)
    parts = regions if regions is not None else [(bounds[0], bounds[1], count)]
    pos = []
    for lo, hi, n in parts:
        xy = rng.uniform(lo, hi, size=(int(n), 2))
        z = rng.uniform(height[0], height[1], size=(int(n), 1))
        pos.append(np.hstack([xy, z]))
    positions = np.vstack(pos) if pos else np.zeros((0, 3))
    n = len(positions)
    tags = np.unique(rng.integers(1, 2**63, size=n + 16, dtype=np.uint64))
    while len(tags) < n:  # pragma: no cover - 63-bit collisions
        tags = np.unique(np.concatenate([tags, rng.integers(1, 2**63, size=n, dtype=np.uint64)]))
    tags = rng.permutation(tags)[:n]
    desc = rng.integers(0, 256, size=(n, DESCRIPTOR_BYTES), dtype=np.uint8)
    if regions is not None:
        lo = np.min([r[0] for r in regions], axis=0)
        hi = np.max([r[1] for r in regions], axis=0)
        bounds = (tuple(lo), tuple(hi))
    return WorldModel(tags, positions, desc, bounds, seed)


# ---------------------------------------------------------------------------
# trajectories and cameras
# ---------------------------------------------------------------------------


def _wrap(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


@dataclass
class Trajectory:
    """Piecewise-linear ground path at constant speed; heading follows travel.

    Around each interior waypoint the heading turns at a constant rate over
    ``corner_blend`` seconds, centred on the waypoint.
    """

    waypoints: list
    speed: float = 1.0
    corner_blend: float = 0.5
    start_time: float = 0.0

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=np.float64).reshape(-1, 2)
        if len(w) < 2:
            raise ValueError("need at least two waypoints")
        seg = np.diff(w, axis=0)
        lengths = np.linalg.norm(seg, axis=1)
        if np.any(lengths <= 1e-9):
            raise ValueError("consecutive waypoints must differ")
        if self.speed <= 0:
            raise ValueError("speed must be positive")
        self._w = w
        self._len = lengths
        self._heading = np.arctan2(seg[:, 1], seg[:, 0])
        self._t = self.start_time + np.concatenate([[0.0], np.cumsum(lengths)]) / self.speed

    @property
    def end_time(self) -> float:
        return float(self._t[-1])

    @property
    def length(self) -> float:
        return float(self._len.sum())

    def _yaw(self, t: float, i: int) -> float:
        half = self.corner_blend / 2
        if i > 0 and t - self._t[i] < half:
            a, b, tc = self._heading[i - 1], self._heading[i], self._t[i]
        elif i + 1 < len(self._heading) and self._t[i + 1] - t < half:
            a, b, tc = self._heading[i], self._heading[i + 1], self._t[i + 1]
        else:
            return float(self._heading[i])
        if half <= 0:
            return float(self._heading[i])
        alpha = (t - (tc - half)) / self.corner_blend
        return float(a + alpha * _wrap(b - a))

    def base_pose(self, t: float) -> Pose:
        t = min(max(t, self._t[0]), self._t[-1])
        i = int(np.clip(np.searchsorted(self._t, t, side="right") - 1, 0, len(self._len) - 1))
        frac = (t - self._t[i]) * self.speed / self._len[i]
        xy = self._w[i] + frac * (self._w[i + 1] - self._w[i])
        return Pose.from_yaw(self._yaw(t, i), [xy[0], xy[1], 0.0])


def _mount(forward, right, t) -> Pose:
    fwd = np.asarray(forward, float)
    rgt = np.asarray(right, float)
    down = np.cross(fwd, rgt)
    return Pose.from_rt(np.column_stack([rgt, down, fwd]), t)


FRONT_MOUNT = _mount([1, 0, 0], [0, -1, 0], [0.2, 0.0, 1.0])
REAR_MOUNT = _mount([-1, 0, 0], [0, 1, 0], [-0.2, 0.0, 1.0])

DEPTH_INTRINSICS = CameraIntrinsics(400.0, 400.0, 320.0, 240.0, 640, 480, 0.3, 10.0)
# features beyond 10 m are too small to detect reliably, depth sensor or not
MONO_INTRINSICS = CameraIntrinsics(400.0, 400.0, 320.0, 240.0, 640, 480, 0.3, 10.0)


@dataclass
class NoiseModel:
    pixel_sigma: float = 0.0
    depth_sigma_frac: float = 0.0
    dropout: float = 0.0
    signature_dropout: float = 0.0
    odom_sigma_t: float = 0.0  # m per frame
    odom_sigma_r: float = 0.0  # rad per frame
    descriptor_bit_flips: int = 0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"noise parameter {k} must be >= 0")


@dataclass
class FrameObservation:
    timestamp: float
    camera_id: int
    uv: np.ndarray  # (n, 2)
    depth: np.ndarray  # (n,), -1 for bearing-only
    descriptors: list  # n x 32-byte
    tags: np.ndarray  # (n,) uint64
    signature: frozenset
    odometry: Pose | None = None  # base motion since this camera's previous frame

    def __len__(self) -> int:
        return len(self.depth)


@dataclass
class TruthSample:
    timestamp: float
    world_from_cam: Pose
    world_from_base: Pose


def visible(world: WorldModel, k: CameraIntrinsics, world_from_cam: Pose):
    """Indices and exact (uv, depth) of world landmarks passing :func:`project`."""
    if len(world) == 0:
        return np.zeros(0, dtype=int), np.zeros((0, 2)), np.zeros(0)
    mask, uv, z = project_many(k, inverse(world_from_cam), world.positions)
    idx = np.nonzero(mask)[0]
    return idx, uv[idx], z[idx]


def observe(
    world: WorldModel,
    world_from_cam: Pose,
    k: CameraIntrinsics,
    noise: NoiseModel,
    rng: np.random.Generator,
    timestamp: float = 0.0,
    camera_id: int = 0,
    monocular: bool = False,
    blind: bool = False,
) -> FrameObservation:
    idx, uv, z = visible(world, k, world_from_cam)
    if blind:
        idx = idx[:0]
        uv, z = uv[:0], z[:0]
    n = len(idx)
    # fixed draw order keeps streams aligned regardless of noise settings
    keep = rng.random(n) >= noise.dropout
    pix = rng.normal(size=(n, 2))
    dn = rng.normal(size=n)
    sig_keep = rng.random(n) >= noise.signature_dropout
    idx, uv, z = idx[keep], uv[keep] + noise.pixel_sigma * pix[keep], z[keep]
    depth = -np.ones(len(idx)) if monocular else z * (1.0 + noise.depth_sigma_frac * dn[keep])
    desc = world.descriptors[idx]
    if noise.descriptor_bit_flips and len(idx):
        desc = desc.copy()
        bits = rng.integers(0, 8 * DESCRIPTOR_BYTES, size=(len(idx), noise.descriptor_bit_flips))
        for r, row in enumerate(bits):
            for b in row:
                desc[r, b // 8] ^= np.uint8(1 << (b % 8))
    tags = world.tags[idx]
    signature = frozenset(int(t) for t in tags[sig_keep[keep]])
    return FrameObservation(
        timestamp, camera_id, uv, depth, [d.tobytes() for d in desc], tags, signature
    )


@dataclass
class CameraRig:
    camera_id: int
    base_from_cam: Pose = field(default_factory=lambda: FRONT_MOUNT)
    intrinsics: CameraIntrinsics = DEPTH_INTRINSICS
    monocular: bool = False
    rate_hz: float = 10.0
    time_offset: float = 0.0
    blind: list = field(default_factory=list)  # [(t0, t1), ...]

    def is_blind(self, t: float) -> bool:
        return any(a <= t < b for a, b in self.blind)


def frame_stream(world: WorldModel, traj: Trajectory, rig: CameraRig, noise: NoiseModel, seed: int,
                 stream_key: int = 0, t_end: float | None = None):
    """Yield ``(FrameObservation, TruthSample)`` for one camera along ``traj``."""
    rng = stream_rng(seed, 1, stream_key)
    odo_rng = stream_rng(seed, 2, stream_key)
    t = traj.start_time + rig.time_offset
    stop = traj.end_time if t_end is None else min(t_end, traj.end_time)
    prev_base = None
    step = 1.0 / rig.rate_hz
    while t <= stop + 1e-9:
        base = traj.base_pose(t)
        cam = compose(base, rig.base_from_cam)
        f = observe(world, cam, rig.intrinsics, noise, rng, t, rig.camera_id, rig.monocular, rig.is_blind(t))
        if prev_base is not None:
            delta = compose(inverse(prev_base), base)
            xi = np.concatenate([odo_rng.normal(scale=noise.odom_sigma_t, size=3),
                                 odo_rng.normal(scale=noise.odom_sigma_r, size=3)])
            f.odometry = compose(delta, se3_exp(xi))
        prev_base = base
        yield f, TruthSample(t, cam, base)
        t = round(t + step, 9)


# ---------------------------------------------------------------------------
# scripted network
# ---------------------------------------------------------------------------


class ScriptedChannel:
    """One-directional link with a deterministic drop / delay schedule.

    ``drop_seqs`` drops the first transmission of those sequenced frames;
    ``loss`` drops any frame (retransmissions and control frames included)
    with that probability.  Latency is drawn uniformly from ``latency``
    (logical seconds); equal due times preserve send order.
    """

    def __init__(self, loss: float = 0.0, drop_seqs=(), latency=(0.0, 0.0), seed: int = 0):
        if not 0.0 <= loss < 1.0:
            raise ValueError("loss must be in [0, 1)")
        self.loss = loss
        self.drop_seqs = set(drop_seqs)
        self._dropped_once: set = set()
        self.latency = latency
        self.rng = stream_rng(seed, 3)
        self._heap: list = []
        self._n = 0
        self.sent = 0
        self.dropped = 0
        self.dropped_seqs: list = []

    def send(self, frame: bytes, now: float = 0.0) -> bool:
        self.sent += 1
        mtype, _, _, seq = peek_header(frame)
        drop = False
        if mtype not in UNSEQUENCED and seq in self.drop_seqs and seq not in self._dropped_once:
            self._dropped_once.add(seq)
            drop = True
        # always draw so the schedule does not depend on the scripted drops
        u = self.rng.random()
        lat = self.rng.uniform(*self.latency) if self.latency[1] > 0 else 0.0
        if u < self.loss:
            drop = True
        if drop:
            self.dropped += 1
            if mtype not in UNSEQUENCED:
                self.dropped_seqs.append(seq)
            return False
        heapq.heappush(self._heap, (now + lat, self._n, frame))
        self._n += 1
        return True

    def receive(self, now: float | None = None) -> list[bytes]:
        out = []
        while self._heap and (now is None or self._heap[0][0] <= now):
            out.append(heapq.heappop(self._heap)[2])
        return out

    def __len__(self) -> int:
        return len(self._heap)
