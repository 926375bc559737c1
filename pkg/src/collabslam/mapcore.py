"""Keyframes, landmarks and maps with globally unique element ids.

Keyframe observation lists are the source of truth for keyframe/landmark
links; ``Landmark.observing_keyframes`` mirrors them.  Observations that name a
landmark not yet present are parked in ``MapRecord.pending`` and linked when
the landmark arrives.
"""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import IdCollision, MapMismatch
from .geom import Pose, compose
from .grid import GridIndex
from .optim.pgo import Edge

SERVER_CLIENT_ID = 0xFFFFFFFF


class ElementId(NamedTuple):
    client_id: int
    session_id: int
    local_seq: int

    def __str__(self) -> str:
        return f"{self.client_id}:{self.session_id}:{self.local_seq}"


NULL_ID = ElementId(0, 0, 0)


class Observation(NamedTuple):
    landmark_id: ElementId
    u: float
    v: float
    depth: float  # -1 for bearing-only


class IdGenerator:
    """One counter per (client, session), shared by keyframes and landmarks.

    Sharing the counter keeps ids unique across element kinds while still
    strictly increasing per kind.
    """

    def __init__(self, client_id: int, session_id: int, start: int = 1):
        self.client_id = client_id
        self.session_id = session_id
        self._seq = itertools.count(start)

    def next(self) -> ElementId:
        return ElementId(self.client_id, self.session_id, next(self._seq))


@dataclass
class Keyframe:
    id: ElementId
    timestamp: float
    pose: Pose  # world_from_cam in its map's frame
    camera_id: int = 0
    observations: list = field(default_factory=list)
    signature: frozenset = frozenset()  # world-feature tags as u64 ints
    map_id: int = 0
    is_virtual: bool = False

    def copy(self) -> "Keyframe":
        return dataclasses.replace(self, observations=list(self.observations))

    def landmark_ids(self) -> list:
        return [o.landmark_id for o in self.observations]


@dataclass
class Landmark:
    id: ElementId
    position: np.ndarray
    descriptor: bytes = bytes(32)
    observing_keyframes: set = field(default_factory=set)
    last_updated_by: int = 0
    map_id: int = 0
    version: int = 0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)

    def copy(self) -> "Landmark":
        return dataclasses.replace(
            self, position=self.position.copy(), observing_keyframes=set(self.observing_keyframes)
        )


@dataclass
class MapRecord:
    map_id: int
    keyframes: dict = field(default_factory=dict)  # ElementId -> Keyframe
    landmarks: dict = field(default_factory=dict)  # ElementId -> Landmark
    grid: GridIndex | None = field(default_factory=GridIndex)
    origin_note: Pose = field(default_factory=Pose.identity)
    pending: dict = field(default_factory=dict)  # landmark id -> set of keyframe ids
    edges: list = field(default_factory=list)  # loop / rigid / virtual-odometry constraints

    def __len__(self) -> int:
        return len(self.keyframes)

    def is_empty(self) -> bool:
        return not self.keyframes and not self.landmarks

    def real_keyframes(self):
        return [kf for kf in self.keyframes.values() if not kf.is_virtual]


# ---------------------------------------------------------------------------
# link maintenance
# ---------------------------------------------------------------------------


def _link(m: MapRecord, kf_id: ElementId, lid: ElementId) -> None:
    lm = m.landmarks.get(lid)
    if lm is None:
        m.pending.setdefault(lid, set()).add(kf_id)
    else:
        lm.observing_keyframes.add(kf_id)


def _unlink(m: MapRecord, kf_id: ElementId, lid: ElementId) -> None:
    lm = m.landmarks.get(lid)
    if lm is not None:
        lm.observing_keyframes.discard(kf_id)
    waiting = m.pending.get(lid)
    if waiting is not None:
        waiting.discard(kf_id)
        if not waiting:
            del m.pending[lid]


def upsert_keyframe(m: MapRecord, kf: Keyframe, full: bool = True) -> str:
    """Insert or update a keyframe; returns ``"inserted"`` or ``"updated"``.

    A pose-only update (``full=False``) keeps the stored observations and
    signature.
    """
    if kf.map_id != m.map_id:
        raise MapMismatch(f"keyframe {kf.id} has map {kf.map_id}, map is {m.map_id}")
    cur = m.keyframes.get(kf.id)
    if cur is None:
        new = kf.copy()
        if not full:
            new.observations = []
        m.keyframes[kf.id] = new
        for obs in new.observations:
            _link(m, new.id, obs.landmark_id)
        return "inserted"
    cur.pose = kf.pose
    cur.timestamp = kf.timestamp
    if full:
        old = set(cur.landmark_ids())
        cur.observations = list(kf.observations)
        cur.signature = kf.signature
        cur.camera_id = kf.camera_id
        new = set(cur.landmark_ids())
        for lid in old - new:
            _unlink(m, cur.id, lid)
        for lid in new - old:
            _link(m, cur.id, lid)
    return "updated"


def upsert_landmark(m: MapRecord, lm: Landmark) -> str:
    if lm.map_id != m.map_id:
        raise MapMismatch(f"landmark {lm.id} has map {lm.map_id}, map is {m.map_id}")
    cur = m.landmarks.get(lm.id)
    if cur is None:
        cur = Landmark(
            id=lm.id,
            position=lm.position.copy(),
            descriptor=lm.descriptor,
            last_updated_by=lm.last_updated_by,
            map_id=m.map_id,
        )
        m.landmarks[lm.id] = cur
        waiting = m.pending.pop(lm.id, None)
        if waiting:
            cur.observing_keyframes |= {k for k in waiting if k in m.keyframes}
        status = "inserted"
    else:
        cur.position = lm.position.copy()
        cur.descriptor = lm.descriptor
        cur.last_updated_by = lm.last_updated_by
        cur.version += 1
        status = "updated"
    if m.grid is not None:
        m.grid.insert_or_move(cur.id, cur.position)
    return status


def prune(m: MapRecord, ids) -> int:
    """Remove keyframes/landmarks by id and clean links on both sides."""
    removed = 0
    for eid in ids:
        kf = m.keyframes.pop(eid, None)
        if kf is not None:
            for lid in kf.landmark_ids():
                _unlink(m, eid, lid)
            m.edges = [e for e in m.edges if e.a != eid and e.b != eid]
            removed += 1
            continue
        lm = m.landmarks.pop(eid, None)
        if lm is not None:
            for kid in lm.observing_keyframes:
                k = m.keyframes.get(kid)
                if k is not None:
                    k.observations = [o for o in k.observations if o.landmark_id != eid]
            if m.grid is not None:
                m.grid.remove(eid)
            removed += 1
            continue
        if eid in m.pending:
            # forget parked observations of a landmark that will never arrive
            for kid in m.pending.pop(eid):
                k = m.keyframes.get(kid)
                if k is not None:
                    k.observations = [o for o in k.observations if o.landmark_id != eid]
    return removed


def transplant(src: MapRecord, dst: MapRecord, dst_from_src: Pose) -> None:
    """Move every element of ``src`` into ``dst``, re-expressed in ``dst``'s frame."""
    if src.map_id == dst.map_id:
        raise ValueError("cannot transplant a map into itself")
    clash = (src.keyframes.keys() & dst.keyframes.keys()) | (src.landmarks.keys() & dst.landmarks.keys())
    if clash:
        raise IdCollision(f"ids present in both maps: {sorted(clash)[:3]}")
    for kid, kf in src.keyframes.items():
        kf.pose = compose(dst_from_src, kf.pose)
        kf.map_id = dst.map_id
        dst.keyframes[kid] = kf
    for lid, lm in src.landmarks.items():
        lm.position = dst_from_src.act(lm.position)
        lm.map_id = dst.map_id
        lm.version += 1
        dst.landmarks[lid] = lm
        if dst.grid is not None:
            dst.grid.insert_or_move(lid, lm.position)
    for lid, waiting in src.pending.items():
        dst.pending.setdefault(lid, set()).update(waiting)
    # an observation parked in one map may name a landmark of the other
    for lid in [l for l in dst.pending if l in dst.landmarks]:
        dst.landmarks[lid].observing_keyframes |= {k for k in dst.pending.pop(lid) if k in dst.keyframes}
    dst.edges.extend(src.edges)
    src.keyframes = {}
    src.landmarks = {}
    src.pending = {}
    src.edges = []
    if src.grid is not None:
        src.grid = GridIndex(src.grid.cell_size)


def audit(m: MapRecord) -> list[str]:
    """Referential-integrity and index problems; an empty list means healthy."""
    problems = []
    for kid, kf in m.keyframes.items():
        if kf.id != kid:
            problems.append(f"keyframe key {kid} != id {kf.id}")
        if kf.map_id != m.map_id:
            problems.append(f"keyframe {kid} map_id {kf.map_id} != {m.map_id}")
        if kf.is_virtual and (kf.observations or kf.signature):
            problems.append(f"virtual keyframe {kid} carries observations")
        if abs(np.linalg.norm(kf.pose.q) - 1.0) > 1e-9:
            problems.append(f"keyframe {kid} quaternion not unit")
        for obs in kf.observations:
            lid = obs.landmark_id
            lm = m.landmarks.get(lid)
            if lm is None:
                if kid not in m.pending.get(lid, ()):
                    problems.append(f"keyframe {kid} observes missing landmark {lid} (not pending)")
            elif kid not in lm.observing_keyframes:
                problems.append(f"landmark {lid} lacks back-reference to {kid}")
    for lid, lm in m.landmarks.items():
        if lm.id != lid:
            problems.append(f"landmark key {lid} != id {lm.id}")
        if lm.map_id != m.map_id:
            problems.append(f"landmark {lid} map_id {lm.map_id} != {m.map_id}")
        if not np.all(np.isfinite(lm.position)):
            problems.append(f"landmark {lid} position not finite")
        for kid in lm.observing_keyframes:
            kf = m.keyframes.get(kid)
            if kf is None:
                problems.append(f"landmark {lid} references missing keyframe {kid}")
            elif lid not in kf.landmark_ids():
                problems.append(f"landmark {lid} lists {kid} which does not observe it")
    for lid in m.pending:
        if lid in m.landmarks:
            problems.append(f"pending entry for present landmark {lid}")
    for e in m.edges:
        if e.a not in m.keyframes or e.b not in m.keyframes:
            problems.append(f"edge {e.kind} {e.a}->{e.b} has a missing endpoint")
    if m.grid is not None:
        problems += m.grid.audit({lid: lm.position for lid, lm in m.landmarks.items()})
    return problems
