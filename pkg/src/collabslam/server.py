"""Edge server: map database, per-client handlers, loop closing, merging, rigid links.

Message flow
    frame -> Endpoint (ordering, resend) -> handler -> map database
    new keyframe ids -> shared queue -> ``tick()`` (loop detection, rigid
    links, merges, pose-graph optimisation)

Global jobs pause the maps they touch.  Handler messages for a paused map go
to a backlog; when the job finishes the backlog is applied, a LOCAL_REFRESH
is pushed, and a correction epoch is recorded for the handler.  Any later
MAP_UPDATE whose piggybacked ack predates the refresh was produced in the
client's old frame and is corrected on arrival.
"""

from __future__ import annotations

import bisect
import logging
import math
import threading
from collections import OrderedDict, defaultdict, deque
from dataclasses import dataclass, field

import numpy as np

from . import protocol as P
from .errors import DecodeError, IdCollision, MapError, NoBracket, NotConnectedToGauge, ProtocolError
from .geom import CameraIntrinsics, Pose, align_point_sets, compose, interpolate, inverse, relative
from .grid import GridIndex, retrieve_in_view
from .mapcore import (
    SERVER_CLIENT_ID,
    ElementId,
    IdGenerator,
    Keyframe,
    Landmark,
    MapRecord,
    audit,
    prune,
    transplant,
    upsert_keyframe,
    upsert_landmark,
)
from .metrics import Timings
from .optim import PoseGraph, optimize_pose, optimize_pose_graph
from .optim.ba import RobustParams
from .optim.pause import PauseRegistry
from .optim.pgo import Edge, KIND_WEIGHTS
from .transport import Endpoint

log = logging.getLogger(__name__)


@dataclass
class RigidPair:
    client_a: int
    client_b: int
    b_from_a: Pose  # camera b from camera a
    max_translation: float = 0.05
    max_rotation_deg: float = 2.0


@dataclass
class ServerConfig:
    cell_size: float = 2.0
    loop_min_score: float = 0.30
    loop_top_k: int = 3
    loop_exclude_recent: int = 30
    connected_shared: int = 10
    ransac_iters: int = 200
    ransac_radius: float = 0.10
    min_inliers: int = 12
    max_rms: float = 0.10
    loop_max_translation: float = 0.05
    loop_max_rotation_deg: float = 2.0
    rigid_pairs: list = field(default_factory=list)
    bracket_s: float = 2.0
    rigid_hysteresis: int = 10
    exclusion: bool = True
    pause_ticks: int = 0
    pgo_iters: int = 20
    refresh_keyframes: int = 12
    place_rec_min_inliers: int = 12
    place_rec_max_rms: float = 2.0
    window: int = 256


@dataclass
class LoopCandidate:
    query: ElementId
    match: ElementId
    score: float
    transform: Pose  # match-map frame from query-map frame
    inliers: int
    rms: float


@dataclass
class ServerStats:
    frames_in: int = 0
    decode_errors: int = 0
    messages_applied: int = 0
    applied_while_paused: int = 0
    received_while_paused: int = 0
    backlog_applied: int = 0
    merges: int = 0
    pgo_runs: int = 0
    loops_verified: int = 0
    loops_rejected: int = 0
    rigid_edges: int = 0
    exclusion_violations: int = 0
    augment_messages: int = 0
    augment_landmarks: int = 0
    place_rec_success: int = 0
    place_rec_failure: int = 0
    loop_checks: dict = field(default_factory=lambda: defaultdict(int))
    merge_log: list = field(default_factory=list)


class ClientHandler:
    def __init__(self, client_id: int, session_id: int, window: int):
        self.client_id = client_id
        self.session_id = session_id
        self.endpoint = Endpoint(client_id, session_id, window)
        self.io_lock = threading.RLock()
        self.map_id = 0
        self.started = False
        self.retired = False
        self.monocular = False
        self.camera_id = 0
        self.intrinsics: CameraIntrinsics | None = None
        self.base_from_cam = Pose.identity()
        self.last_augment: dict = {}  # landmark id -> version at last AUGMENT round
        self.backlog: list = []
        self.epochs: list = []  # (downlink seq of LOCAL_REFRESH, correction)
        self.recent_kfs: deque = deque()
        self.kf_count = 0
        self.outgoing: deque = deque()

    @property
    def key(self) -> tuple:
        return (self.client_id, self.session_id)

    def correction_for(self, ack: int | None) -> Pose | None:
        ack = ack or 0
        C = None
        for seq, c in self.epochs:
            if seq > ack:
                C = c if C is None else compose(c, C)
        return C


@dataclass
class _Job:
    maps: tuple
    guard: object
    corrections: dict  # handler key -> Pose
    due_tick: int
    kind: str


class Server:
    def __init__(self, cfg: ServerConfig | None = None, timings: Timings | None = None):
        self.cfg = cfg or ServerConfig()
        self.timings = timings or Timings()
        self.maps: dict[int, MapRecord] = {}
        self.handlers: dict[tuple, ClientHandler] = {}
        self.stats = ServerStats()
        self.queue: deque = deque()
        self._queued: set = set()
        self.pause = PauseRegistry()
        self.jobs: list[_Job] = []
        self.tick_count = 0
        self._next_map_id = 1
        self._vids = IdGenerator(SERVER_CLIENT_ID, 1)
        self._kf_map: dict = {}  # keyframe id -> map id
        self._inv: dict = defaultdict(set)  # signature tag -> keyframe ids
        self._sig_len: dict = {}
        self._session_kfs: dict = defaultdict(list)  # (client, session) -> [(timestamp, kf id)]
        self._rigid_pending: dict = defaultdict(list)  # pair index -> [a keyframe id]
        self._rigid_quiet: dict = defaultdict(int)  # pair index -> keyframes left in hysteresis
        self.meta = threading.RLock()
        self._map_locks: dict = defaultdict(threading.RLock)
        self.job_lock = threading.Lock()

    # ------------------------------------------------------------------ helpers

    def _new_map(self) -> MapRecord:
        m = MapRecord(self._next_map_id, grid=GridIndex(self.cfg.cell_size))
        self.maps[m.map_id] = m
        self._next_map_id += 1
        return m

    def non_empty_maps(self) -> list[int]:
        with self.meta:
            return sorted(mid for mid, m in self.maps.items() if not m.is_empty())

    def map_of(self, kid) -> MapRecord | None:
        mid = self._kf_map.get(kid)
        return self.maps.get(mid) if mid is not None else None

    def audit_all(self) -> list[str]:
        out = []
        with self.meta:
            ids = sorted(self.maps)
        for mid in ids:
            with self._map_locks[mid]:
                mp = self.maps.get(mid)
                if mp is not None:
                    out += [f"map {mid}: {p}" for p in audit(mp)]
        return out

    def _handlers_of(self, client_id: int | None, session_id: int | None = None) -> list[ClientHandler]:
        with self.meta:
            return [h for h in self.handlers.values()
                    if (client_id is None or h.client_id == client_id)
                    and (session_id is None or h.session_id == session_id)]

    def take_outgoing(self, client_id: int | None = None) -> list[tuple]:
        """Drain queued downlink frames as ``(client_id, session_id, frame)``."""
        out = []
        for h in self._handlers_of(client_id):
            with h.io_lock:
                while h.outgoing:
                    out.append((h.client_id, h.session_id, h.outgoing.popleft()))
        return out

    def _send(self, h: ClientHandler, m: P.WireMessage) -> int:
        with h.io_lock:
            frame = h.endpoint.send(m)
            h.outgoing.append(frame)
            return m.seq

    # ------------------------------------------------------------------ ingress

    def on_frame(self, frame: bytes) -> None:
        try:
            m = P.decode(frame)
        except DecodeError as exc:
            self.stats.decode_errors += 1
            log.warning("dropping undecodable frame: %s", exc)
            return
        self.stats.frames_in += 1
        with self.meta:
            h = self.handlers.get((m.client_id, m.session_id))
            if h is None:
                h = ClientHandler(m.client_id, m.session_id, self.cfg.window)
                self.handlers[h.key] = h
                # a newer session means the client abandoned the older ones
                for o in self.handlers.values():
                    if o.client_id == m.client_id and o.session_id < m.session_id:
                        o.retired = True
        if h.retired:
            return
        with h.io_lock:
            try:
                delivered, replies = h.endpoint.receive(m)
            except ProtocolError as exc:
                log.error("link %s: %s", h.key, exc)
                return
            h.outgoing.extend(replies)
        for msg in delivered:
            self.handle_message(h, msg)

    def idle(self, client_id: int | None = None, session_id: int | None = None) -> None:
        """Quiet-link housekeeping for live handler endpoints."""
        for h in self._handlers_of(client_id, session_id):
            if not h.retired:
                with h.io_lock:
                    h.outgoing.extend(h.endpoint.idle())

    def settled(self, client_id: int | None = None, session_id: int | None = None) -> bool:
        for h in self._handlers_of(client_id, session_id):
            if not h.retired:
                with h.io_lock:
                    if h.outgoing or not h.endpoint.settled():
                        return False
        return True

    def handle_message(self, h: ClientHandler, m: P.WireMessage) -> None:
        if m.msg_type == P.MsgType.SESSION_START:
            self._start_session(h, m.control)
            return
        if m.msg_type == P.MsgType.PLACE_REC_REQUEST:
            self.place_recognition(h, m)
            return
        if m.msg_type != P.MsgType.MAP_UPDATE:
            return
        while True:
            mid = h.map_id
            with self._map_locks[mid]:
                if h.map_id != mid:
                    continue
                if mid and (self.pause.is_paused(mid) or h.backlog):
                    h.backlog.append(m)
                    self.stats.received_while_paused += 1
                    return
                self._apply_update(h, m)
                return

    def _start_session(self, h: ClientHandler, s: P.SessionStart) -> None:
        with self.meta:
            h.started = True
            h.monocular = s.monocular
            h.camera_id = s.camera_id
            h.intrinsics = s.intrinsics
            h.base_from_cam = s.base_from_cam
            if not s.monocular and not h.map_id:
                h.map_id = self._new_map().map_id
        log.info("session %s started (map %d, mono=%s)", h.key, h.map_id, s.monocular)

    # ------------------------------------------------------------------ map updates

    def _apply_update(self, h: ClientHandler, m: P.WireMessage, from_backlog: bool = False) -> None:
        mp = self.maps.get(h.map_id)
        if mp is None:
            log.warning("update from %s without a map; dropped", h.key)
            return
        if self.pause.is_paused(mp.map_id) and not from_backlog:
            self.stats.applied_while_paused += 1
        C = h.correction_for(m.ack)
        new_kfs = []
        with self.timings.timed("updating global map"):
            for e in m.keyframes:
                pose = e.pose if C is None else compose(C, e.pose)
                kf = Keyframe(e.id, e.timestamp, pose, e.camera_id, list(e.observations),
                              frozenset(e.signature), mp.map_id, e.is_virtual)
                other = self.map_of(e.id)
                if other is not None and other.map_id != mp.map_id:
                    log.error("keyframe %s already lives in map %d", e.id, other.map_id)
                    continue
                try:
                    status = upsert_keyframe(mp, kf, full=e.full)
                except MapError as exc:
                    log.error("keyframe %s skipped: %s", e.id, exc)
                    continue
                if status == "inserted":
                    self._kf_map[e.id] = mp.map_id
                    self._session_kfs[(e.id.client_id, e.id.session_id)].append((e.timestamp, e.id))
                    h.kf_count += 1
                    h.recent_kfs.append(e.id)
                    while len(h.recent_kfs) > self.cfg.refresh_keyframes:
                        h.recent_kfs.popleft()
                    if not e.is_virtual and e.id not in self._queued:
                        self._queued.add(e.id)
                        self.queue.append(e.id)
                        new_kfs.append(e.id)
            for e in m.landmarks:
                pos = np.asarray(e.position, float) if C is None else C.act(e.position)
                upsert_landmark(mp, Landmark(e.id, pos, e.descriptor, set(), e.last_updated_by, mp.map_id))
            if m.pruned_ids:
                prune(mp, m.pruned_ids)
                for i in m.pruned_ids:
                    self._kf_map.pop(i, None)
        self.stats.messages_applied += 1
        if from_backlog:
            self.stats.backlog_applied += 1
        if new_kfs:
            self.augment_reply(h, mp.keyframes[new_kfs[-1]])

    # ------------------------------------------------------------------ augmentation

    def augment_reply(self, h: ClientHandler, kf: Keyframe) -> P.WireMessage | None:
        mp = self.maps[h.map_id]
        k = h.intrinsics
        if k is None:
            return None
        with self.timings.timed("retrieving nearby landmarks"):
            seen = retrieve_in_view(mp.grid, mp, k, kf.pose)
        eligible = {}
        out = []
        for lm in sorted(seen, key=lambda l: l.id):
            if self.cfg.exclusion and lm.last_updated_by == h.client_id:
                continue
            eligible[lm.id] = lm.version
            if h.last_augment.get(lm.id) == lm.version:
                continue
            out.append(lm)
        h.last_augment = eligible
        if not out:
            return None
        if self.cfg.exclusion:
            self.stats.exclusion_violations += sum(1 for lm in out if lm.last_updated_by == h.client_id)
        msg = P.WireMessage(
            P.MsgType.AUGMENT,
            map_id=mp.map_id,
            landmarks=[P.LandmarkEntry(lm.id, lm.position.copy(), lm.descriptor, lm.last_updated_by, []) for lm in out],
        )
        self._send(h, msg)
        self.stats.augment_messages += 1
        self.stats.augment_landmarks += len(out)
        return msg

    # ------------------------------------------------------------------ global worker

    def tick(self) -> None:
        """One round of the global-optimisation worker."""
        with self.job_lock:
            self.tick_count += 1
            self._finish_due_jobs()
            deferred = deque()
            while self.queue:
                kid = self.queue.popleft()
                mp = self.map_of(kid)
                if mp is None:
                    continue
                if self.pause.is_paused(mp.map_id):
                    deferred.append(kid)
                    continue
                self._process_keyframe(kid)
                self._finish_due_jobs()
            self.queue.extendleft(reversed(deferred))

    def drain_jobs(self) -> None:
        with self.job_lock:
            for job in list(self.jobs):
                self._finish(job)
            self.jobs.clear()

    def _finish_due_jobs(self) -> None:
        for job in [j for j in self.jobs if j.due_tick <= self.tick_count]:
            self.jobs.remove(job)
            self._finish(job)

    def _process_keyframe(self, kid) -> None:
        self.stats.loop_checks[kid] += 1
        mp = self.map_of(kid)
        kf = mp.keyframes[kid]
        for i, pair in enumerate(self.cfg.rigid_pairs):
            if kid.client_id == pair.client_a:
                self._rigid_pending[i].append(kid)
            if kid.client_id in (pair.client_a, pair.client_b):
                self._retry_rigid(i)
        if self.map_of(kid) is None:
            return
        cand = self.detect_loop(self.map_of(kid).keyframes[kid])
        if cand is not None:
            self.merge_or_optimize(cand)
        self._index_signature(kf)

    def _index_signature(self, kf: Keyframe) -> None:
        if kf.is_virtual or not kf.signature:
            return
        for t in kf.signature:
            self._inv[t].add(kf.id)
        self._sig_len[kf.id] = len(kf.signature)

    # ------------------------------------------------------------------ loop detection

    def _rank(self, signature, exclude=lambda kid: False) -> list:
        counts: dict = defaultdict(int)
        for t in signature:
            for kid in self._inv.get(t, ()):
                counts[kid] += 1
        n = len(signature)
        scored = []
        for kid, c in counts.items():
            if exclude(kid) or kid not in self._kf_map:
                continue
            s = c / (n + self._sig_len[kid] - c)
            if s >= self.cfg.loop_min_score:
                scored.append((s, kid))
        scored.sort(key=lambda x: (-x[0], x[1]))
        return scored[: self.cfg.loop_top_k]

    def _recent_same_session(self, kf: Keyframe) -> set:
        lst = self._session_kfs[(kf.id.client_id, kf.id.session_id)]
        i = bisect.bisect_left([k for _, k in lst], kf.id)
        return {k for _, k in lst[max(0, i - self.cfg.loop_exclude_recent) : i + 1]}

    def detect_loop(self, kf: Keyframe) -> LoopCandidate | None:
        if kf.is_virtual or not kf.signature:
            return None
        recent = self._recent_same_session(kf)
        ranked = self._rank(kf.signature, exclude=lambda k: k == kf.id or k in recent)
        qmap = self.map_of(kf.id)
        qlms = set(kf.landmark_ids())
        for score, cid in ranked:
            cmap = self.map_of(cid)
            ckf = cmap.keyframes[cid]
            if cmap.map_id == qmap.map_id and len(qlms & set(ckf.landmark_ids())) >= self.cfg.connected_shared:
                continue  # already co-observing: nothing to close
            v = self.verify(kf, qmap, ckf, cmap)
            if v is None:
                self.stats.loops_rejected += 1
                continue
            T, n_in, rms = v
            self.stats.loops_verified += 1
            return LoopCandidate(kf.id, cid, score, T, n_in, rms)
        return None

    def _landmark_points(self, kf: Keyframe, mp: MapRecord) -> dict:
        out = {}
        for lid in kf.landmark_ids():
            lm = mp.landmarks.get(lid)
            if lm is not None:
                out.setdefault(lm.descriptor, lm.position)
        return out

    def verify(self, q: Keyframe, qmap: MapRecord, c: Keyframe, cmap: MapRecord):
        """Consensus alignment of commonly described landmarks; (T, inliers, rms) or None."""
        a = self._landmark_points(q, qmap)
        b = self._landmark_points(c, cmap)
        common = sorted(set(a) & set(b))
        if len(common) < self.cfg.min_inliers:
            return None
        src = np.array([a[d] for d in common])
        dst = np.array([b[d] for d in common])
        rng = np.random.default_rng([q.id.client_id, q.id.session_id, q.id.local_seq,
                                     c.id.client_id, c.id.session_id, c.id.local_seq])
        best = None
        r2 = self.cfg.ransac_radius ** 2
        for _ in range(self.cfg.ransac_iters):
            idx = rng.choice(len(common), size=3, replace=False)
            try:
                T, _, _ = align_point_sets(src[idx], dst[idx])
            except Exception:
                continue
            d = dst - T.act(src)
            inl = (d * d).sum(axis=1) <= r2
            if best is None or inl.sum() > best.sum():
                best = inl
        if best is None or best.sum() < self.cfg.min_inliers:
            return None
        try:
            T, _, rms = align_point_sets(src[best], dst[best])
        except Exception:
            return None
        d = dst - T.act(src)
        inl = (d * d).sum(axis=1) <= r2
        if inl.sum() < self.cfg.min_inliers:
            return None
        T, _, rms = align_point_sets(src[inl], dst[inl])
        if rms >= self.cfg.max_rms:
            return None
        return T, int(inl.sum()), rms

    # ------------------------------------------------------------------ merge / optimise

    def merge_or_optimize(self, c: LoopCandidate) -> None:
        qmap, cmap = self.map_of(c.query), self.map_of(c.match)
        Xq = qmap.keyframes[c.query].pose
        Xc = cmap.keyframes[c.match].pose
        measured = compose(inverse(Xc), compose(c.transform, Xq))  # match_from_query
        edge = Edge(c.match, c.query, measured, KIND_WEIGHTS["loop"], "loop")
        if qmap.map_id != cmap.map_id:
            self.merge_maps(qmap.map_id, cmap.map_id, c.transform, [edge], reason="loop")
            return
        dt, da = pose_gap(relative(Xc, Xq), measured)
        if dt <= self.cfg.loop_max_translation and da <= math.radians(self.cfg.loop_max_rotation_deg):
            return
        self.optimize_map(cmap.map_id, [edge], reason="loop")

    def merge_maps(self, map_a: int, map_b: int, b_from_a: Pose, edges: list, reason: str) -> int:
        """Merge two maps given the frame transform between them; returns the surviving map id."""
        ma, mb = self.maps[map_a], self.maps[map_b]
        if (len(mb), -mb.map_id) >= (len(ma), -ma.map_id):
            dst, src, dst_from_src = mb, ma, b_from_a
        else:
            dst, src, dst_from_src = ma, mb, inverse(b_from_a)
        ids = tuple(sorted((dst.map_id, src.map_id)))
        with self.meta:
            guard = self.pause.pause_scope(ids)
        locks = [self._map_locks[i] for i in ids]
        for l in locks:
            l.acquire()
        try:
            before = self._handler_anchor_poses(ids)
            with self.timings.timed("map merging"):
                try:
                    transplant(src, dst, dst_from_src)
                except IdCollision as exc:
                    log.error("merge %d->%d aborted: %s", src.map_id, dst.map_id, exc)
                    guard.release()
                    return dst.map_id
                for kid in list(dst.keyframes):
                    if self._kf_map.get(kid) == src.map_id:
                        self._kf_map[kid] = dst.map_id
                dst.edges.extend(edges)
                with self.meta:
                    for h in self.handlers.values():
                        if h.map_id == src.map_id:
                            h.map_id = dst.map_id
                    del self.maps[src.map_id]
            self._run_pgo(dst)
            corrections = self._handler_corrections(before, dst)
        finally:
            for l in reversed(locks):
                l.release()
        self.stats.merges += 1
        self.stats.merge_log.append((self.tick_count, src.map_id, dst.map_id, reason))
        log.info("merged map %d into %d (%s)", src.map_id, dst.map_id, reason)
        self._schedule(_Job(ids, guard, corrections, self.tick_count + self.cfg.pause_ticks, "merge"))
        return dst.map_id

    def optimize_map(self, map_id: int, edges: list, reason: str) -> None:
        with self.meta:
            guard = self.pause.pause_scope([map_id])
        with self._map_locks[map_id]:
            mp = self.maps[map_id]
            before = self._handler_anchor_poses((map_id,))
            mp.edges.extend(edges)
            self._run_pgo(mp)
            corrections = self._handler_corrections(before, mp)
        log.info("optimised map %d (%s)", map_id, reason)
        self._schedule(_Job((map_id,), guard, corrections, self.tick_count + self.cfg.pause_ticks, "optimize"))

    def _schedule(self, job: _Job) -> None:
        self.jobs.append(job)
        if job.due_tick <= self.tick_count:
            self.jobs.remove(job)
            self._finish(job)

    def _handler_anchor_poses(self, map_ids) -> dict:
        out = {}
        with self.meta:
            hs = [h for h in self.handlers.values() if h.map_id in map_ids]
        for h in hs:
            anchor = h.recent_kfs[-1] if h.recent_kfs else None
            mp = self.maps[h.map_id]
            out[h.key] = (anchor, mp.keyframes[anchor].pose if anchor in mp.keyframes else None, h.map_id)
        return out

    def _handler_corrections(self, before: dict, dst: MapRecord) -> dict:
        out = {}
        for key, (anchor, pose, _) in before.items():
            if anchor is None or pose is None or anchor not in dst.keyframes:
                continue
            out[key] = compose(dst.keyframes[anchor].pose, inverse(pose))
        return out

    def pose_graph(self, mp: MapRecord) -> PoseGraph:
        g = PoseGraph(nodes={k: kf.pose for k, kf in mp.keyframes.items()})
        sessions: dict = defaultdict(list)
        for kf in mp.keyframes.values():
            if not kf.is_virtual:
                sessions[(kf.id.client_id, kf.id.session_id)].append(kf)
        for key in sorted(sessions):
            seq = sorted(sessions[key], key=lambda k: (k.timestamp, k.id))
            for a, b in zip(seq, seq[1:]):
                g.add_edge(a.id, b.id, relative(a.pose, b.pose), kind="odometry")
        g.edges.extend(mp.edges)
        for comp in g.components():
            g.fixed.add(min(comp))
        return g

    def _run_pgo(self, mp: MapRecord) -> None:
        g = self.pose_graph(mp)
        if not g.edges:
            return
        with self.timings.timed("pose graph optimization"):
            try:
                res = optimize_pose_graph(g, max_iters=self.cfg.pgo_iters)
            except NotConnectedToGauge as exc:  # pragma: no cover - fixed per component above
                log.error("pgo skipped: %s", exc)
                return
        self.stats.pgo_runs += 1
        delta = {}
        for k, kf in mp.keyframes.items():
            new = res.poses[k]
            delta[k] = compose(new, inverse(kf.pose))
            kf.pose = new
        for lm in mp.landmarks.values():
            if not lm.observing_keyframes:
                continue
            anchor = min(lm.observing_keyframes)
            lm.position = delta[anchor].act(lm.position)
            lm.version += 1
            mp.grid.insert_or_move(lm.id, lm.position)

    def _finish(self, job: _Job) -> None:
        """Resume the paused maps: backlog in order, then LOCAL_REFRESH."""
        with self.meta:
            hs = [h for h in self.handlers.values() if h.map_id in job.maps or h.key in job.corrections]
        locks = sorted({h.map_id for h in hs} | set(m for m in job.maps if m in self.maps))
        for mid in locks:
            self._map_locks[mid].acquire()
        try:
            for h in sorted(hs, key=lambda x: x.key):
                C = job.corrections.get(h.key)
                if C is not None:
                    with h.io_lock:
                        h.epochs.append((h.endpoint.sender.next_seq, C))
                backlog, h.backlog = h.backlog, []
                for m in backlog:
                    self._apply_update(h, m, from_backlog=True)
                if C is not None:
                    self._send_refresh(h, C)
        finally:
            job.guard.release()
            for mid in reversed(locks):
                self._map_locks[mid].release()

    def _send_refresh(self, h: ClientHandler, C: Pose) -> None:
        mp = self.maps.get(h.map_id)
        kfs, lms, seen = [], [], set()
        for kid in h.recent_kfs:
            kf = mp.keyframes.get(kid)
            if kf is None:
                continue
            kfs.append(P.KeyframeEntry(kf.id, kf.timestamp, kf.pose, kf.camera_id, full=False))
            for lid in kf.landmark_ids():
                lm = mp.landmarks.get(lid)
                if lm is not None and lid not in seen:
                    seen.add(lid)
                    lms.append(P.LandmarkEntry(lid, lm.position.copy(), lm.descriptor, lm.last_updated_by, []))
        msg = P.WireMessage(P.MsgType.LOCAL_REFRESH, map_id=mp.map_id, keyframes=kfs, landmarks=lms,
                            control=P.LocalRefresh(mp.map_id, C))
        seq = self._send(h, msg)
        with h.io_lock:
            if h.epochs and h.epochs[-1][0] != seq:  # another frame slipped in before the refresh
                h.epochs[-1] = (seq, h.epochs[-1][1])

    # ------------------------------------------------------------------ rigid multi-camera links

    def _bracket(self, client_id: int, t: float):
        for (cid, sid), lst in sorted(list(self._session_kfs.items()), reverse=True):
            if cid != client_id or not lst:
                continue
            ts = [x for x, _ in lst]
            i = bisect.bisect_right(ts, t)
            if i == 0 or i == len(ts):
                continue
            (t0, k0), (t1, k1) = lst[i - 1], lst[i]
            if t - t0 <= self.cfg.bracket_s and t1 - t <= self.cfg.bracket_s:
                return (t0, k0), (t1, k1)
        raise NoBracket(f"client {client_id} has no keyframes around t={t:.3f}")

    def _bracket_possible(self, client_id: int, t: float) -> bool:
        """False once client b's keyframes have moved past ``t`` without bracketing it."""
        for (cid, _), lst in list(self._session_kfs.items()):
            if cid == client_id and lst and lst[0][0] <= t and lst[-1][0] <= t + self.cfg.bracket_s:
                return True
        return False

    def _retry_rigid(self, i: int) -> None:
        pair = self.cfg.rigid_pairs[i]
        keep = []
        for akid in self._rigid_pending[i]:
            amap = self.map_of(akid)
            if amap is None:
                continue
            akf = amap.keyframes[akid]
            try:
                self.rigid_link(i, akf)
            except NoBracket:
                if self._bracket_possible(pair.client_b, akf.timestamp):
                    keep.append(akid)
        self._rigid_pending[i] = keep

    def rigid_link(self, i: int, akf: Keyframe) -> None:
        pair = self.cfg.rigid_pairs[i]
        (t0, k0), (t1, k1) = self._bracket(pair.client_b, akf.timestamp)
        bmap = self.map_of(k0)
        b0, b1 = bmap.keyframes[k0], bmap.keyframes[k1]
        Xv = interpolate(b0.pose, t0, b1.pose, t1, akf.timestamp)
        vkf = Keyframe(self._vids.next(), akf.timestamp, Xv, b0.camera_id, map_id=bmap.map_id, is_virtual=True)
        with self._map_locks[bmap.map_id]:
            upsert_keyframe(bmap, vkf)
            self._kf_map[vkf.id] = bmap.map_id
            bmap.edges.append(Edge(k0, vkf.id, relative(b0.pose, Xv), KIND_WEIGHTS["odometry"], "odometry"))
            bmap.edges.append(Edge(vkf.id, k1, relative(Xv, b1.pose), KIND_WEIGHTS["odometry"], "odometry"))
        rigid = Edge(vkf.id, akf.id, pair.b_from_a, KIND_WEIGHTS["rigid"], "rigid")
        self.stats.rigid_edges += 1
        amap = self.map_of(akf.id)
        if amap.map_id != bmap.map_id:
            T = compose(compose(Xv, pair.b_from_a), inverse(akf.pose))  # b-map frame from a-map frame
            self.merge_maps(amap.map_id, bmap.map_id, T, [rigid], reason="rigid")
            self._rigid_quiet[i] = self.cfg.rigid_hysteresis
            return
        with self._map_locks[bmap.map_id]:
            bmap.edges.append(rigid)
        dt, da = pose_gap(relative(Xv, akf.pose), pair.b_from_a)
        if self._rigid_quiet[i] > 0:
            self._rigid_quiet[i] -= 1
            return
        if dt > pair.max_translation or da > math.radians(pair.max_rotation_deg):
            self.optimize_map(bmap.map_id, [], reason="rigid divergence")
            self._rigid_quiet[i] = self.cfg.rigid_hysteresis

    # ------------------------------------------------------------------ monocular registration

    def place_recognition(self, h: ClientHandler, m: P.WireMessage) -> P.WireMessage:
        req: P.PlaceRecRequest = m.control
        ok, pose, mp, lms = False, Pose.identity(), None, []
        k = h.intrinsics
        if k is not None and req.features:
            for _, cid in self._rank(req.signature):
                cmap = self.map_of(cid)
                if cmap is None:
                    continue
                with self._map_locks[cmap.map_id]:
                    ckf = cmap.keyframes[cid]
                    pool = {lm.descriptor: lm for lm in retrieve_in_view(cmap.grid, cmap, k, ckf.pose)}
                    for lid in ckf.landmark_ids():
                        lm = cmap.landmarks.get(lid)
                        if lm is not None:
                            pool.setdefault(lm.descriptor, lm)
                pairs = [(f, pool[f.descriptor]) for f in req.features if f.descriptor in pool]
                if len(pairs) < self.cfg.place_rec_min_inliers:
                    continue
                pts = np.array([lm.position for _, lm in pairs])
                uv = np.array([[f.u, f.v] for f, _ in pairs])
                fit = optimize_pose(k, ckf.pose, pts, uv, -np.ones(len(pairs)), RobustParams(), max_iters=30, rounds=3)
                if int(fit.inliers.sum()) >= self.cfg.place_rec_min_inliers and fit.rms < self.cfg.place_rec_max_rms:
                    ok, pose, mp = True, fit.pose, cmap
                    break
        if ok:
            with self.meta:
                h.map_id = mp.map_id
            with self._map_locks[mp.map_id]:
                seen = retrieve_in_view(mp.grid, mp, k, pose)
            lms = [lm for lm in sorted(seen, key=lambda l: l.id)
                   if not (self.cfg.exclusion and lm.last_updated_by == h.client_id)]
            h.last_augment = {lm.id: lm.version for lm in lms}
            self.stats.place_rec_success += 1
        else:
            self.stats.place_rec_failure += 1
        resp = P.WireMessage(
            P.MsgType.PLACE_REC_RESPONSE,
            map_id=mp.map_id if ok else 0,
            landmarks=[P.LandmarkEntry(lm.id, lm.position.copy(), lm.descriptor, lm.last_updated_by, []) for lm in lms],
            control=P.PlaceRecResponse(ok, mp.map_id if ok else 0, pose),
        )
        self._send(h, resp)
        return resp


def pose_gap(a: Pose, b: Pose) -> tuple[float, float]:
    d = relative(a, b)
    return float(np.linalg.norm(d.t)), d.rotation_angle()
