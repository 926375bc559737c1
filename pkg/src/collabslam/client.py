"""Client agent: tracking against a bounded local map, keyframes, deltas to the server.

The client keeps only the last ``window`` keyframes, the landmarks they
observe, and a capped LRU set of landmarks pushed by the server.  Everything
older lives only on the server.
"""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import protocol as P
from .errors import TrackingLost, Underconstrained, UnknownSession
from .geom import CameraIntrinsics, Pose, backproject, compose, inverse, pose_distance, project
from .geom import relative as relative_to
from .mapcore import IdGenerator, Keyframe, Landmark, Observation
from .metrics import Timings
from .optim import BAProblem, local_bundle_adjust, optimize_pose
from .optim.ba import RobustParams
from .simworld import FrameObservation

log = logging.getLogger(__name__)

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


@dataclass
class ClientConfig:
    client_id: int
    intrinsics: CameraIntrinsics
    base_from_cam: Pose = field(default_factory=Pose.identity)
    camera_id: int = 0
    monocular: bool = False
    window: int = 12
    augment_cap: int = 2000
    n_min: int = 15
    n_init: int = 50
    kf_ratio: float = 0.7
    kf_distance: float = 0.5
    kf_angle_deg: float = 15.0
    match_mode: str = "exact"  # "exact" | "hamming"
    hamming_threshold: int = 40
    min_parallax_deg: float = 1.0
    ba_iters: int = 5
    pose_epsilon: float = 1e-4
    robust: RobustParams = field(default_factory=RobustParams)

    def __post_init__(self):
        if self.match_mode not in ("exact", "hamming"):
            raise ValueError(f"unknown match mode {self.match_mode!r}")
        if self.window < 2:
            raise ValueError("window must hold at least two keyframes")


@dataclass
class TrackResult:
    pose: Pose
    inliers: int
    matched: list  # (feature index, landmark id) for inliers


@dataclass
class ClientKeyframe:
    kf: Keyframe
    loose: dict = field(default_factory=dict)  # descriptor -> (u, v) of unmatched features (monocular)


class Client:
    def __init__(self, cfg: ClientConfig, timings: Timings | None = None):
        self.cfg = cfg
        self.timings = timings or Timings()
        self.session_id = 0
        self.outbox: list[P.WireMessage] = []
        self.events: list[str] = []
        self.peak_keyframes = 0
        self.peak_landmarks = 0
        self.frames_seen = 0
        self._reset_session()

    # -- session lifecycle ---------------------------------------------------

    def _reset_session(self) -> None:
        self.ids: IdGenerator | None = None
        self.map_id = 0
        self.initialized = False
        self.awaiting_place_rec = False
        self.session_announced = False
        self.pose: Pose | None = None
        self.window: list[ClientKeyframe] = []
        self.landmarks: dict = {}  # window landmarks
        self.augmented: OrderedDict = OrderedDict()
        self.anchored: set = set()  # landmark ids held fixed in BA (server-provided, monocular)
        self._desc: dict = {}  # descriptor -> landmark id
        self.sent_kf: dict = {}  # kf id -> pose last transmitted
        self.full_dirty: set = set()
        self.sent_lm: dict = {}  # landmark id -> position last transmitted
        self.pruned_outbox: list = []
        self.odom_since_request: Pose = Pose.identity()
        self.init_frame_count = 0
        self.last_track: TrackResult | None = None

    def start_new_session(self) -> None:
        self.session_id += 1
        self._reset_session()
        self.ids = IdGenerator(self.cfg.client_id, self.session_id)
        self.events.append(f"session {self.session_id}")
        if self.cfg.monocular:
            self._announce()

    def _announce(self) -> None:
        self.outbox.append(
            P.WireMessage(
                P.MsgType.SESSION_START,
                control=P.SessionStart(self.cfg.monocular, self.cfg.camera_id, self.cfg.intrinsics, self.cfg.base_from_cam),
            )
        )
        self.session_announced = True

    # -- memory bookkeeping ----------------------------------------------------

    def retained_counts(self) -> tuple[int, int, int]:
        return len(self.window), len(self.landmarks), len(self.augmented)

    def audit_memory(self) -> list[str]:
        problems = []
        if len(self.window) > self.cfg.window:
            problems.append(f"window holds {len(self.window)} > {self.cfg.window}")
        if len(self.augmented) > self.cfg.augment_cap:
            problems.append(f"augmented set {len(self.augmented)} > {self.cfg.augment_cap}")
        observed = {o.landmark_id for ck in self.window for o in ck.kf.observations}
        for lid in self.landmarks:
            if lid not in observed:
                problems.append(f"landmark {lid} retained without a window observer")
        for lid in observed:
            if lid not in self.landmarks:
                problems.append(f"window observes unknown landmark {lid}")
        if set(self.landmarks) & set(self.augmented):
            problems.append("landmark both in window and augmented sets")
        return problems

    def _note_peaks(self) -> None:
        self.peak_keyframes = max(self.peak_keyframes, len(self.window))
        self.peak_landmarks = max(self.peak_landmarks, len(self.landmarks) + len(self.augmented))

    def _index(self, lm: Landmark) -> None:
        self._desc.setdefault(lm.descriptor, lm.id)

    def _unindex(self, lm: Landmark) -> None:
        if self._desc.get(lm.descriptor) == lm.id:
            del self._desc[lm.descriptor]

    def _lookup(self, lid):
        return self.landmarks.get(lid) or self.augmented.get(lid)

    # -- frame entry point -------------------------------------------------------

    def process_frame(self, f: FrameObservation) -> None:
        """Consume one camera frame; outgoing messages accumulate in ``outbox``."""
        self.frames_seen += 1
        if self.ids is None:
            self.start_new_session()
        if not self.initialized:
            self._try_initialize(f)
            self._note_peaks()
            return
        prior = self.pose
        if f.odometry is not None:
            prior = compose(prior, self._cam_motion(f.odometry))
        try:
            with self.timings.timed("tracking"):
                tr = self.track_frame(f, prior)
        except TrackingLost as exc:
            self.events.append(f"lost at {f.timestamp:.2f}: {exc}")
            log.info("client %d lost tracking at t=%.2f (%s)", self.cfg.client_id, f.timestamp, exc)
            self.start_new_session()
            self._try_initialize(f)
            self._note_peaks()
            return
        self.pose = tr.pose
        self.last_track = tr
        with self.timings.timed("local mapping"):
            kf = self.maybe_create_keyframe(f, tr)
        if kf is not None:
            with self.timings.timed("sending map updates"):
                m = self.build_update_message()
                if m is not None:
                    self.outbox.append(m)
        self._note_peaks()

    def _cam_motion(self, base_delta: Pose) -> Pose:
        b = self.cfg.base_from_cam
        return compose(compose(inverse(b), base_delta), b)

    # -- initialisation ----------------------------------------------------------

    def _try_initialize(self, f: FrameObservation) -> None:
        if self.cfg.monocular:
            self._monocular_initialize(f)
            return
        good = np.flatnonzero(f.depth > 0)
        if len(good) < self.cfg.n_init:
            return
        # the map origin is the robot base at initialisation
        self.pose = self.cfg.base_from_cam
        self.initialized = True
        if not self.session_announced:
            self._announce()
        tr = TrackResult(self.pose, 0, [])
        self._create_keyframe(f, tr)
        self.outbox.append(self.build_update_message())

    def _monocular_initialize(self, f: FrameObservation) -> None:
        if self.awaiting_place_rec:
            if f.odometry is not None:
                self.odom_since_request = compose(self.odom_since_request, f.odometry)
            return
        self.init_frame_count += 1
        feats = [P.Feature(float(u), float(v), -1.0, d) for (u, v), d in zip(f.uv, f.descriptors)]
        if not feats:
            return
        self.outbox.append(
            P.WireMessage(
                P.MsgType.PLACE_REC_REQUEST,
                control=P.PlaceRecRequest(f.timestamp, self.cfg.camera_id, tuple(sorted(f.signature)), feats),
            )
        )
        self.awaiting_place_rec = True
        self.odom_since_request = Pose.identity()

    # -- tracking -------------------------------------------------------------------

    def _match(self, f: FrameObservation) -> list:
        """(feature index, landmark id) candidate pairs."""
        if self.cfg.match_mode == "exact":
            out = []
            for i, d in enumerate(f.descriptors):
                lid = self._desc.get(d)
                if lid is not None:
                    out.append((i, lid))
            return out
        ids = list(self._desc.values())
        if not ids or not f.descriptors:
            return []
        lib = np.frombuffer(b"".join(self._lookup(l).descriptor for l in ids), dtype=np.uint8).reshape(-1, 32)
        q = np.frombuffer(b"".join(f.descriptors), dtype=np.uint8).reshape(-1, 32)
        out = []
        taken = set()
        for i, row in enumerate(q):
            dist = _POPCOUNT[np.bitwise_xor(lib, row)].sum(axis=1)
            j = int(np.argmin(dist))
            if dist[j] <= self.cfg.hamming_threshold and j not in taken:
                taken.add(j)
                out.append((i, ids[j]))
        return out

    def track_frame(self, f: FrameObservation, prior: Pose) -> TrackResult:
        pairs = self._match(f)
        if len(pairs) < self.cfg.n_min:
            raise TrackingLost(f"{len(pairs)} matches")
        fi = np.array([i for i, _ in pairs])
        pts = np.array([self._lookup(l).position for _, l in pairs])
        fit = optimize_pose(self.cfg.intrinsics, prior, pts, f.uv[fi], f.depth[fi], self.cfg.robust)
        n_in = int(fit.inliers.sum())
        if n_in < self.cfg.n_min:
            raise TrackingLost(f"{n_in} inliers")
        matched = [p for p, ok in zip(pairs, fit.inliers) if ok]
        for _, lid in matched:
            if lid in self.augmented:
                self.augmented.move_to_end(lid)
        return TrackResult(fit.pose, n_in, matched)

    # -- mapping -----------------------------------------------------------------------

    def needs_keyframe(self, tr: TrackResult) -> bool:
        if not self.window:
            return True
        last = self.window[-1].kf
        ref = max(1, len(last.observations))
        if tr.inliers / ref < self.cfg.kf_ratio:
            return True
        dist, ang = pose_distance(last.pose, tr.pose)
        return dist > self.cfg.kf_distance or ang > math.radians(self.cfg.kf_angle_deg)

    def maybe_create_keyframe(self, f: FrameObservation, tr: TrackResult) -> Keyframe | None:
        if not self.needs_keyframe(tr):
            return None
        kf = self._create_keyframe(f, tr)
        self._local_ba()
        self._evict()
        return kf

    def _create_keyframe(self, f: FrameObservation, tr: TrackResult) -> Keyframe:
        kid = self.ids.next()
        obs = []
        used = set()
        for i, lid in tr.matched:
            lm = self.landmarks.get(lid)
            if lm is None:
                lm = self.augmented.pop(lid)
                self.landmarks[lid] = lm
            lm.observing_keyframes.add(kid)
            obs.append(Observation(lid, float(f.uv[i, 0]), float(f.uv[i, 1]), float(f.depth[i])))
            used.add(i)
        loose = {}
        k = self.cfg.intrinsics
        for i in range(len(f)):
            if i in used:
                continue
            d = f.descriptors[i]
            if d in self._desc:
                continue  # matched a landmark but rejected as outlier
            z = f.depth[i]
            if z > 0:
                if not (k.depth_min <= z <= k.depth_max):
                    continue
                p = tr.pose.act(backproject(k, f.uv[i, 0], f.uv[i, 1], z))
                lm = Landmark(self.ids.next(), p, d, {kid}, self.cfg.client_id, self.map_id)
                self.landmarks[lm.id] = lm
                self._index(lm)
                obs.append(Observation(lm.id, float(f.uv[i, 0]), float(f.uv[i, 1]), float(z)))
            else:
                loose[d] = (float(f.uv[i, 0]), float(f.uv[i, 1]))
        kf = Keyframe(kid, f.timestamp, tr.pose, self.cfg.camera_id, obs, frozenset(f.signature), self.map_id)
        ck = ClientKeyframe(kf, loose)
        if self.cfg.monocular and self.window:
            self._triangulate(self.window[-1], ck)
        self.window.append(ck)
        return kf

    def _triangulate(self, prev: ClientKeyframe, cur: ClientKeyframe) -> None:
        """Two-view landmarks from features unmatched in both keyframes."""
        k = self.cfg.intrinsics
        common = [d for d in cur.loose if d in prev.loose]
        if not common:
            return
        A, B = prev.kf.pose, cur.kf.pose
        min_par = math.radians(self.cfg.min_parallax_deg)
        added = False
        for d in common:
            (ua, va), (ub, vb) = prev.loose[d], cur.loose[d]
            ra = A.R @ np.array([(ua - k.cx) / k.fx, (va - k.cy) / k.fy, 1.0])
            rb = B.R @ np.array([(ub - k.cx) / k.fx, (vb - k.cy) / k.fy, 1.0])
            ra /= np.linalg.norm(ra)
            rb /= np.linalg.norm(rb)
            cos_par = float(ra @ rb)
            if cos_par > math.cos(min_par):
                continue
            # midpoint of the closest approach of the two rays
            w0 = A.t - B.t
            a, b, c = 1.0, cos_par, 1.0
            dd, e = float(ra @ w0), float(rb @ w0)
            den = a * c - b * b
            if den < 1e-12:
                continue
            sa = (b * e - c * dd) / den
            sb = (a * e - b * dd) / den
            if sa <= 0 or sb <= 0:
                continue
            X = 0.5 * (A.t + sa * ra + B.t + sb * rb)
            pa = project(k, inverse(A), X)
            pb = project(k, inverse(B), X)
            if pa is None or pb is None:
                continue
            if math.hypot(pa[0] - ua, pa[1] - va) > 3.0 or math.hypot(pb[0] - ub, pb[1] - vb) > 3.0:
                continue
            lm = Landmark(self.ids.next(), X, d, {prev.kf.id, cur.kf.id}, self.cfg.client_id, self.map_id)
            self.landmarks[lm.id] = lm
            self._index(lm)
            prev.kf.observations.append(Observation(lm.id, ua, va, -1.0))
            cur.kf.observations.append(Observation(lm.id, ub, vb, -1.0))
            del prev.loose[d]
            del cur.loose[d]
            added = True
        if added and prev.kf.id in self.sent_kf:
            self.full_dirty.add(prev.kf.id)

    def _local_ba(self) -> None:
        if len(self.window) < 2:
            return
        poses = {ck.kf.id: ck.kf.pose for ck in self.window}
        obs = [(ck.kf.id, o.landmark_id, o.u, o.v, o.depth) for ck in self.window for o in ck.kf.observations]
        count: dict = {}
        has_depth: set = set()
        for _, lid, _, _, z in obs:
            count[lid] = count.get(lid, 0) + 1
            if z > 0:
                has_depth.add(lid)
        points = {lid: self.landmarks[lid].position for lid in count}
        fixed_lm = {l for l in points if l in self.anchored or (l not in has_depth and count[l] < 2)}
        prob = BAProblem(poses, points, obs, self.cfg.intrinsics, {self.window[0].kf.id}, fixed_lm, self.cfg.robust)
        try:
            res = local_bundle_adjust(prob, max_iters=self.cfg.ba_iters)
        except Underconstrained as exc:  # pragma: no cover - guarded by fixed_lm
            log.warning("local BA skipped: %s", exc)
            return
        for ck in self.window:
            ck.kf.pose = res.poses[ck.kf.id]
        for lid, p in res.points.items():
            self.landmarks[lid].position = p
        self.pose = self.window[-1].kf.pose

    def _evict(self) -> None:
        while len(self.window) > self.cfg.window:
            old = self.window.pop(0)
            self.sent_kf.pop(old.kf.id, None)
            self.full_dirty.discard(old.kf.id)
            for o in old.kf.observations:
                lm = self.landmarks.get(o.landmark_id)
                if lm is None:
                    continue
                lm.observing_keyframes.discard(old.kf.id)
                if not lm.observing_keyframes:
                    del self.landmarks[lm.id]
                    self._unindex(lm)
                    self.sent_lm.pop(lm.id, None)
                    self.anchored.discard(lm.id)

    def prune_landmark(self, lid) -> None:
        """Drop a landmark everywhere; the server hears about it if it was ever sent."""
        lm = self.landmarks.pop(lid, None) or self.augmented.pop(lid, None)
        if lm is None:
            return
        self._unindex(lm)
        for ck in self.window:
            before = len(ck.kf.observations)
            ck.kf.observations = [o for o in ck.kf.observations if o.landmark_id != lid]
            if len(ck.kf.observations) != before and ck.kf.id in self.sent_kf:
                self.full_dirty.add(ck.kf.id)
        if self.sent_lm.pop(lid, None) is not None or lm.last_updated_by != self.cfg.client_id:
            self.pruned_outbox.append(lid)

    # -- delta messages ------------------------------------------------------------------

    def build_update_message(self) -> P.WireMessage | None:
        kfs, lms = [], []
        window_ids = set()
        for ck in self.window:
            kf = ck.kf
            window_ids.add(kf.id)
            sent = self.sent_kf.get(kf.id)
            full = sent is None or kf.id in self.full_dirty
            if not full:
                dt, da = pose_distance(sent, kf.pose)
                if dt <= self.cfg.pose_epsilon and da <= self.cfg.pose_epsilon:
                    continue
            kfs.append(
                P.KeyframeEntry(kf.id, kf.timestamp, kf.pose, kf.camera_id, full, False,
                                list(kf.observations) if full else [], tuple(sorted(kf.signature)) if full else ())
            )
            self.sent_kf[kf.id] = kf.pose
            self.full_dirty.discard(kf.id)
        for lid, lm in self.landmarks.items():
            if lid in self.anchored:
                continue
            sent = self.sent_lm.get(lid)
            if sent is not None and np.linalg.norm(sent - lm.position) <= self.cfg.pose_epsilon:
                continue
            lm.last_updated_by = self.cfg.client_id
            observers = sorted(lm.observing_keyframes & window_ids)
            lms.append(P.LandmarkEntry(lid, lm.position.copy(), lm.descriptor, self.cfg.client_id, observers))
            self.sent_lm[lid] = lm.position.copy()
        pruned, self.pruned_outbox = self.pruned_outbox, []
        if not kfs and not lms and not pruned:
            return None
        return P.WireMessage(P.MsgType.MAP_UPDATE, map_id=self.map_id, keyframes=kfs, landmarks=lms, pruned_ids=pruned)

    # -- server messages --------------------------------------------------------------------

    def apply_server_message(self, m: P.WireMessage) -> None:
        if m.session_id != self.session_id or m.client_id != self.cfg.client_id:
            raise UnknownSession(f"message for {m.client_id}:{m.session_id}")
        if m.msg_type == P.MsgType.AUGMENT:
            if m.map_id:
                self.map_id = m.map_id
            self._add_augmented(m.landmarks)
        elif m.msg_type == P.MsgType.LOCAL_REFRESH:
            self._apply_refresh(m)
        elif m.msg_type == P.MsgType.PLACE_REC_RESPONSE:
            self._apply_place_rec(m)

    def _add_augmented(self, entries) -> None:
        for e in entries:
            if e.id in self.landmarks:
                continue
            cur = self.augmented.get(e.id)
            if cur is not None:
                cur.position = np.asarray(e.position, float).copy()
                continue
            if self._desc.get(e.descriptor) is not None:
                continue  # same world point already held under another id
            lm = Landmark(e.id, e.position, e.descriptor, set(), e.last_updated_by, self.map_id)
            self.augmented[e.id] = lm
            self._index(lm)
            if self.cfg.monocular:
                self.anchored.add(e.id)
        while len(self.augmented) > self.cfg.augment_cap:
            _, old = self.augmented.popitem(last=False)
            self._unindex(old)
            self.anchored.discard(old.id)

    def _apply_refresh(self, m: P.WireMessage) -> None:
        C = m.control.correction
        self.map_id = m.control.new_map_id
        given_kf = {e.id: e for e in m.keyframes}
        given_lm = {e.id: e for e in m.landmarks}
        anchor = self.window[-1].kf if self.window else None
        rel = relative_to(anchor.pose, self.pose) if (anchor is not None and self.pose is not None) else None
        for ck in self.window:
            kf = ck.kf
            e = given_kf.get(kf.id)
            if e is not None:
                kf.pose = e.pose
                if kf.id in self.sent_kf:
                    self.sent_kf[kf.id] = e.pose
            else:
                kf.pose = compose(C, kf.pose)
                if kf.id in self.sent_kf:
                    self.sent_kf[kf.id] = compose(C, self.sent_kf[kf.id])
            kf.map_id = self.map_id
        for store in (self.landmarks, self.augmented):
            for lid, lm in store.items():
                e = given_lm.get(lid)
                if e is not None:
                    lm.position = np.asarray(e.position, float).copy()
                    if lid in self.sent_lm:
                        self.sent_lm[lid] = lm.position.copy()
                else:
                    lm.position = C.act(lm.position)
                    if lid in self.sent_lm:
                        self.sent_lm[lid] = C.act(self.sent_lm[lid])
                lm.map_id = self.map_id
        if rel is not None:
            self.pose = compose(anchor.pose, rel)
        elif self.pose is not None:
            self.pose = compose(C, self.pose)
        self.events.append(f"refresh map {self.map_id}")

    def _apply_place_rec(self, m: P.WireMessage) -> None:
        self.awaiting_place_rec = False
        r = m.control
        if not r.success:
            return
        self.map_id = r.map_id
        self._add_augmented(m.landmarks)
        self.pose = compose(r.pose, self._cam_motion(self.odom_since_request))
        self.initialized = True
        self.events.append(f"place recognition ok, map {r.map_id}")
