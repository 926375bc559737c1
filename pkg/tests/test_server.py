import numpy as np
import pytest

from collabslam import protocol as P
from collabslam.geom import Pose, compose, inverse
from collabslam.mapcore import ElementId, Observation, audit
from collabslam.runner import Simulation
from collabslam.scenario import parse_scenario
from collabslam.server import RigidPair, Server, ServerConfig, pose_gap
from collabslam.simworld import DEPTH_INTRINSICS, MONO_INTRINSICS
from collabslam.transport import Endpoint

RNG = np.random.default_rng(0)
POINTS = np.column_stack([RNG.uniform(2, 8, 60), RNG.uniform(-3, 3, 60), RNG.uniform(0.5, 3, 60)])
DESCS = [bytes([i]) + bytes(31) for i in range(60)]
TAGS = tuple(range(1000, 1060))


def _start(server, cid, sid=1, mono=False):
    ep = Endpoint(cid, sid)
    k = MONO_INTRINSICS if mono else DEPTH_INTRINSICS
    server.on_frame(ep.send(P.WireMessage(P.MsgType.SESSION_START, control=P.SessionStart(mono, cid, k, Pose.identity()))))
    return ep


def _keyframe_update(ep, seq, t, world_from_map, idx, cam_pose=Pose.identity()):
    """One keyframe observing landmarks ``idx``, expressed in a map frame related to the world by ``world_from_map``."""
    map_from_world = inverse(world_from_map)
    kid = ElementId(ep.client_id, ep.session_id, seq)
    lids = [ElementId(ep.client_id, ep.session_id, 1000 + i) for i in idx]
    obs = [Observation(l, 0.0, 0.0, 1.0) for l in lids]
    kf = P.KeyframeEntry(kid, t, compose(map_from_world, cam_pose), ep.client_id, True, False, obs,
                         tuple(TAGS[i] for i in idx))
    lms = [P.LandmarkEntry(l, map_from_world.act(POINTS[i]), DESCS[i], ep.client_id, [kid]) for l, i in zip(lids, idx)]
    return ep.send(P.WireMessage(P.MsgType.MAP_UPDATE, keyframes=[kf], landmarks=lms)), kid


# camera at 1.5 m height looking along +x, towards the landmark cloud
LOOK_X = Pose.from_rt(np.column_stack([[0, -1, 0], [0, 0, -1], [1, 0, 0]]).astype(float), [0, 0, 1.5])
T2 = Pose.from_yaw(0.4, [3.0, -1.0, 0.2])  # world from client 2's map frame


def _two_maps(cfg=None):
    s = Server(cfg or ServerConfig())
    e1, e2 = _start(s, 1), _start(s, 2)
    f, k1 = _keyframe_update(e1, 1, 0.0, Pose.identity(), range(40))
    s.on_frame(f)
    f, k2 = _keyframe_update(e2, 1, 0.0, T2, range(10, 50))
    s.on_frame(f)
    return s, e1, e2, k1, k2


def test_sessions_open_their_own_maps():
    s, *_ = _two_maps()
    assert s.non_empty_maps() == [1, 2]
    assert s.audit_all() == []
    assert s.stats.messages_applied == 2


def test_verify_recovers_the_frame_transform_despite_outliers():
    s, _, _, k1, k2 = _two_maps()
    m1, m2 = s.map_of(k1), s.map_of(k2)
    # corrupt a quarter of client 2's shared landmarks
    for lid in list(m2.landmarks)[:8]:
        m2.landmarks[lid].position = m2.landmarks[lid].position + 1.5
    T, n_in, rms = s.verify(m2.keyframes[k2], m2, m1.keyframes[k1], m1)
    assert n_in == 22 and rms < 1e-5  # wire positions are single precision
    assert pose_gap(T, T2)[0] < 1e-5  # map-1 frame (the world) from map-2 frame


def test_verify_rejects_too_few_shared_landmarks():
    s = Server()
    e1, e2 = _start(s, 1), _start(s, 2)
    s.on_frame(_keyframe_update(e1, 1, 0.0, Pose.identity(), range(0, 20))[0])
    s.on_frame(_keyframe_update(e2, 1, 0.0, T2, range(10, 30))[0])
    s.tick()
    assert s.stats.merges == 0 and len(s.non_empty_maps()) == 2


def test_loop_merges_maps_and_aligns_shared_points():
    s, _, _, k1, k2 = _two_maps()
    s.tick()
    assert s.stats.merges == 1 and s.stats.loops_verified == 1
    assert len(s.non_empty_maps()) == 1
    mp = s.maps[s.non_empty_maps()[0]]
    assert k1 in mp.keyframes and k2 in mp.keyframes
    by_desc = {}
    for lm in mp.landmarks.values():
        by_desc.setdefault(lm.descriptor, []).append(lm.position)
    shared = [v for v in by_desc.values() if len(v) == 2]
    assert len(shared) == 30
    assert max(np.linalg.norm(a - b) for a, b in shared) < 1e-6
    assert audit(mp) == []
    assert all(h.map_id == mp.map_id for h in s.handlers.values())
    out = [P.decode(f) for _, _, f in s.take_outgoing()]
    assert sum(m.msg_type == P.MsgType.LOCAL_REFRESH for m in out) == 2
    assert dict(s.stats.loop_checks) == {k1: 1, k2: 1}  # each keyframe examined once


def test_pause_defers_updates_to_an_ordered_backlog():
    s, e1, _, k1, k2 = _two_maps(ServerConfig(pause_ticks=2))
    s.tick()  # merge at tick 1, resume due at tick 3
    assert s.stats.merges == 1 and s.jobs
    mid = s.non_empty_maps()[0]
    assert s.pause.is_paused(mid)
    f, k3 = _keyframe_update(e1, 2, 0.1, Pose.identity(), range(5, 45))
    s.on_frame(f)
    assert s.stats.received_while_paused == 1 and k3 not in s.maps[mid].keyframes
    s.tick()
    assert s.pause.is_paused(mid)
    s.tick()
    assert not s.pause.is_paused(mid)
    assert s.stats.backlog_applied == 1 and s.stats.applied_while_paused == 0
    mp = s.maps[mid]
    # both were sent at identity in client 1's old frame, so the backlog got k1's correction
    assert pose_gap(mp.keyframes[k3].pose, mp.keyframes[k1].pose)[0] < 1e-9
    assert s.audit_all() == []


def test_epoch_corrections_apply_only_to_unacknowledged_refreshes():
    s, e1, *_ = _two_maps()
    s.tick()
    h = next(h for h in s.handlers.values() if h.epochs)
    seq, C = h.epochs[-1]
    assert h.correction_for(seq - 1) is C
    assert h.correction_for(seq) is None


def _looking_at_points(s, k1):
    kf = s.map_of(k1).keyframes[k1]
    kf.pose = LOOK_X
    return kf


def test_exclusion_rule_skips_the_requesting_clients_own_landmarks():
    for excl in (True, False):
        s = Server(ServerConfig(exclusion=excl))
        e1 = _start(s, 1)
        f, k1 = _keyframe_update(e1, 1, 0.0, Pose.identity(), range(40))
        s.on_frame(f)
        h = s.handlers[(1, 1)]
        h.last_augment = {}
        m = s.augment_reply(h, _looking_at_points(s, k1))
        if excl:
            assert m is None
        else:
            assert len(m.landmarks) > 0
        assert s.stats.exclusion_violations == 0


def test_augment_sends_only_changed_landmarks():
    s = Server(ServerConfig(exclusion=False))
    e1 = _start(s, 1)
    f, k1 = _keyframe_update(e1, 1, 0.0, Pose.identity(), range(40))
    s.on_frame(f)
    h = s.handlers[(1, 1)]
    kf = _looking_at_points(s, k1)
    h.last_augment = {}
    first = s.augment_reply(h, kf)
    assert first is not None and len(first.landmarks) > 0
    assert s.augment_reply(h, kf) is None
    lm = s.maps[h.map_id].landmarks[first.landmarks[0].id]
    lm.version += 1
    again = s.augment_reply(h, kf)
    assert [e.id for e in again.landmarks] == [lm.id]


def test_place_recognition_on_an_empty_server_fails():
    s = Server()
    ep = _start(s, 5, mono=True)
    feats = [P.Feature(100.0, 100.0, -1.0, d) for d in DESCS[:20]]
    s.on_frame(ep.send(P.WireMessage(P.MsgType.PLACE_REC_REQUEST,
                                     control=P.PlaceRecRequest(0.0, 5, TAGS[:20], feats))))
    out = [P.decode(f) for _, _, f in s.take_outgoing(5)]
    resp = [m for m in out if m.msg_type == P.MsgType.PLACE_REC_RESPONSE]
    assert len(resp) == 1 and not resp[0].control.success
    assert s.stats.place_rec_failure == 1 and s.handlers[(5, 1)].map_id == 0


def test_bracket_and_rigid_link_merge_two_cameras():
    b_from_a = Pose.from_yaw(np.pi, [0.0, 0.0, -0.4])
    s = Server(ServerConfig(rigid_pairs=[RigidPair(1, 2, b_from_a)]))
    e1, e2 = _start(s, 1), _start(s, 2)
    for seq, t in ((1, 0.0), (2, 1.0)):
        f, _ = _keyframe_update(e2, seq, t, Pose.identity(), range(15 * (seq - 1), 15 * seq),
                                cam_pose=Pose.identity() if seq == 1 else Pose.from_yaw(0.0, [1.0, 0, 0]))
        s.on_frame(f)
    f, ka = _keyframe_update(e1, 1, 0.5, T2, range(30, 60))  # nothing shared: no loop closure
    s.on_frame(f)
    s.tick()
    assert s.stats.rigid_edges == 1 and s.stats.merges == 1
    mp = s.maps[s.non_empty_maps()[0]]
    virtual = [kf for kf in mp.keyframes.values() if kf.is_virtual]
    assert len(virtual) == 1 and virtual[0].timestamp == 0.5
    assert np.allclose(virtual[0].pose.t, [0.5, 0, 0], atol=1e-6)
    gap = pose_gap(compose(inverse(virtual[0].pose), mp.keyframes[ka].pose), b_from_a)
    assert gap[0] < 1e-6 and gap[1] < 1e-6
    assert audit(mp) == []


def test_no_bracket_keeps_the_rigid_request_pending():
    s = Server(ServerConfig(rigid_pairs=[RigidPair(1, 2, Pose.identity())]))
    e1, e2 = _start(s, 1), _start(s, 2)
    s.on_frame(_keyframe_update(e2, 1, 0.0, Pose.identity(), range(30))[0])
    s.on_frame(_keyframe_update(e1, 1, 0.5, Pose.identity(), range(30, 60))[0])
    s.tick()
    assert s.stats.rigid_edges == 0 and len(s._rigid_pending[0]) == 1
    s.on_frame(_keyframe_update(e2, 2, 1.0, Pose.identity(), range(30))[0])
    s.tick()
    assert s.stats.rigid_edges == 1 and not s._rigid_pending[0]


def test_stale_session_handlers_are_retired():
    s = Server()
    _start(s, 1, sid=1)
    _start(s, 1, sid=2)
    assert s.handlers[(1, 1)].retired and not s.handlers[(1, 2)].retired


def test_undecodable_frames_are_counted_not_raised():
    s = Server()
    s.on_frame(b"\x00" * 10)
    assert s.stats.decode_errors == 1


SMALL = """
name: small_merge
seed: 3
duration: 14
world: {bounds: [[0, 0], [34, 16]], count: 1400}
noise: {pixel_sigma: 1.0, depth_sigma_frac: 0.005}
robots:
  - name: a
    waypoints: [[3, 8], [22, 8]]
    speed: 1.5
    cameras: [{id: 1}]
  - name: b
    waypoints: [[12, 8], [30, 8]]
    speed: 1.5
    cameras: [{id: 2}]
server: {pause_ticks: 3}
"""


@pytest.fixture(scope="module")
def small_run():
    sim = Simulation(parse_scenario(SMALL))
    counts = []
    real_tick = sim.server.tick

    def tick():
        before = len(sim.server.non_empty_maps())
        real_tick()
        counts.append((before, len(sim.server.non_empty_maps())))

    sim.server.tick = tick
    return sim, sim.run(), counts


def test_simulated_merge_end_to_end(small_run):
    sim, report, _ = small_run
    st = sim.server.stats
    assert report.final_map_count == 1 and st.merges == 1
    assert report.audit_failures == []
    assert max(report.ate.values()) < 0.05
    assert st.exclusion_violations == 0
    assert max(st.loop_checks.values()) == 1


def test_simulated_pause_routes_updates_through_the_backlog(small_run):
    st = small_run[0].server.stats
    assert st.applied_while_paused == 0
    assert st.backlog_applied == st.received_while_paused >= 1


def test_worker_never_increases_the_map_count(small_run):
    counts = small_run[2]
    assert counts and all(after <= before for before, after in counts)
