import numpy as np
import pytest

from collabslam import protocol as P
from collabslam.client import Client, ClientConfig, TrackResult
from collabslam.errors import TrackingLost, UnknownSession
from collabslam.geom import Pose, compose, inverse, pose_distance
from collabslam.mapcore import ElementId
from collabslam.simworld import (
    DEPTH_INTRINSICS,
    FRONT_MOUNT,
    MONO_INTRINSICS,
    CameraRig,
    NoiseModel,
    Trajectory,
    frame_stream,
    generate_world,
)

WORLD = generate_world(((0, 0), (40, 20)), 2500, seed=12)


def _stream(noise=NoiseModel(), waypoints=((3, 10), (25, 10), (25, 13)), rig=None):
    rig = rig or CameraRig(1, FRONT_MOUNT, DEPTH_INTRINSICS)
    return list(frame_stream(WORLD, Trajectory(list(waypoints)), rig, noise, seed=1))


def _client(**kw):
    kw.setdefault("window", 12)
    return Client(ClientConfig(1, DEPTH_INTRINSICS, FRONT_MOUNT, camera_id=1, **kw))


def _run(c, frames):
    for f, _ in frames:
        c.process_frame(f)


def test_noiseless_tracking_follows_truth_in_the_session_frame():
    frames = _stream()
    c = _client()
    worst = 0.0
    origin = None
    for f, truth in frames:
        c.process_frame(f)
        if origin is None:
            origin = truth.world_from_base
        expected = compose(inverse(origin), truth.world_from_cam)
        worst = max(worst, pose_distance(c.pose, expected)[0])
    assert c.session_id == 1
    assert worst < 1e-3


def test_tracking_lost_without_matches():
    frames = _stream()
    c = _client()
    _run(c, frames[:5])
    empty = frames[5][0]
    with pytest.raises(TrackingLost):
        c.track_frame(type(empty)(empty.timestamp, 1, np.zeros((0, 2)), np.zeros(0), [], np.zeros(0, np.uint64),
                                  frozenset()), c.pose)


def test_blind_interval_starts_a_new_session():
    rig = CameraRig(1, FRONT_MOUNT, DEPTH_INTRINSICS, blind=[(5.0, 6.0)])
    c = _client()
    _run(c, _stream(rig=rig))
    assert c.session_id == 2
    assert any(e.startswith("lost at") for e in c.events)
    assert c.ids.session_id == 2


def test_window_bound_and_memory_audit_every_frame():
    c = _client(window=6, augment_cap=50)
    for f, _ in _stream(noise=NoiseModel(pixel_sigma=1.0, depth_sigma_frac=0.005)):
        c.process_frame(f)
        assert c.audit_memory() == []
        assert len(c.window) <= 6
    assert c.peak_keyframes == 6
    assert c.session_id == 1


def test_keyframe_triggers():
    c = _client()
    frames = _stream()
    c.process_frame(frames[0][0])
    assert len(c.window) == 1
    last = c.window[-1].kf
    # same pose, full inlier count: no keyframe
    same = TrackResult(last.pose, len(last.observations), [])
    assert not c.needs_keyframe(same)
    few = TrackResult(last.pose, int(0.5 * len(last.observations)), [])
    assert c.needs_keyframe(few)
    moved = TrackResult(compose(last.pose, Pose.from_rt(np.eye(3), [0, 0, 0.6])), len(last.observations), [])
    assert c.needs_keyframe(moved)
    turned = TrackResult(compose(last.pose, Pose.from_yaw(np.radians(20))), len(last.observations), [])
    assert c.needs_keyframe(turned)
    assert c.last_track is None  # the initial keyframe is not a tracked frame


def test_first_messages_and_deltas():
    c = _client()
    frames = _stream()
    c.process_frame(frames[0][0])
    types = [m.msg_type for m in c.outbox]
    assert types == [P.MsgType.SESSION_START, P.MsgType.MAP_UPDATE]
    first = c.outbox[1]
    assert len(first.keyframes) == 1 and first.keyframes[0].full
    assert len(first.landmarks) == len(first.keyframes[0].observations)
    assert c.build_update_message() is None  # nothing changed since
    c.outbox.clear()
    _run(c, frames[1:40])
    ups = [m for m in c.outbox if m.msg_type == P.MsgType.MAP_UPDATE]
    assert ups
    sent_full = [e.id for m in ups for e in m.keyframes if e.full]
    assert len(sent_full) == len(set(sent_full))  # each keyframe's observations sent once
    assert all(P.decode(P.encode(m)).keyframes is not None for m in ups)


def test_depth_client_never_requests_place_recognition():
    c = _client()
    _run(c, _stream()[:60])
    assert all(m.msg_type != P.MsgType.PLACE_REC_REQUEST for m in c.outbox)


def _msg(c, mtype, **kw):
    return P.WireMessage(mtype, client_id=c.cfg.client_id, session_id=c.session_id, **kw)


def test_augment_dedup_and_cap():
    c = _client(augment_cap=10)
    c.process_frame(_stream()[0][0])
    ents = [P.LandmarkEntry(ElementId(9, 1, i), np.array([50.0 + i, 0, 1]), bytes([i]) + b"\xAB" * 31, 9)
            for i in range(8)]
    c.apply_server_message(_msg(c, P.MsgType.AUGMENT, map_id=3, landmarks=ents))
    assert len(c.augmented) == 8 and c.map_id == 3
    moved = [P.LandmarkEntry(e.id, e.position + 1, e.descriptor, 9) for e in ents]
    c.apply_server_message(_msg(c, P.MsgType.AUGMENT, landmarks=moved))
    assert len(c.augmented) == 8
    assert np.allclose(c.augmented[ents[0].id].position, ents[0].position + 1)
    # a window landmark id is never duplicated into the augmented set
    own = next(iter(c.landmarks.values()))
    c.apply_server_message(_msg(c, P.MsgType.AUGMENT, landmarks=[P.LandmarkEntry(own.id, own.position, own.descriptor)]))
    assert own.id not in c.augmented
    more = [P.LandmarkEntry(ElementId(9, 1, 100 + i), np.zeros(3), bytes([100 + i]) + b"\xCD" * 31, 9) for i in range(5)]
    c.apply_server_message(_msg(c, P.MsgType.AUGMENT, landmarks=more))
    assert len(c.augmented) == 10
    assert ents[0].id not in c.augmented  # least recently used went first
    assert c.audit_memory() == []


def test_identity_refresh_is_a_no_op():
    c = _client()
    _run(c, _stream()[:30])
    before_kf = [ck.kf.pose for ck in c.window]
    before_lm = {k: v.position.copy() for k, v in c.landmarks.items()}
    pose = c.pose
    c.apply_server_message(_msg(c, P.MsgType.LOCAL_REFRESH, control=P.LocalRefresh(c.map_id, Pose.identity())))
    for a, ck in zip(before_kf, c.window):
        assert np.allclose(a.t, ck.kf.pose.t) and np.allclose(a.R, ck.kf.pose.R)
    for k, v in before_lm.items():
        assert np.allclose(v, c.landmarks[k].position)
    assert np.allclose(pose.t, c.pose.t)


def test_refresh_applies_correction_everywhere():
    c = _client()
    _run(c, _stream()[:30])
    C = Pose.from_yaw(0.3, [1.0, -2.0, 0.0])
    kf0 = c.window[0].kf.pose
    lid, lm = next(iter(c.landmarks.items()))
    p0 = lm.position.copy()
    c.apply_server_message(_msg(c, P.MsgType.LOCAL_REFRESH, control=P.LocalRefresh(7, C)))
    assert c.map_id == 7
    assert np.allclose(c.window[0].kf.pose.t, compose(C, kf0).t)
    assert np.allclose(c.landmarks[lid].position, C.act(p0))
    assert c.build_update_message() is None  # corrected state is not echoed back


def test_messages_for_other_sessions_are_rejected():
    c = _client()
    c.process_frame(_stream()[0][0])
    with pytest.raises(UnknownSession):
        c.apply_server_message(P.WireMessage(P.MsgType.AUGMENT, client_id=1, session_id=99))


def test_monocular_waits_for_place_recognition():
    rig = CameraRig(2, FRONT_MOUNT, MONO_INTRINSICS, monocular=True)
    frames = _stream(rig=rig)
    c = Client(ClientConfig(2, MONO_INTRINSICS, FRONT_MOUNT, camera_id=2, monocular=True))
    _run(c, frames[:5])
    types = [m.msg_type for m in c.outbox]
    assert types == [P.MsgType.SESSION_START, P.MsgType.PLACE_REC_REQUEST]
    assert not c.initialized and c.pose is None
    c.outbox.clear()
    c.apply_server_message(_msg(c, P.MsgType.PLACE_REC_RESPONSE, control=P.PlaceRecResponse(False, 0, Pose.identity())))
    assert not c.initialized
    c.process_frame(frames[5][0])
    assert [m.msg_type for m in c.outbox] == [P.MsgType.PLACE_REC_REQUEST]
    assert c.init_frame_count == 2
    c.apply_server_message(_msg(c, P.MsgType.PLACE_REC_RESPONSE, control=P.PlaceRecResponse(True, 4, Pose.identity())))
    assert c.initialized and c.map_id == 4
