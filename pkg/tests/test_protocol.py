import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabslam import protocol as P
from collabslam.errors import BadMagic, BadVersion, CountMismatch, DecodeError, Overflow, Truncated, UnknownMsgType, WindowOverrun
from collabslam.geom import CameraIntrinsics, Pose
from collabslam.mapcore import ElementId, Observation
from collabslam.transport import Endpoint, ReliableReceiver, ReliableSender

from .strategies import random_pose


def rid(rng):
    return ElementId(int(rng.integers(0, 2**32)), int(rng.integers(0, 2**32)), int(rng.integers(0, 2**63)))


def f32(x):
    return float(np.float32(x))


def random_message(rng) -> P.WireMessage:
    t = P.MsgType(int(rng.integers(1, 9)))
    m = P.WireMessage(t, int(rng.integers(0, 2**32)), int(rng.integers(0, 2**32)), int(rng.integers(0, 2**64, dtype=np.uint64)), int(rng.integers(0, 2**63)))
    if t in (P.MsgType.MAP_UPDATE, P.MsgType.AUGMENT, P.MsgType.LOCAL_REFRESH, P.MsgType.PLACE_REC_RESPONSE):
        for _ in range(rng.integers(0, 4)):
            full = bool(rng.integers(0, 2))
            obs = [Observation(rid(rng), f32(rng.uniform(0, 640)), f32(rng.uniform(0, 480)), f32(rng.choice([-1.0, rng.uniform(0.3, 10)]))) for _ in range(rng.integers(0, 5))] if full else []
            sig = tuple(int(x) for x in rng.integers(0, 2**63, size=rng.integers(0, 6))) if full else ()
            m.keyframes.append(P.KeyframeEntry(rid(rng), float(rng.uniform(0, 1e4)), random_pose(rng), int(rng.integers(0, 9)), full, bool(rng.integers(0, 2)), obs, sig))
        for _ in range(rng.integers(0, 4)):
            pos = np.array([f32(v) for v in rng.normal(scale=20, size=3)])
            m.landmarks.append(P.LandmarkEntry(rid(rng), pos, rng.bytes(32), int(rng.integers(0, 2**32)), [rid(rng) for _ in range(rng.integers(0, 4))]))
        m.pruned_ids = [rid(rng) for _ in range(rng.integers(0, 3))]
    if t == P.MsgType.LOCAL_REFRESH:
        m.control = P.LocalRefresh(int(rng.integers(0, 2**63)), random_pose(rng))
    elif t == P.MsgType.PLACE_REC_RESPONSE:
        m.control = P.PlaceRecResponse(bool(rng.integers(0, 2)), int(rng.integers(0, 2**63)), random_pose(rng))
    elif t == P.MsgType.SESSION_START:
        k = CameraIntrinsics(400.0, 410.0, 320.5, 240.0, 640, 480, 0.3, float(rng.choice([10.0, 25.0])))
        m.control = P.SessionStart(bool(rng.integers(0, 2)), int(rng.integers(0, 5)), k, random_pose(rng))
    elif t == P.MsgType.PLACE_REC_REQUEST:
        feats = [P.Feature(f32(rng.uniform(0, 640)), f32(rng.uniform(0, 480)), -1.0, rng.bytes(32)) for _ in range(rng.integers(0, 5))]
        m.control = P.PlaceRecRequest(float(rng.uniform(0, 100)), 0, tuple(int(x) for x in rng.integers(0, 2**63, size=3)), feats)
    elif t == P.MsgType.NACK_RESEND:
        m.control = P.Nack([int(x) for x in rng.integers(1, 10**6, size=rng.integers(0, 5))])
    if t == P.MsgType.ACK or rng.integers(0, 2):
        m.ack = int(rng.integers(0, 2**40))
    return m


def same_pose(a: Pose, b: Pose):
    return np.array_equal(a.q, b.q) and np.array_equal(a.t, b.t)


def assert_same(a: P.WireMessage, b: P.WireMessage):
    assert (a.msg_type, a.client_id, a.session_id, a.seq, a.map_id, a.ack) == (b.msg_type, b.client_id, b.session_id, b.seq, b.map_id, b.ack)
    assert a.pruned_ids == b.pruned_ids
    assert len(a.keyframes) == len(b.keyframes) and len(a.landmarks) == len(b.landmarks)
    for x, y in zip(a.keyframes, b.keyframes):
        assert (x.id, x.timestamp, x.camera_id, x.full, x.is_virtual, x.signature) == (y.id, y.timestamp, y.camera_id, y.full, y.is_virtual, y.signature)
        assert same_pose(x.pose, y.pose)
        assert [tuple(o) for o in x.observations] == [tuple(o) for o in y.observations]
    for x, y in zip(a.landmarks, b.landmarks):
        assert (x.id, x.descriptor, x.last_updated_by, x.observers) == (y.id, y.descriptor, y.last_updated_by, y.observers)
        assert np.array_equal(x.position, y.position)
    ca, cb = a.control, b.control
    assert type(ca) is type(cb)
    if isinstance(ca, (P.LocalRefresh, P.PlaceRecResponse)):
        pa, pb = (ca.correction, cb.correction) if isinstance(ca, P.LocalRefresh) else (ca.pose, cb.pose)
        assert same_pose(pa, pb)
        assert ca.__dict__.keys() == cb.__dict__.keys()
    elif isinstance(ca, P.SessionStart):
        assert (ca.monocular, ca.camera_id, ca.intrinsics) == (cb.monocular, cb.camera_id, cb.intrinsics)
        assert same_pose(ca.base_from_cam, cb.base_from_cam)
    elif ca is not None:
        assert ca == cb


def test_round_trip_ten_thousand_random_messages():
    rng = np.random.default_rng(2024)
    for _ in range(10_000):
        m = random_message(rng)
        b = P.encode(m)
        d = P.decode(b)
        assert_same(m, d)
        assert P.encode(d) == b


def test_header_size_matches_field_widths():
    widths = 4 + 1 + 1 + 4 + 4 + 8 + 8 + 2 + 2 + 2 + 4
    assert P.HEADER_SIZE == widths == struct.calcsize("<IBBIIQQHHHI") == 40


def test_empty_map_update_is_header_only():
    b = P.encode(P.WireMessage(P.MsgType.MAP_UPDATE, 1, 1, 1))
    assert len(b) == P.HEADER_SIZE


def test_one_keyframe_no_observations_payload():
    kf = P.KeyframeEntry(ElementId(1, 1, 1), 0.5, Pose.from_yaw(0.3, [1, 2, 3]), full=False)
    b = P.encode(P.WireMessage(P.MsgType.MAP_UPDATE, 1, 1, 1, keyframes=[kf]))
    payload = b[P.HEADER_SIZE :]
    # id 16 + flags 1 + timestamp 8 + camera 4 + one 7 x f64 pose block
    assert len(payload) == 16 + 1 + 8 + 4 + 56
    assert payload[29:] == struct.pack("<7d", *kf.pose.q, *kf.pose.t)
    full = P.encode(P.WireMessage(P.MsgType.MAP_UPDATE, 1, 1, 1, keyframes=[P.KeyframeEntry(kf.id, 0.5, kf.pose)]))
    assert len(full) - len(b) == 4 + 2  # empty observation count + empty signature count


def valid_frame():
    rng = np.random.default_rng(5)
    while True:
        m = random_message(rng)
        if m.msg_type == P.MsgType.MAP_UPDATE and m.keyframes and m.landmarks:
            return P.encode(m)


def test_every_header_byte_flip_is_caught_or_harmless():
    b = valid_frame()
    for i in range(P.HEADER_SIZE):
        for bit in range(8):
            bad = bytearray(b)
            bad[i] ^= 1 << bit
            try:
                m = P.decode(bytes(bad))
            except (BadMagic, CountMismatch, Truncated, BadVersion, UnknownMsgType):
                continue
            # only identity fields can change undetected (no checksum); the
            # message is still complete and re-encodes to the flipped bytes
            assert 6 <= i < 30
            assert P.encode(m) == bytes(bad)
        if i < 4:
            with pytest.raises(BadMagic):
                bad = bytearray(b)
                bad[i] ^= 0xFF
                P.decode(bytes(bad))
    for i in range(30, 40):  # counts and payload length
        bad = bytearray(b)
        bad[i] ^= 0x01
        with pytest.raises((CountMismatch, Truncated)):
            P.decode(bytes(bad))


def test_truncation_and_trailing_bytes():
    b = valid_frame()
    with pytest.raises(Truncated):
        P.decode(b[:-1])
    with pytest.raises(Truncated):
        P.decode(b[:10])
    with pytest.raises(CountMismatch):
        P.decode(b + b"\x00")


def test_bad_version_and_type():
    b = bytearray(valid_frame())
    b[4] = 2
    with pytest.raises(BadVersion):
        P.decode(bytes(b))
    b[4] = 1
    b[5] = 99
    with pytest.raises(UnknownMsgType):
        P.decode(bytes(b))


def test_overflow():
    kfs = [P.KeyframeEntry(ElementId(1, 1, 1), 0.0, Pose(), full=False)] * 0x10000
    with pytest.raises(Overflow):
        P.encode(P.WireMessage(P.MsgType.MAP_UPDATE, keyframes=kfs))
    big_sig = P.KeyframeEntry(ElementId(1, 1, 1), 0.0, Pose(), signature=tuple(range(0x10000)))
    with pytest.raises(Overflow):
        P.encode(P.WireMessage(P.MsgType.MAP_UPDATE, keyframes=[big_sig]))


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=200))
def test_decode_never_returns_garbage(blob):
    try:
        m = P.decode(blob)
    except DecodeError:
        return
    assert P.encode(m) == blob


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.binary(min_size=1, max_size=60))
def test_decode_random_payload_behind_valid_header(seed, noise):
    head = P.HEADER.pack(P.MAGIC, 1, 1, 1, 1, 1, 0, seed % 3, seed % 2, seed % 4, len(noise))
    try:
        m = P.decode(head + noise)
    except DecodeError:
        return
    assert P.encode(m) == head + noise


def test_stream_framing():
    frames = [P.encode(P.WireMessage(P.MsgType.ACK, ack=i)) for i in range(3)]
    buf = bytearray(b"".join(P.frame_for_stream(f) for f in frames))
    buf += P.frame_for_stream(frames[0])[:7]
    assert P.split_stream(buf) == frames
    assert len(buf) == 7


# ---------------------------------------------------------------------------
# reliability
# ---------------------------------------------------------------------------


def update(n_kf=0):
    return P.WireMessage(P.MsgType.MAP_UPDATE)


def pump(sender: Endpoint, receiver: Endpoint, n, drop=(), reorder=False):
    """Send n updates sender->receiver, dropping seqs in ``drop`` once; drive idle rounds to quiescence."""
    delivered, nack_trace = [], []
    dropped = set()
    forward, back = [], []
    for _ in range(n):
        forward.append(sender.send(update()))
    if reorder:
        forward.reverse()
    for _ in range(50):
        while forward or back:
            while forward:
                f = forward.pop(0)
                m = P.decode(f)
                if m.msg_type == P.MsgType.MAP_UPDATE and m.seq in drop and m.seq not in dropped:
                    dropped.add(m.seq)
                    continue
                out, replies = receiver.receive(m)
                delivered += [x.seq for x in out]
                for r in replies:
                    rm = P.decode(r)
                    if rm.msg_type == P.MsgType.NACK_RESEND:
                        nack_trace.append((m.seq, list(rm.control.seqs)))
                back += replies
            while back:
                _, replies = sender.receive(P.decode(back.pop(0)))
                forward += replies
        back += receiver.idle()
        forward += sender.idle()
        if not (forward or back) and sender.settled() and receiver.settled():
            break
    return delivered, nack_trace


def test_lossless_in_order_no_nacks():
    a, b = Endpoint(1, 1), Endpoint(1, 1)
    delivered, nacks = pump(a, b, 10)
    assert delivered == list(range(1, 11)) and nacks == []
    assert a.sender.pending == {}


def test_drop_five_of_ten_nacked_on_six():
    a, b = Endpoint(1, 1), Endpoint(1, 1)
    delivered, nacks = pump(a, b, 10, drop={5})
    assert nacks[0] == (6, [5])
    assert sorted(delivered) == list(range(1, 11)) and delivered == list(range(1, 11))


def test_lost_tail_recovered_by_idle_retransmit():
    a, b = Endpoint(1, 1), Endpoint(1, 1)
    delivered, _ = pump(a, b, 10, drop={10})
    assert delivered == list(range(1, 11))
    assert a.stats.retransmits >= 1


def test_reordered_delivery_is_in_order():
    a, b = Endpoint(1, 1), Endpoint(1, 1)
    delivered, _ = pump(a, b, 20, reorder=True)
    assert delivered == list(range(1, 21))


def test_duplicates_are_ignored():
    a, b = Endpoint(1, 1), Endpoint(1, 1)
    f = a.send(update())
    out1, _ = b.receive(P.decode(f))
    out2, _ = b.receive(P.decode(f))
    assert len(out1) == 1 and out2 == [] and b.stats.duplicates == 1


def test_window_overrun_on_300_consecutive_drops():
    a, b = Endpoint(1, 1, window=256), Endpoint(1, 1, window=256)
    frames = [a.send(update()) for _ in range(301)]
    with pytest.raises(WindowOverrun):
        b.receive(P.decode(frames[300]))
    s = ReliableSender(256)
    for _ in range(300):
        s.stamp(update())
    with pytest.raises(WindowOverrun):
        s.resend([1])


def test_receiver_window_accepts_gap_within_bound():
    r = ReliableReceiver(8)
    m = update()
    m.seq = 8
    out, missing, _ = r.accept(m)
    assert out == [] and missing == list(range(1, 8))
    m2 = update()
    m2.seq = 9
    with pytest.raises(WindowOverrun):
        r.accept(m2)
