"""Binary wire format shared by clients and the server.

Frame layout (little-endian)::

    header   magic u32 | version u8 | msg_type u8 | client_id u32 | session_id u32
             | seq u64 | map_id u64 | kf_count u16 | lm_count u16 | prune_count u16
             | payload_len u32                                       (40 bytes)
    payload  keyframes[kf_count] | landmarks[lm_count] | pruned ids[prune_count]
             | control body (type specific) | optional u64 ack trailer

Element ids are ``client u32 | session u32 | seq u64``.  Poses are seven f64
``(qw, qx, qy, qz, tx, ty, tz)``.  On the wire landmark positions and pixel
observations are f32; map snapshots reuse the element codecs with f64
positions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import (
    BadMagic,
    BadVersion,
    CountMismatch,
    Overflow,
    Truncated,
    UnknownMsgType,
)
from .geom import CameraIntrinsics, Pose
from .mapcore import ElementId, Observation

MAGIC = 0x43534C4D
VERSION = 1
HEADER = struct.Struct("<IBBIIQQHHHI")
HEADER_SIZE = HEADER.size

_ID = struct.Struct("<IIQ")
_POSE = struct.Struct("<7d")
_KF_HEAD = struct.Struct("<BdI")  # flags, timestamp, camera id
_OBS32 = struct.Struct("<fff")
_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_F64 = struct.Struct("<d")
_INTRINSICS = struct.Struct("<8d")

KF_FULL = 0x01
KF_VIRTUAL = 0x02
DESCRIPTOR_SIZE = 32

U16_MAX = 0xFFFF
U32_MAX = 0xFFFFFFFF


class MsgType(IntEnum):
    MAP_UPDATE = 1
    AUGMENT = 2
    LOCAL_REFRESH = 3
    PLACE_REC_REQUEST = 4
    PLACE_REC_RESPONSE = 5
    SESSION_START = 6
    ACK = 7
    NACK_RESEND = 8


UNSEQUENCED = {MsgType.ACK, MsgType.NACK_RESEND}


@dataclass
class KeyframeEntry:
    id: ElementId
    timestamp: float
    pose: Pose
    camera_id: int = 0
    full: bool = True
    is_virtual: bool = False
    observations: list = field(default_factory=list)
    signature: tuple = ()


@dataclass
class LandmarkEntry:
    id: ElementId
    position: np.ndarray
    descriptor: bytes
    last_updated_by: int = 0
    observers: list = field(default_factory=list)


@dataclass
class Feature:
    u: float
    v: float
    depth: float
    descriptor: bytes


@dataclass
class SessionStart:
    monocular: bool
    camera_id: int
    intrinsics: CameraIntrinsics
    base_from_cam: Pose


@dataclass
class LocalRefresh:
    new_map_id: int
    correction: Pose  # new map frame from the client's previous frame


@dataclass
class PlaceRecRequest:
    timestamp: float
    camera_id: int
    signature: tuple
    features: list


@dataclass
class PlaceRecResponse:
    success: bool
    map_id: int
    pose: Pose


@dataclass
class Nack:
    seqs: list


@dataclass
class WireMessage:
    msg_type: MsgType
    client_id: int = 0
    session_id: int = 0
    seq: int = 0
    map_id: int = 0
    keyframes: list = field(default_factory=list)
    landmarks: list = field(default_factory=list)
    pruned_ids: list = field(default_factory=list)
    control: object = None
    ack: int | None = None


# ---------------------------------------------------------------------------
# element codecs
# ---------------------------------------------------------------------------


def _check(n: int, limit: int, what: str) -> None:
    if n > limit:
        raise Overflow(f"{what} count {n} exceeds {limit}")


def _pose_bytes(p: Pose) -> bytes:
    return _POSE.pack(*p.q, *p.t)


def encode_keyframe(kf: KeyframeEntry) -> bytes:
    flags = (KF_FULL if kf.full else 0) | (KF_VIRTUAL if kf.is_virtual else 0)
    parts = [_ID.pack(*kf.id), _KF_HEAD.pack(flags, kf.timestamp, kf.camera_id), _pose_bytes(kf.pose)]
    if kf.full:
        _check(len(kf.observations), U32_MAX, "observation")
        _check(len(kf.signature), U16_MAX, "signature")
        parts.append(_U32.pack(len(kf.observations)))
        for o in kf.observations:
            parts.append(_ID.pack(*o.landmark_id))
            parts.append(_OBS32.pack(o.u, o.v, o.depth))
        parts.append(_U16.pack(len(kf.signature)))
        if kf.signature:
            parts.append(struct.pack(f"<{len(kf.signature)}Q", *kf.signature))
    return b"".join(parts)


def encode_landmark(lm: LandmarkEntry, wide: bool = False) -> bytes:
    if len(lm.descriptor) != DESCRIPTOR_SIZE:
        raise ValueError("descriptor must be 32 bytes")
    _check(len(lm.observers), U16_MAX, "landmark observer")
    pos = struct.pack("<3d" if wide else "<3f", *lm.position)
    parts = [_ID.pack(*lm.id), pos, lm.descriptor, _U32.pack(lm.last_updated_by), _U16.pack(len(lm.observers))]
    for o in lm.observers:
        parts.append(_ID.pack(*o))
    return b"".join(parts)


class Reader:
    """Bounded cursor; reading past ``end`` raises :class:`CountMismatch`."""

    def __init__(self, buf, start: int, end: int):
        self.buf = buf
        self.pos = start
        self.end = end

    def take(self, s: struct.Struct):
        if self.pos + s.size > self.end:
            raise CountMismatch("payload shorter than declared contents")
        out = s.unpack_from(self.buf, self.pos)
        self.pos += s.size
        return out

    def raw(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise CountMismatch("payload shorter than declared contents")
        out = bytes(self.buf[self.pos : self.pos + n])
        self.pos += n
        return out

    def remaining(self) -> int:
        return self.end - self.pos


def decode_keyframe(r: Reader) -> KeyframeEntry:
    kid = ElementId(*r.take(_ID))
    flags, ts, cam = r.take(_KF_HEAD)
    pose = Pose.from_array(r.take(_POSE))
    full = bool(flags & KF_FULL)
    obs, sig = [], ()
    if full:
        (n,) = r.take(_U32)
        if n * (_ID.size + _OBS32.size) > r.remaining():
            raise CountMismatch("observation count exceeds payload")
        for _ in range(n):
            lid = ElementId(*r.take(_ID))
            u, v, d = r.take(_OBS32)
            obs.append(Observation(lid, u, v, d))
        (ns,) = r.take(_U16)
        if ns:
            sig = r.take(struct.Struct(f"<{ns}Q"))
    return KeyframeEntry(kid, ts, pose, cam, full, bool(flags & KF_VIRTUAL), obs, tuple(sig))


def decode_landmark(r: Reader, wide: bool = False) -> LandmarkEntry:
    lid = ElementId(*r.take(_ID))
    pos = np.array(r.take(struct.Struct("<3d" if wide else "<3f")), dtype=np.float64)
    desc = r.raw(DESCRIPTOR_SIZE)
    (owner,) = r.take(_U32)
    (n,) = r.take(_U16)
    observers = [ElementId(*r.take(_ID)) for _ in range(n)]
    return LandmarkEntry(lid, pos, desc, owner, observers)


# ---------------------------------------------------------------------------
# control bodies
# ---------------------------------------------------------------------------


def _encode_control(m: WireMessage) -> bytes:
    c = m.control
    t = m.msg_type
    if t in (MsgType.MAP_UPDATE, MsgType.AUGMENT):
        body = b""
    elif t == MsgType.LOCAL_REFRESH:
        body = _U64.pack(c.new_map_id) + _pose_bytes(c.correction)
    elif t == MsgType.SESSION_START:
        body = (
            _U8.pack(1 if c.monocular else 0)
            + _U32.pack(c.camera_id)
            + _INTRINSICS.pack(*c.intrinsics.as_tuple())
            + _pose_bytes(c.base_from_cam)
        )
    elif t == MsgType.PLACE_REC_REQUEST:
        _check(len(c.signature), U16_MAX, "signature")
        _check(len(c.features), U32_MAX, "feature")
        parts = [_F64.pack(c.timestamp), _U32.pack(c.camera_id), _U16.pack(len(c.signature))]
        if c.signature:
            parts.append(struct.pack(f"<{len(c.signature)}Q", *c.signature))
        parts.append(_U32.pack(len(c.features)))
        for f in c.features:
            parts.append(_OBS32.pack(f.u, f.v, f.depth) + f.descriptor)
        body = b"".join(parts)
    elif t == MsgType.PLACE_REC_RESPONSE:
        body = _U8.pack(1 if c.success else 0) + _U64.pack(c.map_id) + _pose_bytes(c.pose)
    elif t == MsgType.ACK:
        if m.ack is None:
            raise ValueError("ACK requires an ack value")
        return _U64.pack(m.ack)
    elif t == MsgType.NACK_RESEND:
        _check(len(c.seqs), U16_MAX, "nack")
        body = _U16.pack(len(c.seqs)) + struct.pack(f"<{len(c.seqs)}Q", *c.seqs)
    else:  # pragma: no cover - guarded by MsgType
        raise UnknownMsgType(int(t))
    if m.ack is not None:
        body += _U64.pack(m.ack)
    return body


def _decode_control(t: MsgType, r: Reader):
    if t in (MsgType.MAP_UPDATE, MsgType.AUGMENT):
        c = None
    elif t == MsgType.LOCAL_REFRESH:
        (mid,) = r.take(_U64)
        c = LocalRefresh(mid, Pose.from_array(r.take(_POSE)))
    elif t == MsgType.SESSION_START:
        (mono,) = r.take(_U8)
        (cam,) = r.take(_U32)
        fx, fy, cx, cy, w, h, dmin, dmax = r.take(_INTRINSICS)
        try:
            k = CameraIntrinsics(fx, fy, cx, cy, int(w), int(h), dmin, dmax)
        except ValueError as exc:
            raise CountMismatch(f"invalid intrinsics: {exc}") from None
        c = SessionStart(bool(mono), cam, k, Pose.from_array(r.take(_POSE)))
    elif t == MsgType.PLACE_REC_REQUEST:
        (ts,) = r.take(_F64)
        (cam,) = r.take(_U32)
        (ns,) = r.take(_U16)
        sig = r.take(struct.Struct(f"<{ns}Q")) if ns else ()
        (nf,) = r.take(_U32)
        if nf * (_OBS32.size + DESCRIPTOR_SIZE) > r.remaining():
            raise CountMismatch("feature count exceeds payload")
        feats = []
        for _ in range(nf):
            u, v, d = r.take(_OBS32)
            feats.append(Feature(u, v, d, r.raw(DESCRIPTOR_SIZE)))
        c = PlaceRecRequest(ts, cam, tuple(sig), feats)
    elif t == MsgType.PLACE_REC_RESPONSE:
        (ok,) = r.take(_U8)
        (mid,) = r.take(_U64)
        c = PlaceRecResponse(bool(ok), mid, Pose.from_array(r.take(_POSE)))
    elif t == MsgType.ACK:
        (ack,) = r.take(_U64)
        if r.remaining():
            raise CountMismatch("trailing bytes after ACK")
        return None, ack
    elif t == MsgType.NACK_RESEND:
        (n,) = r.take(_U16)
        c = Nack(list(r.take(struct.Struct(f"<{n}Q"))) if n else [])
    rem = r.remaining()
    if rem == 0:
        return c, None
    if rem == _U64.size:
        return c, r.take(_U64)[0]
    raise CountMismatch(f"{rem} unexplained bytes after control body")


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------


def encode(m: WireMessage) -> bytes:
    _check(len(m.keyframes), U16_MAX, "keyframe")
    _check(len(m.landmarks), U16_MAX, "landmark")
    _check(len(m.pruned_ids), U16_MAX, "prune")
    body = b"".join(
        [encode_keyframe(k) for k in m.keyframes]
        + [encode_landmark(l) for l in m.landmarks]
        + [_ID.pack(*i) for i in m.pruned_ids]
        + [_encode_control(m)]
    )
    _check(len(body), U32_MAX, "payload byte")
    head = HEADER.pack(
        MAGIC, VERSION, int(m.msg_type), m.client_id, m.session_id, m.seq, m.map_id,
        len(m.keyframes), len(m.landmarks), len(m.pruned_ids), len(body),
    )
    return head + body


def peek_header(b) -> tuple:
    """(msg_type, client_id, session_id, seq) without validating the body."""
    if len(b) < HEADER_SIZE:
        raise Truncated("frame shorter than header")
    f = HEADER.unpack_from(b, 0)
    return f[2], f[3], f[4], f[5]


def decode(b) -> WireMessage:
    b = memoryview(b)
    if len(b) < HEADER_SIZE:
        raise Truncated(f"{len(b)} bytes, header needs {HEADER_SIZE}")
    magic, ver, mtype, cid, sid, seq, mid, nk, nl, np_, plen = HEADER.unpack_from(b, 0)
    if magic != MAGIC:
        raise BadMagic(hex(magic))
    if ver != VERSION:
        raise BadVersion(ver)
    try:
        t = MsgType(mtype)
    except ValueError:
        raise UnknownMsgType(mtype) from None
    total = HEADER_SIZE + plen
    if len(b) < total:
        raise Truncated(f"have {len(b)} bytes, frame declares {total}")
    if len(b) > total:
        raise CountMismatch(f"{len(b) - total} trailing bytes")
    r = Reader(b, HEADER_SIZE, total)
    kfs = [decode_keyframe(r) for _ in range(nk)]
    lms = [decode_landmark(r) for _ in range(nl)]
    pruned = [ElementId(*r.take(_ID)) for _ in range(np_)]
    control, ack = _decode_control(t, r)
    return WireMessage(t, cid, sid, seq, mid, kfs, lms, pruned, control, ack)


def frame_for_stream(frame: bytes) -> bytes:
    """Stream-socket framing: u32 little-endian length prefix."""
    return _U32.pack(len(frame)) + frame


def split_stream(buf: bytearray) -> list[bytes]:
    """Pop every complete length-prefixed frame from ``buf`` (in place)."""
    out = []
    while len(buf) >= 4:
        (n,) = _U32.unpack_from(buf, 0)
        if len(buf) < 4 + n:
            break
        out.append(bytes(buf[4 : 4 + n]))
        del buf[: 4 + n]
    return out
