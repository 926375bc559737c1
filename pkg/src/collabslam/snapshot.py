"""Versioned binary dump of the whole map database.

Layout (little-endian)::

    "CSNP" | version u16 | map_count u32
    per map: map_id u64 | origin pose 7d | cell_size f64
             | kf_count u32 | keyframes (wire codec, always full)
             | lm_count u32 | landmarks (wire codec, f64 positions) + version u32
             | pending_count u32 | (landmark id, u16 n, n keyframe ids)
             | edge_count u32 | (a id, b id, pose 7d, weight f64, kind u8)

Elements are written in id order so equal databases give equal bytes.
"""

from __future__ import annotations

import struct

from . import protocol as P
from .errors import BadMagic, BadVersion, CountMismatch
from .geom import Pose
from .grid import GridIndex
from .mapcore import ElementId, Keyframe, Landmark, MapRecord
from .optim.pgo import Edge

SNAP_MAGIC = b"CSNP"
SNAP_VERSION = 1
_HEAD = struct.Struct("<4sHI")
_MAP = struct.Struct("<Q7dd")
_ID = struct.Struct("<IIQ")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_EDGE_TAIL = struct.Struct("<7ddB")
_KINDS = ("odometry", "loop", "rigid")


def encode_snapshot(maps: dict[int, MapRecord]) -> bytes:
    parts = [_HEAD.pack(SNAP_MAGIC, SNAP_VERSION, len(maps))]
    for mid in sorted(maps):
        m = maps[mid]
        cell = m.grid.cell_size if m.grid is not None else 0.0
        parts.append(_MAP.pack(mid, *m.origin_note.to_array(), cell))
        parts.append(_U32.pack(len(m.keyframes)))
        for kid in sorted(m.keyframes):
            kf = m.keyframes[kid]
            parts.append(P.encode_keyframe(P.KeyframeEntry(
                kf.id, kf.timestamp, kf.pose, kf.camera_id, True, kf.is_virtual,
                list(kf.observations), tuple(sorted(kf.signature)))))
        parts.append(_U32.pack(len(m.landmarks)))
        for lid in sorted(m.landmarks):
            lm = m.landmarks[lid]
            parts.append(P.encode_landmark(P.LandmarkEntry(
                lm.id, lm.position, lm.descriptor, lm.last_updated_by, sorted(lm.observing_keyframes)), wide=True))
            parts.append(_U32.pack(lm.version))
        parts.append(_U32.pack(len(m.pending)))
        for lid in sorted(m.pending):
            kfs = sorted(m.pending[lid])
            parts.append(_ID.pack(*lid) + _U16.pack(len(kfs)) + b"".join(_ID.pack(*k) for k in kfs))
        parts.append(_U32.pack(len(m.edges)))
        for e in m.edges:
            parts.append(_ID.pack(*e.a) + _ID.pack(*e.b)
                         + _EDGE_TAIL.pack(*e.measured.to_array(), e.weight, _KINDS.index(e.kind)))
    return b"".join(parts)


def decode_snapshot(buf: bytes) -> dict[int, MapRecord]:
    if len(buf) < _HEAD.size:
        raise CountMismatch("snapshot shorter than its header")
    magic, version, n_maps = _HEAD.unpack_from(buf, 0)
    if magic != SNAP_MAGIC:
        raise BadMagic(f"not a snapshot file (magic {magic!r})")
    if version != SNAP_VERSION:
        raise BadVersion(f"snapshot version {version}, expected {SNAP_VERSION}")
    r = P.Reader(buf, _HEAD.size, len(buf))
    maps = {}
    for _ in range(n_maps):
        mid, *rest = r.take(_MAP)
        origin, cell = Pose.from_array(rest[:7]), rest[7]
        m = MapRecord(mid, grid=GridIndex(cell) if cell > 0 else None, origin_note=origin)
        for _ in range(r.take(_U32)[0]):
            e = P.decode_keyframe(r)
            m.keyframes[e.id] = Keyframe(e.id, e.timestamp, e.pose, e.camera_id, list(e.observations),
                                         frozenset(e.signature), mid, e.is_virtual)
        for _ in range(r.take(_U32)[0]):
            e = P.decode_landmark(r, wide=True)
            (ver,) = r.take(_U32)
            m.landmarks[e.id] = Landmark(e.id, e.position, e.descriptor, set(e.observers), e.last_updated_by, mid, ver)
            if m.grid is not None:
                m.grid.insert_or_move(e.id, m.landmarks[e.id].position)
        for _ in range(r.take(_U32)[0]):
            lid = ElementId(*r.take(_ID))
            (n,) = r.take(_U16)
            m.pending[lid] = {ElementId(*r.take(_ID)) for _ in range(n)}
        for _ in range(r.take(_U32)[0]):
            a = ElementId(*r.take(_ID))
            b = ElementId(*r.take(_ID))
            *pose, w, kind = r.take(_EDGE_TAIL)
            m.edges.append(Edge(a, b, Pose.from_array(pose), w, _KINDS[kind]))
        maps[mid] = m
    if r.remaining():
        raise CountMismatch(f"{r.remaining()} trailing bytes in snapshot")
    return maps


def snapshot_elements(maps: dict[int, MapRecord]) -> dict:
    """Element id -> (kind, map id, pose or position array) for set comparisons."""
    out = {}
    for mid, m in maps.items():
        for kid, kf in m.keyframes.items():
            out[kid] = ("kf", mid, kf.pose.to_array())
        for lid, lm in m.landmarks.items():
            out[lid] = ("lm", mid, lm.position.copy())
    return out


def summarize(maps: dict[int, MapRecord]) -> list[dict]:
    rows = []
    for mid in sorted(maps):
        m = maps[mid]
        clients = sorted({k.client_id for k in m.keyframes})
        rows.append({
            "map_id": mid,
            "keyframes": len(m.real_keyframes()),
            "virtual_keyframes": len(m.keyframes) - len(m.real_keyframes()),
            "landmarks": len(m.landmarks),
            "edges": len(m.edges),
            "clients": clients,
        })
    return rows
