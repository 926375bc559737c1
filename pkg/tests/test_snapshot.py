import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabslam.errors import BadMagic, BadVersion, CountMismatch
from collabslam.grid import GridIndex
from collabslam.mapcore import ElementId, Landmark, MapRecord, audit, upsert_landmark
from collabslam.snapshot import decode_snapshot, encode_snapshot, snapshot_elements, summarize

from .test_server import _two_maps


@pytest.fixture(scope="module")
def merged():
    s, *_ = _two_maps()
    s.tick()
    return s.maps


def test_round_trip_is_byte_identical(merged):
    raw = encode_snapshot(merged)
    back = decode_snapshot(raw)
    assert encode_snapshot(back) == raw
    assert all(audit(m) == [] for m in back.values())
    a, b = snapshot_elements(merged), snapshot_elements(back)
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k][2], b[k][2]) for k in a)


def test_edges_and_summary_survive(merged):
    back = decode_snapshot(encode_snapshot(merged))
    (mid,) = [m for m in merged if not merged[m].is_empty()]
    assert [e.kind for e in back[mid].edges] == [e.kind for e in merged[mid].edges] == ["loop"]
    assert summarize(back) == summarize(merged)
    row = [r for r in summarize(back) if r["map_id"] == mid][0]
    assert row["clients"] == [1, 2] and row["keyframes"] == 2 and row["landmarks"] == 80


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(*[st.floats(-1e4, 1e4, allow_nan=False)] * 3), max_size=30))
def test_positions_round_trip_in_double_precision(points):
    m = MapRecord(3, grid=GridIndex(2.0))
    for i, p in enumerate(points):
        upsert_landmark(m, Landmark(ElementId(1, 1, i + 1), np.array(p), bytes(32), map_id=3))
    back = decode_snapshot(encode_snapshot({3: m}))[3]
    for lid, lm in m.landmarks.items():
        assert np.array_equal(back.landmarks[lid].position, lm.position)
    assert back.grid.cells == m.grid.cells


def test_empty_database():
    assert decode_snapshot(encode_snapshot({})) == {}


def test_decode_errors(merged):
    raw = encode_snapshot(merged)
    with pytest.raises(BadMagic):
        decode_snapshot(b"XXXX" + raw[4:])
    with pytest.raises(BadVersion):
        decode_snapshot(raw[:4] + b"\x09\x00" + raw[6:])
    with pytest.raises(CountMismatch):
        decode_snapshot(raw + b"\x00")
    with pytest.raises(CountMismatch):
        decode_snapshot(raw[:3])
    with pytest.raises(CountMismatch):
        decode_snapshot(raw[:-5])
