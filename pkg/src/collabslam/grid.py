"""2D grid hash over landmark x-y coordinates with frustum retrieval.

The map frame is ground-aligned (z up), so landmarks spread over x and y and
cluster in height; indexing the ground plane alone is enough.  Retrieval walks
the grid cells under the 2D convex hull of the camera frustum's eight
vertices, then reprojects each candidate.

Cells whose centre falls just outside the hull can still hold visible
landmarks.  Retrieval therefore dilates the hull by half a cell diagonal before
the centre test, which makes it exact w.r.t. brute-force projection.
"""

from __future__ import annotations

import math
from itertools import chain
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable

import numpy as np

from .errors import Degenerate
from .geom import CameraIntrinsics, Pose, frustum_vertices, inverse, project_many

if TYPE_CHECKING:
    from .mapcore import Landmark, MapRecord

Cell = tuple[int, int]


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull_2d(points) -> np.ndarray:
    """Counter-clockwise hull vertices (monotone chain); collinear points dropped."""
    pts = sorted({(float(p[0]), float(p[1])) for p in np.asarray(points, dtype=float)})
    if len(pts) < 3:
        raise Degenerate("need at least 3 distinct points")

    def half(seq):
        out: list = []
        for p in seq:
            while len(out) >= 2 and _cross(out[-2], out[-1], p) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(reversed(pts))
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise Degenerate("all points collinear")
    return np.array(hull)


def points_in_polygon(poly: np.ndarray, pts: np.ndarray, margin: float = 0.0) -> np.ndarray:
    """Boundary-inclusive half-plane test against a CCW convex polygon.

    With ``margin > 0`` each edge is pushed outward by that distance.
    """
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    inside = np.ones(len(pts), dtype=bool)
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        e = b - a
        length = math.hypot(e[0], e[1])
        cross = e[0] * (pts[:, 1] - a[1]) - e[1] * (pts[:, 0] - a[0])
        inside &= cross >= -margin * length
    return inside


@dataclass
class RetrievalStats:
    bbox_cells: int = 0
    cells_visited: int = 0
    cells_hit: int = 0
    candidates: int = 0
    returned: int = 0


@dataclass
class GridIndex:
    cell_size: float = 2.0
    cells: dict = field(default_factory=dict)  # Cell -> set[ElementId]
    reverse: dict = field(default_factory=dict)  # ElementId -> Cell
    # Cell -> (landmarks, (n, 3) positions); dropped whenever anything in the cell moves
    _packed: dict = field(default_factory=dict, repr=False, compare=False)

    def cell_of(self, p) -> Cell:
        return (math.floor(p[0] / self.cell_size), math.floor(p[1] / self.cell_size))

    def insert_or_move(self, lid, p) -> None:
        cell = self.cell_of(p)
        old = self.reverse.get(lid)
        self._packed.pop(cell, None)
        if old == cell:
            return
        if old is not None:
            self._discard(lid, old)
        self.cells.setdefault(cell, set()).add(lid)
        self.reverse[lid] = cell

    def remove(self, lid) -> bool:
        old = self.reverse.pop(lid, None)
        if old is None:
            return False
        self._discard(lid, old)
        return True

    def _discard(self, lid, cell: Cell) -> None:
        self._packed.pop(cell, None)
        bucket = self.cells.get(cell)
        if bucket is not None:
            bucket.discard(lid)
            if not bucket:
                del self.cells[cell]

    def __len__(self) -> int:
        return len(self.reverse)

    def __contains__(self, lid) -> bool:
        return lid in self.reverse

    def ids_in_cells(self, cells: Iterable[Cell]) -> list:
        out = []
        for c in cells:
            bucket = self.cells.get(c)
            if bucket:
                out.extend(bucket)
        return out

    def packed(self, cell: Cell, landmarks: dict):
        """Landmarks of ``cell`` in id order with their stacked positions, or None if empty."""
        hit = self._packed.get(cell)
        if hit is None:
            bucket = self.cells.get(cell)
            if not bucket:
                return None
            lms = tuple(landmarks[i] for i in sorted(bucket))
            hit = (lms, np.array([lm.position for lm in lms]))
            self._packed[cell] = hit
        return hit

    def audit(self, positions: dict | None = None) -> list[str]:
        """Consistency problems between forward/reverse maps (and positions, if given)."""
        problems = []
        seen = set()
        for cell, bucket in self.cells.items():
            if not bucket:
                problems.append(f"empty bucket kept for cell {cell}")
            for lid in bucket:
                if lid in seen:
                    problems.append(f"{lid} indexed in more than one cell")
                seen.add(lid)
                if self.reverse.get(lid) != cell:
                    problems.append(f"{lid} reverse entry {self.reverse.get(lid)} != {cell}")
        if seen != set(self.reverse):
            problems.append("reverse map and cells disagree on membership")
        if positions is not None:
            if set(positions) != set(self.reverse):
                problems.append("indexed ids differ from landmark ids")
            for lid, p in positions.items():
                if lid in self.reverse and self.cell_of(p) != self.reverse[lid]:
                    problems.append(f"{lid} stored in {self.reverse[lid]} but lies in {self.cell_of(p)}")
            for cell, (lms, pts) in self._packed.items():
                if [lm.id for lm in lms] != sorted(self.cells.get(cell, ())):
                    problems.append(f"stale landmark list cached for cell {cell}")
                elif any(not np.array_equal(positions.get(lm.id), q) for lm, q in zip(lms, pts)):
                    problems.append(f"stale positions cached for cell {cell}")
        return problems

    def candidate_cells(self, hull: np.ndarray, margin: float, stats: RetrievalStats | None = None) -> list[Cell]:
        cs = self.cell_size
        lo = hull.min(axis=0) - margin
        hi = hull.max(axis=0) + margin
        i0, i1 = math.ceil(lo[0] / cs - 0.5), math.floor(hi[0] / cs - 0.5)
        j0, j1 = math.ceil(lo[1] / cs - 0.5), math.floor(hi[1] / cs - 0.5)
        if i1 < i0 or j1 < j0:
            return []
        ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
        ii, jj = ii.ravel(), jj.ravel()
        centers = np.stack([(ii + 0.5) * cs, (jj + 0.5) * cs], axis=1)
        inside = points_in_polygon(hull, centers, margin)
        if stats is not None:
            stats.bbox_cells += len(ii)
            stats.cells_visited += len(ii)
        return list(zip(ii[inside].tolist(), jj[inside].tolist()))


def view_hull(k: CameraIntrinsics, world_from_cam: Pose) -> np.ndarray:
    """2D hull of the projected frustum; a degenerate hull falls back to its bbox."""
    xy = frustum_vertices(k, world_from_cam)[:, :2]
    try:
        return convex_hull_2d(xy)
    except Degenerate:
        lo, hi = xy.min(axis=0), xy.max(axis=0)
        return np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])


def retrieve_in_view(
    g: GridIndex,
    map_: "MapRecord",
    k: CameraIntrinsics,
    world_from_cam: Pose,
    dilate: bool = True,
    stats: RetrievalStats | None = None,
) -> list["Landmark"]:
    """Landmarks of ``map_`` visible from ``world_from_cam``."""
    if not g.cells:
        return []
    hull = view_hull(k, world_from_cam)
    margin = g.cell_size * math.sqrt(2.0) / 2.0 if dilate else 0.0
    cells = g.candidate_cells(hull, margin, stats)
    packs = [p for p in (g.packed(c, map_.landmarks) for c in cells) if p is not None]
    lms = list(chain.from_iterable(p[0] for p in packs))
    if stats is not None:
        stats.cells_hit += len(packs)
        stats.candidates += len(lms)
    if not lms:
        return []
    pts = np.concatenate([p[1] for p in packs])
    mask, _, _ = project_many(k, inverse(world_from_cam), pts)
    out = [lm for lm, ok in zip(lms, mask) if ok]
    if stats is not None:
        stats.returned += len(out)
    return out
