"""Planar polygon geometry in lon/lat degrees.

All areas are planar shoelace areas in squared degrees; the downscaling math
only ever uses ratios of areas within a small neighborhood, where the
projection distortion cancels. Polygons follow the usual ring model: one
exterior ring plus zero or more hole rings, each ring a closed coordinate
sequence. Rings may have either orientation on input; functions that care
normalize internally.

The workhorses are rectangle clipping (Sutherland-Hodgman, used to cut source
polygons along grid cell edges) and a general polygon intersection area built
from ear-clipping triangulation plus convex clipping. Sutherland-Hodgman can
emit zero-width bridge edges when a concave polygon leaves and re-enters the
clip window; those corridors have zero area, so every consumer here works off
areas, never off output topology.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .quadgrid import BBox, cell_bounds, cover_bbox

Point = tuple[float, float]
Ring = list[Point]

# Fragments below this planar area (square degrees) are numerical slivers
# produced by clipping and are dropped.
SLIVER_AREA = 1e-14

# Pairwise source-unit overlaps above this area trigger the overlap warning
# and the deterministic reattribution of the shared region.
OVERLAP_AREA = 1e-12


def _closed(ring: Ring) -> Ring:
    if not ring:
        return []
    return ring if ring[0] == ring[-1] else [*ring, ring[0]]


@dataclass
class Polygon:
    """Simple polygon with holes; rings are auto-closed on construction."""

    exterior: Ring
    holes: list[Ring] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.exterior = _closed([tuple(p) for p in self.exterior])
        if len(self.exterior) < 4:
            raise ValueError("exterior ring needs at least 3 distinct vertices")
        self.holes = [_closed([tuple(p) for p in h]) for h in self.holes]
        for h in self.holes:
            if len(h) < 4:
                raise ValueError("hole ring needs at least 3 distinct vertices")


@dataclass
class MultiPolygon:
    """Zero or more pairwise interior-disjoint polygons."""

    parts: list[Polygon]


def ring_area(ring: Ring) -> float:
    """Signed shoelace area, positive for counter-clockwise rings."""
    s = 0.0
    for (x0, y0), (x1, y1) in zip(ring, ring[1:]):
        s += x0 * y1 - x1 * y0
    return 0.5 * s


def polygon_area(p: Polygon | MultiPolygon) -> float:
    if isinstance(p, MultiPolygon):
        return sum(polygon_area(part) for part in p.parts)
    area = abs(ring_area(p.exterior))
    for h in p.holes:
        area -= abs(ring_area(h))
    return area


def _ring_moments(ring: Ring) -> tuple[float, float, float]:
    # signed area and first moments, holes contribute with opposite sign
    a = ring_area(ring)
    mx = 0.0
    my = 0.0
    for (x0, y0), (x1, y1) in zip(ring, ring[1:]):
        cross = x0 * y1 - x1 * y0
        mx += (x0 + x1) * cross
        my += (y0 + y1) * cross
    return a, mx / 6.0, my / 6.0


def polygon_centroid(p: Polygon | MultiPolygon) -> Point:
    """Area-weighted centroid; falls back to the vertex mean for slivers."""
    rings: list[tuple[Ring, float]] = []
    parts = p.parts if isinstance(p, MultiPolygon) else [p]
    for part in parts:
        ext = abs(ring_area(part.exterior))
        rings.append((part.exterior, ext))
        for h in part.holes:
            rings.append((h, -abs(ring_area(h))))
    area = 0.0
    mx = 0.0
    my = 0.0
    for ring, signed in rings:
        a, rx, ry = _ring_moments(ring)
        if a == 0.0:
            continue
        scale = signed / a
        area += signed
        mx += rx * scale
        my += ry * scale
    if abs(area) < 1e-30:
        pts = [q for ring, _ in rings for q in ring[:-1]]
        return (
            sum(q[0] for q in pts) / len(pts),
            sum(q[1] for q in pts) / len(pts),
        )
    return mx / area, my / area


def polygon_bounds(poly: Polygon) -> tuple[float, float, float, float]:
    xs = [p[0] for p in poly.exterior]
    ys = [p[1] for p in poly.exterior]
    return min(xs), min(ys), max(xs), max(ys)


def multipolygon_bounds(mp: MultiPolygon) -> tuple[float, float, float, float]:
    boxes = [polygon_bounds(p) for p in mp.parts]
    return (
        min(b[0] for b in boxes),
        min(b[1] for b in boxes),
        max(b[2] for b in boxes),
        max(b[3] for b in boxes),
    )


# ---------------------------------------------------------------------------
# clipping


def _clip_ring_halfplane(ring: Ring, a: Point, b: Point) -> Ring:
    """Keep the part of a closed ring left of (or on) the directed edge a->b."""
    ax, ay = a
    ex, ey = b[0] - ax, b[1] - ay

    def inside(p: Point) -> bool:
        return ex * (p[1] - ay) - ey * (p[0] - ax) >= 0.0

    def intersect(p: Point, q: Point) -> Point:
        dx, dy = q[0] - p[0], q[1] - p[1]
        denom = ex * dy - ey * dx
        t = (ey * (p[0] - ax) - ex * (p[1] - ay)) / denom
        return (p[0] + t * dx, p[1] + t * dy)

    out: Ring = []
    for p, q in zip(ring, ring[1:]):
        p_in, q_in = inside(p), inside(q)
        if p_in:
            out.append(p)
            if not q_in:
                out.append(intersect(p, q))
        elif q_in:
            out.append(intersect(p, q))
    return _closed(out)


def clip_ring_convex(ring: Ring, window: Ring) -> Ring:
    """Sutherland-Hodgman clip of a closed ring by a convex CCW window ring."""
    out = ring
    for a, b in zip(window, window[1:]):
        if len(out) < 4:
            return []
        out = _clip_ring_halfplane(out, a, b)
    return out if len(out) >= 4 else []


def _rect_ring(west: float, south: float, east: float, north: float) -> Ring:
    return [(west, south), (east, south), (east, north), (west, north), (west, south)]


def clip_polygon_rect(poly: Polygon, bbox: BBox) -> Polygon | None:
    """Intersect a polygon with an axis-aligned rectangle.

    Returns None when the intersection is empty or below the sliver threshold.
    Holes are clipped independently; a hole is always contained in its
    exterior, so the clipped hole stays inside the clipped exterior.
    """
    window = _rect_ring(bbox.west, bbox.south, bbox.east, bbox.north)
    ext = clip_ring_convex(poly.exterior, window)
    if not ext:
        return None
    area = abs(ring_area(ext))
    holes = []
    for h in poly.holes:
        hc = clip_ring_convex(h, window)
        if hc and abs(ring_area(hc)) >= SLIVER_AREA:
            holes.append(hc)
            area -= abs(ring_area(hc))
    if area < SLIVER_AREA:
        return None
    return Polygon(exterior=ext, holes=holes)


# ---------------------------------------------------------------------------
# triangulation and general intersection area


def _dedupe(ring: Ring) -> list[Point]:
    pts = ring[:-1] if ring and ring[0] == ring[-1] else list(ring)
    out: list[Point] = []
    for p in pts:
        if not out or p != out[-1]:
            out.append(p)
    if len(out) > 1 and out[0] == out[-1]:
        out.pop()
    return out


def _cross(o: Point, a: Point, b: Point) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _strictly_inside_triangle(p: Point, a: Point, b: Point, c: Point) -> bool:
    return _cross(a, b, p) > 0 and _cross(b, c, p) > 0 and _cross(c, a, p) > 0


def triangulate(ring: Ring) -> list[tuple[Point, Point, Point]]:
    """Ear-clipping triangulation of a simple closed ring (any orientation)."""
    pts = _dedupe(ring)
    if len(pts) < 3:
        return []
    if ring_area(_closed(list(pts))) < 0:
        pts.reverse()
    idx = list(range(len(pts)))
    triangles: list[tuple[Point, Point, Point]] = []
    while len(idx) > 3:
        clipped = False
        for k in range(len(idx)):
            i0 = idx[k - 1]
            i1 = idx[k]
            i2 = idx[(k + 1) % len(idx)]
            a, b, c = pts[i0], pts[i1], pts[i2]
            turn = _cross(a, b, c)
            if turn == 0.0:
                # collinear or spike vertex encloses no area, just remove it
                idx.pop(k)
                clipped = True
                break
            if turn < 0:
                continue
            if any(
                _strictly_inside_triangle(pts[j], a, b, c)
                for j in idx
                if j not in (i0, i1, i2)
            ):
                continue
            triangles.append((a, b, c))
            idx.pop(k)
            clipped = True
            break
        if not clipped:
            raise ValueError("ear clipping failed; ring is not simple")
    a, b, c = pts[idx[0]], pts[idx[1]], pts[idx[2]]
    if _cross(a, b, c) != 0.0:
        triangles.append((a, b, c))
    return triangles


def _is_rect(poly: Polygon) -> BBox | None:
    if poly.holes or len(poly.exterior) != 5:
        return None
    for (x0, y0), (x1, y1) in zip(poly.exterior, poly.exterior[1:]):
        if x0 != x1 and y0 != y1:
            return None
    w, s, e, n = polygon_bounds(poly)
    if w < e and s < n:
        return BBox(west=w, south=s, east=e, north=n)
    return None


def _ring_intersection_area(ring: Ring, other: Polygon) -> float:
    """Area of intersection between one simple ring and a polygon with holes."""
    rect = _is_rect(other)
    if rect is not None:
        window = _rect_ring(rect.west, rect.south, rect.east, rect.north)
        return abs(ring_area(clip_ring_convex(ring, window)))
    total = 0.0
    for tri in triangulate(ring):
        window = _closed(list(tri))
        total += abs(ring_area(clip_ring_convex(other.exterior, window)))
        for h in other.holes:
            total -= abs(ring_area(clip_ring_convex(h, window)))
    return total


def intersection_area(a: Polygon, b: Polygon) -> float:
    """Area of a AND b, holes on either side handled by inclusion-exclusion."""
    rect_a = _is_rect(a)
    if rect_a is not None:
        clipped = clip_polygon_rect(b, rect_a)
        return 0.0 if clipped is None else polygon_area(clipped)
    rect_b = _is_rect(b)
    if rect_b is not None:
        clipped = clip_polygon_rect(a, rect_b)
        return 0.0 if clipped is None else polygon_area(clipped)
    area = _ring_intersection_area(a.exterior, b)
    for h in a.holes:
        area -= _ring_intersection_area(h, b)
    return max(0.0, area)


def _intersect_parts(a: Polygon, b: Polygon) -> list[Polygon]:
    rect_a = _is_rect(a)
    if rect_a is not None:
        clipped = clip_polygon_rect(b, rect_a)
        return [] if clipped is None else [clipped]
    rect_b = _is_rect(b)
    if rect_b is not None:
        clipped = clip_polygon_rect(a, rect_b)
        return [] if clipped is None else [clipped]
    if a.holes and b.holes:
        raise ValueError(
            "intersection geometry of two polygons that both have holes needs "
            "one axis-aligned rectangle operand; use intersection_area instead"
        )
    if a.holes:
        a, b = b, a
    # a is hole-free: its triangles are convex windows, each window clips b
    # (exterior and holes) to one valid output piece
    parts: list[Polygon] = []
    for tri in triangulate(a.exterior):
        window = _closed(list(tri))
        ext = clip_ring_convex(b.exterior, window)
        if not ext:
            continue
        area = abs(ring_area(ext))
        holes = []
        for h in b.holes:
            hc = clip_ring_convex(h, window)
            if hc and abs(ring_area(hc)) >= SLIVER_AREA:
                holes.append(hc)
                area -= abs(ring_area(hc))
        if area >= SLIVER_AREA:
            parts.append(Polygon(exterior=ext, holes=holes))
    return parts


def intersect(
    a: Polygon | MultiPolygon, b: Polygon | MultiPolygon
) -> MultiPolygon:
    """Boolean intersection; the result's parts are interior-disjoint.

    One operand must be an axis-aligned rectangle or hole-free (the pipeline
    always intersects against grid cells, which are rectangles). Degenerate
    overlaps come back empty, never as an error.
    """
    parts_a = a.parts if isinstance(a, MultiPolygon) else [a]
    parts_b = b.parts if isinstance(b, MultiPolygon) else [b]
    out: list[Polygon] = []
    for pa in parts_a:
        ba = polygon_bounds(pa)
        for pb in parts_b:
            bb = polygon_bounds(pb)
            if ba[2] <= bb[0] or bb[2] <= ba[0] or ba[3] <= bb[1] or bb[3] <= ba[1]:
                continue
            out.extend(_intersect_parts(pa, pb))
    return MultiPolygon(parts=out)


def multipolygon_intersection_area(a: MultiPolygon, b: MultiPolygon) -> float:
    total = 0.0
    for pa in a.parts:
        bounds_a = polygon_bounds(pa)
        for pb in b.parts:
            bounds_b = polygon_bounds(pb)
            if (
                bounds_a[2] <= bounds_b[0]
                or bounds_b[2] <= bounds_a[0]
                or bounds_a[3] <= bounds_b[1]
                or bounds_b[3] <= bounds_a[1]
            ):
                continue
            total += intersection_area(pa, pb)
    return total


# ---------------------------------------------------------------------------
# point membership


def _ring_crossings(x: float, y: float, ring: Ring) -> int:
    n = 0
    for (x0, y0), (x1, y1) in zip(ring, ring[1:]):
        if (y0 > y) != (y1 > y) and x < x0 + (y - y0) * (x1 - x0) / (y1 - y0):
            n += 1
    return n


def point_in(pt: Point, poly: Polygon | MultiPolygon) -> bool:
    """Even-odd membership with half-open edge handling.

    Crossing counts use strict/non-strict comparisons such that a point on an
    edge shared by two polygons of a partition lands in exactly one of them.
    """
    if isinstance(poly, MultiPolygon):
        return any(point_in(pt, p) for p in poly.parts)
    x, y = pt
    crossings = _ring_crossings(x, y, poly.exterior)
    for h in poly.holes:
        crossings += _ring_crossings(x, y, h)
    return crossings % 2 == 1


def points_in_polygon(lon: np.ndarray, lat: np.ndarray, poly: Polygon) -> np.ndarray:
    """Vectorized even-odd test; same edge semantics as point_in."""
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    crossings = np.zeros(lon.shape, dtype=np.int64)
    for ring in [poly.exterior, *poly.holes]:
        xs = np.array([p[0] for p in ring])
        ys = np.array([p[1] for p in ring])
        x0, x1 = xs[:-1], xs[1:]
        y0, y1 = ys[:-1], ys[1:]
        dy = y1 - y0
        straddle = (y0[None, :] > lat[:, None]) != (y1[None, :] > lat[:, None])
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = x0[None, :] + (lat[:, None] - y0[None, :]) * (x1 - x0)[None, :] / dy[None, :]
        crossings += np.sum(straddle & (lon[:, None] < x_at), axis=1)
    return crossings % 2 == 1


def points_in_multipolygon(
    lon: np.ndarray, lat: np.ndarray, mp: MultiPolygon
) -> np.ndarray:
    mask = np.zeros(np.asarray(lon).shape, dtype=bool)
    for p in mp.parts:
        mask |= points_in_polygon(lon, lat, p)
    return mask


# ---------------------------------------------------------------------------
# polylines


def polyline_midpoint(coords: list[Point]) -> Point:
    """Point halfway along the polyline's planar arc length."""
    if not coords:
        raise ValueError("empty polyline")
    if len(coords) == 1:
        return coords[0]
    seg_len = [
        float(np.hypot(q[0] - p[0], q[1] - p[1])) for p, q in zip(coords, coords[1:])
    ]
    total = sum(seg_len)
    if total == 0.0:
        return coords[0]
    half = 0.5 * total
    acc = 0.0
    for (p, q), s in zip(zip(coords, coords[1:]), seg_len):
        if acc + s >= half:
            t = (half - acc) / s if s > 0 else 0.0
            return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))
        acc += s
    return coords[-1]


# ---------------------------------------------------------------------------
# hybrid support


@dataclass
class Fragment:
    """Intersection of one source unit with one grid cell."""

    unit_id: str
    quadkey: str
    pieces: list[Polygon]
    area: float


def build_hybrid_support(
    units: dict[str, MultiPolygon], zoom: int
) -> list[Fragment]:
    """Cut every source unit along zoom-level cell edges.

    Returns fragments sorted by (unit_id, quadkey). Clipping slivers are
    dropped. Per unit, the fragment areas sum to the unit area (the dropped
    slivers are below any meaningful tolerance). Source units are expected to
    be disjoint; where they are not, the shared region is detected cell by
    cell, a warning names the pair, and the overlap area is attributed to the
    lexicographically smaller unit id by subtracting it from the other one, so
    that summed fragment areas measure the units' union rather than counting
    the overlap twice.
    """
    frags: dict[tuple[str, str], Fragment] = {}
    for unit_id in sorted(units):
        for part in units[unit_id].parts:
            w, s, e, n = polygon_bounds(part)
            if not (w < e and s < n):
                continue
            for quadkey in cover_bbox(BBox(west=w, south=s, east=e, north=n), zoom):
                piece = clip_polygon_rect(part, cell_bounds(quadkey))
                if piece is None:
                    continue
                key = (unit_id, quadkey)
                frag = frags.get(key)
                if frag is None:
                    frags[key] = Fragment(unit_id, quadkey, [piece], polygon_area(piece))
                else:
                    frag.pieces.append(piece)
                    frag.area += polygon_area(piece)

    _attribute_overlaps(frags)

    out = [f for f in frags.values() if f.area >= SLIVER_AREA]
    out.sort(key=lambda f: (f.unit_id, f.quadkey))
    return out


def _attribute_overlaps(frags: dict[tuple[str, str], Fragment]) -> None:
    by_cell: dict[str, list[Fragment]] = {}
    for frag in frags.values():
        by_cell.setdefault(frag.quadkey, []).append(frag)
    overlap_total: dict[tuple[str, str], float] = {}
    adjustments: list[tuple[tuple[str, str], Fragment, float]] = []
    for cell_frags in by_cell.values():
        if len(cell_frags) < 2:
            continue
        cell_frags.sort(key=lambda f: f.unit_id)
        for i, fa in enumerate(cell_frags):
            mp_a = MultiPolygon(parts=list(fa.pieces))
            for fb in cell_frags[i + 1 :]:
                shared = multipolygon_intersection_area(
                    mp_a, MultiPolygon(parts=list(fb.pieces))
                )
                if shared > 0.0:
                    pair = (fa.unit_id, fb.unit_id)
                    overlap_total[pair] = overlap_total.get(pair, 0.0) + shared
                    adjustments.append((pair, fb, shared))
    flagged = {pair for pair, a in overlap_total.items() if a > OVERLAP_AREA}
    for pair in sorted(flagged):
        warnings.warn(
            f"source units {pair[0]!r} and {pair[1]!r} overlap "
            f"(area {overlap_total[pair]:.3e}); overlap attributed to {pair[0]!r}",
            stacklevel=3,
        )
    # shared edges between properly disjoint units clip to zero-area noise;
    # only true overlaps get reattributed
    for pair, frag, shared in adjustments:
        if pair in flagged:
            frag.area = max(0.0, frag.area - shared)
