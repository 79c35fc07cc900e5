"""Web-Mercator quadkey tile math: coordinate/tile/quadkey conversions and grids.

Uses the standard 256-pixel Web-Mercator tile scheme: at zoom z the world is a
2^z x 2^z grid, a cell is addressed either by integer (x, y) or by a base-4
quadkey string whose length equals the zoom. Latitudes are clamped to the
Mercator limit; cell bounds are half-open, so a point on a shared edge belongs
to the cell with the larger x (or y) index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Final

import numpy as np

MAX_LATITUDE: Final[float] = 85.05112878
MIN_ZOOM: Final[int] = 0
MAX_ZOOM: Final[int] = 23

_QUADKEY_DIGITS = frozenset("0123")


@dataclass(frozen=True)
class BBox:
    """Lon/lat axis-aligned box, west < east and south < north (no wraparound)."""

    west: float
    south: float
    east: float
    north: float

    def __post_init__(self) -> None:
        if not (self.west < self.east and self.south < self.north):
            raise ValueError(
                f"degenerate bbox: ({self.west}, {self.south}, {self.east}, {self.north})"
            )


def clamp_lat(lat: float) -> float:
    return max(-MAX_LATITUDE, min(MAX_LATITUDE, lat))


def normalize_lon(lon: float) -> float:
    """Wrap a longitude into [-180, 180)."""
    return (lon + 180.0) % 360.0 - 180.0


def _mercator_fraction_y(lat: float) -> float:
    """Vertical position of a latitude in [0, 1], 0 at the north clamp."""
    s = math.sin(math.radians(clamp_lat(lat)))
    return 0.5 - math.log((1.0 + s) / (1.0 - s)) / (4.0 * math.pi)


def lonlat_to_tile(lon: float, lat: float, z: int) -> tuple[int, int]:
    """Tile (x, y) containing a point at zoom z; out-of-range inputs are clamped."""
    if z < MIN_ZOOM:
        raise ValueError(f"zoom must be >= {MIN_ZOOM}, got {z}")
    n = 1 << z
    x = int(math.floor((normalize_lon(lon) + 180.0) / 360.0 * n))
    y = int(math.floor(_mercator_fraction_y(lat) * n))
    return max(0, min(n - 1, x)), max(0, min(n - 1, y))


def lonlat_to_tile_array(
    lon: np.ndarray, lat: np.ndarray, z: int
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized lonlat_to_tile; mirrors the scalar formulas exactly."""
    if z < MIN_ZOOM:
        raise ValueError(f"zoom must be >= {MIN_ZOOM}, got {z}")
    n = 1 << z
    lon = (np.asarray(lon, dtype=float) + 180.0) % 360.0 - 180.0
    x = np.floor((lon + 180.0) / 360.0 * n).astype(np.int64)
    s = np.sin(np.radians(np.clip(lat, -MAX_LATITUDE, MAX_LATITUDE)))
    fy = 0.5 - np.log((1.0 + s) / (1.0 - s)) / (4.0 * np.pi)
    y = np.floor(fy * n).astype(np.int64)
    return np.clip(x, 0, n - 1), np.clip(y, 0, n - 1)


def tile_to_quadkey(x: int, y: int, z: int) -> str:
    """Interleave the bits of x and y into a base-4 string of length z."""
    n = 1 << z
    if not (0 <= x < n and 0 <= y < n):
        raise ValueError(f"tile ({x}, {y}) out of range at zoom {z}")
    digits = []
    for i in range(z, 0, -1):
        mask = 1 << (i - 1)
        digit = 0
        if x & mask:
            digit += 1
        if y & mask:
            digit += 2
        digits.append(str(digit))
    return "".join(digits)


def quadkey_to_tile(quadkey: str) -> tuple[int, int, int]:
    """Inverse of tile_to_quadkey; the empty string is the root cell (0, 0, 0)."""
    x = y = 0
    for ch in quadkey:
        if ch not in _QUADKEY_DIGITS:
            raise ValueError(f"malformed quadkey digit {ch!r} in {quadkey!r}")
        d = ord(ch) - ord("0")
        x = (x << 1) | (d & 1)
        y = (y << 1) | (d >> 1)
    return x, y, len(quadkey)


def parent(quadkey: str) -> str:
    if not quadkey:
        raise ValueError("root cell has no parent")
    return quadkey[:-1]


def children(quadkey: str) -> list[str]:
    return [quadkey + d for d in "0123"]


def tile_bounds(x: int, y: int, z: int) -> BBox:
    """Lon/lat bounds of a tile (inverse projection of its corners)."""
    n = 1 << z
    west = x / n * 360.0 - 180.0
    east = (x + 1) / n * 360.0 - 180.0
    north = _tile_edge_lat(y, n)
    south = _tile_edge_lat(y + 1, n)
    return BBox(west=west, south=south, east=east, north=north)


def _tile_edge_lat(y: int, n: int) -> float:
    return math.degrees(math.atan(math.sinh(math.pi * (1.0 - 2.0 * y / n))))


def cell_bounds(quadkey: str) -> BBox:
    x, y, z = quadkey_to_tile(quadkey)
    return tile_bounds(x, y, z)


def cell_polygon(quadkey: str) -> list[tuple[float, float]]:
    """Closed counter-clockwise lon/lat ring of the cell's bounds."""
    b = cell_bounds(quadkey)
    return [
        (b.west, b.south),
        (b.east, b.south),
        (b.east, b.north),
        (b.west, b.north),
        (b.west, b.south),
    ]


def cell_center(quadkey: str) -> tuple[float, float]:
    b = cell_bounds(quadkey)
    return (0.5 * (b.west + b.east), 0.5 * (b.south + b.north))


# Fractional tile coordinates that land within this distance of an integer
# boundary are snapped to it, so a bbox built from tile_bounds() round-trips
# to exactly its own tiles despite float noise in the inverse projection.
_SNAP = 1e-7


def _snap(v: float) -> float:
    r = round(v)
    return float(r) if abs(v - r) < _SNAP else v


def cover_bbox(bbox: BBox, z: int) -> list[str]:
    """Quadkeys of all zoom-z cells intersecting bbox (half-open), sorted.

    The bbox is treated as half-open on its east and south sides, matching the
    cell convention: a bbox equal to one cell's bounds covers exactly that cell.
    """
    if not (MIN_ZOOM <= z <= MAX_ZOOM):
        raise ValueError(f"zoom must be in [{MIN_ZOOM}, {MAX_ZOOM}], got {z}")
    n = 1 << z
    fx0 = _snap((max(bbox.west, -180.0) + 180.0) / 360.0 * n)
    fx1 = _snap((min(bbox.east, 180.0) + 180.0) / 360.0 * n)
    fy0 = _snap(_mercator_fraction_y(bbox.north) * n)
    fy1 = _snap(_mercator_fraction_y(bbox.south) * n)
    x_min = max(0, min(n - 1, int(math.floor(fx0))))
    x_max = max(x_min, min(n - 1, int(math.ceil(fx1)) - 1))
    y_min = max(0, min(n - 1, int(math.floor(fy0))))
    y_max = max(y_min, min(n - 1, int(math.ceil(fy1)) - 1))
    keys = [
        tile_to_quadkey(x, y, z)
        for x in range(x_min, x_max + 1)
        for y in range(y_min, y_max + 1)
    ]
    keys.sort()
    return keys
