"""File loading and covariate aggregation onto source, hybrid, and cell supports.

Readers parse GeoJSON source units (with numeric response properties), CSV
point features, GeoJSON line features, ESRI ASCII rasters, and the POI
category mapping table. Aggregators turn those features into covariate
columns over a support:

- points: count per region per category group ("poi_<group>")
- lines: count per region per road class, each line attributed to the region
  containing its arc-length midpoint ("road_<class>")
- rasters: mass per region by area-weighted interpolation ("pop_<name>")

All three are extensive: summed over the hybrid fragments of a unit they
reproduce the unit's own value (counts exactly, raster mass to float
precision).
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .geom import (
    Fragment,
    MultiPolygon,
    Point,
    Polygon,
    clip_polygon_rect,
    multipolygon_bounds,
    points_in_multipolygon,
    polygon_area,
    polygon_bounds,
    polyline_midpoint,
    ring_area,
)
from .quadgrid import BBox, cell_bounds, lonlat_to_tile_array, quadkey_to_tile


class IngestError(Exception):
    """Malformed input file; the message carries file and feature context."""


@dataclass
class SourceUnit:
    """One coarse-support polygon with its response values."""

    id: str
    geometry: MultiPolygon
    responses: dict[str, float | None] = field(default_factory=dict)


@dataclass
class LineFeature:
    path: list[Point]
    klass: str


@dataclass
class RasterGrid:
    """ESRI ASCII grid; values[0] is the northernmost row."""

    name: str
    xll: float
    yll: float
    cell_size: float
    ncols: int
    nrows: int
    nodata: float | None
    values: np.ndarray

    @property
    def extent(self) -> tuple[float, float, float, float]:
        return (
            self.xll,
            self.yll,
            self.xll + self.ncols * self.cell_size,
            self.yll + self.nrows * self.cell_size,
        )


# ---------------------------------------------------------------------------
# readers


def _oriented(ring: list[Point], ccw: bool) -> list[Point]:
    closed = ring if ring[0] == ring[-1] else [*ring, ring[0]]
    if (ring_area(closed) > 0) != ccw:
        return closed[::-1]
    return closed


def _parse_polygon_coords(coords: list) -> Polygon:
    if not coords or len(coords[0]) < 3:
        raise ValueError("polygon exterior needs at least 3 vertices")
    exterior = _oriented([(float(x), float(y)) for x, y, *_ in coords[0]], ccw=True)
    holes = [
        _oriented([(float(x), float(y)) for x, y, *_ in ring], ccw=False)
        for ring in coords[1:]
        if len(ring) >= 3
    ]
    return Polygon(exterior=exterior, holes=holes)


def _parse_geometry(geom: dict) -> MultiPolygon:
    if not isinstance(geom, dict) or "type" not in geom:
        raise ValueError("missing geometry")
    gtype = geom["type"]
    if gtype == "Polygon":
        return MultiPolygon(parts=[_parse_polygon_coords(geom["coordinates"])])
    if gtype == "MultiPolygon":
        parts = [_parse_polygon_coords(c) for c in geom["coordinates"]]
        if not parts:
            raise ValueError("empty MultiPolygon")
        return MultiPolygon(parts=parts)
    raise ValueError(f"unsupported geometry type {gtype!r}")


def _load_feature_collection(path: str | Path) -> list[dict]:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestError(f"{path}: cannot parse GeoJSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise IngestError(f"{path}: expected a GeoJSON FeatureCollection")
    features = doc.get("features")
    if not isinstance(features, list):
        raise IngestError(f"{path}: FeatureCollection without a features list")
    return features


def load_sources(path: str | Path, id_property: str = "id") -> list[SourceUnit]:
    """Read source units: polygon features with an id and numeric responses.

    Null-valued numeric properties are kept as missing values (None), never
    silently turned into zeros.
    """
    units: list[SourceUnit] = []
    seen: set[str] = set()
    for idx, feat in enumerate(_load_feature_collection(path)):
        props = feat.get("properties") or {}
        if id_property not in props:
            raise IngestError(f"{path}: feature {idx}: missing {id_property!r} property")
        unit_id = str(props[id_property])
        if unit_id in seen:
            raise IngestError(f"{path}: feature {idx}: duplicate id {unit_id!r}")
        seen.add(unit_id)
        try:
            geometry = _parse_geometry(feat.get("geometry"))
        except (ValueError, KeyError, TypeError) as exc:
            raise IngestError(f"{path}: feature {idx} ({unit_id!r}): {exc}") from exc
        responses: dict[str, float | None] = {}
        for key, value in props.items():
            if key == id_property:
                continue
            if value is None:
                responses[key] = None
            elif isinstance(value, (int, float)) and not isinstance(value, bool):
                responses[key] = float(value)
        units.append(SourceUnit(id=unit_id, geometry=geometry, responses=responses))
    return units


def load_points(path: str | Path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Read point features from a CSV with columns lon, lat, category."""
    lons: list[float] = []
    lats: list[float] = []
    cats: list[str] = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IngestError(f"{path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"lon", "lat", "category"} <= set(
            reader.fieldnames
        ):
            raise IngestError(f"{path}: header must contain lon, lat, category")
        for row in reader:
            try:
                lons.append(float(row["lon"]))
                lats.append(float(row["lat"]))
            except (TypeError, ValueError) as exc:
                raise IngestError(
                    f"{path}: line {reader.line_num}: bad coordinate: {exc}"
                ) from exc
            cats.append(row["category"])
    return np.array(lons, dtype=float), np.array(lats, dtype=float), cats


def load_lines(path: str | Path) -> list[LineFeature]:
    """Read road features: GeoJSON LineString/MultiLineString with a class.

    Each part of a MultiLineString becomes its own feature (and is therefore
    counted separately by aggregation).
    """
    lines: list[LineFeature] = []
    for idx, feat in enumerate(_load_feature_collection(path)):
        props = feat.get("properties") or {}
        klass = props.get("class")
        if not isinstance(klass, str) or not klass:
            raise IngestError(f"{path}: feature {idx}: missing 'class' property")
        geom = feat.get("geometry") or {}
        gtype = geom.get("type")
        if gtype == "LineString":
            paths = [geom["coordinates"]]
        elif gtype == "MultiLineString":
            paths = geom["coordinates"]
        else:
            raise IngestError(
                f"{path}: feature {idx}: unsupported geometry type {gtype!r}"
            )
        for part in paths:
            if len(part) < 2:
                raise IngestError(f"{path}: feature {idx}: line with < 2 vertices")
            lines.append(
                LineFeature(path=[(float(x), float(y)) for x, y, *_ in part], klass=klass)
            )
    return lines


_RASTER_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize")


def load_raster(path: str | Path, name: str) -> RasterGrid:
    """Read an ESRI ASCII grid (ncols/nrows/xllcorner/yllcorner/cellsize)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IngestError(f"{path}: {exc}") from exc
    tokens = text.split()
    header: dict[str, float] = {}
    pos = 0
    while pos + 1 < len(tokens) and tokens[pos].lower() in (
        *_RASTER_HEADER_KEYS,
        "nodata_value",
    ):
        key = tokens[pos].lower()
        try:
            header[key] = float(tokens[pos + 1])
        except ValueError as exc:
            raise IngestError(f"{path}: bad header value for {key}: {exc}") from exc
        pos += 2
    missing = [k for k in _RASTER_HEADER_KEYS if k not in header]
    if missing:
        raise IngestError(f"{path}: raster header missing {', '.join(missing)}")
    ncols, nrows = int(header["ncols"]), int(header["nrows"])
    cell_size = header["cellsize"]
    if cell_size <= 0:
        raise IngestError(f"{path}: cellsize must be positive, got {cell_size}")
    nodata = header.get("nodata_value")
    data = tokens[pos:]
    if len(data) != ncols * nrows:
        raise IngestError(
            f"{path}: expected {ncols * nrows} values, found {len(data)}"
        )
    try:
        values = np.array(data, dtype=float).reshape(nrows, ncols)
    except ValueError as exc:
        raise IngestError(f"{path}: bad raster value: {exc}") from exc
    valid = values if nodata is None else values[values != nodata]
    if np.any(valid < 0):
        raise IngestError(f"{path}: negative raster values are not allowed")
    return RasterGrid(
        name=name,
        xll=header["xllcorner"],
        yll=header["yllcorner"],
        cell_size=cell_size,
        ncols=ncols,
        nrows=nrows,
        nodata=nodata,
        values=values,
    )


def packaged_category_path() -> Path:
    """Filesystem path of the bundled raw_category -> group table."""
    return Path(str(resources.files("downscale").joinpath("data/poi_categories.csv")))


def load_category_map(path: str | Path | None = None) -> dict[str, str]:
    """Read the raw_category -> group table; None loads the packaged default."""
    if path is None:
        text = packaged_category_path().read_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise IngestError(f"{path}: {exc}") from exc
    reader = csv.DictReader(text.splitlines())
    if reader.fieldnames is None or not {"raw_category", "group"} <= set(
        reader.fieldnames
    ):
        raise IngestError(f"{path}: header must contain raw_category, group")
    mapping: dict[str, str] = {}
    for row in reader:
        raw, group = row["raw_category"], row["group"]
        if raw in mapping and mapping[raw] != group:
            raise IngestError(
                f"{path}: category {raw!r} mapped to both {mapping[raw]!r} and {group!r}"
            )
        mapping[raw] = group
    return mapping


# ---------------------------------------------------------------------------
# supports


@dataclass
class Support:
    """A list of regions that covariates are aggregated onto.

    kind is one of "units" (source polygons), "cells" (grid cells at one
    zoom), or "hybrid" (unit-by-cell fragments). Region order is the key
    order and is the row order of every design matrix built on the support.
    """

    kind: str
    keys: list
    pieces: list[list[Polygon]]
    areas: np.ndarray
    zoom: int | None = None
    units: dict[str, MultiPolygon] | None = None
    _cell_index: dict | None = None


def unit_support(units: list[SourceUnit]) -> Support:
    geoms = {u.id: u.geometry for u in units}
    keys = [u.id for u in units]
    pieces = [list(u.geometry.parts) for u in units]
    areas = np.array([polygon_area(u.geometry) for u in units])
    return Support(kind="units", keys=keys, pieces=pieces, areas=areas, units=geoms)


def cell_support(quadkeys: list[str]) -> Support:
    if not quadkeys:
        raise ValueError("empty cell support")
    zooms = {len(q) for q in quadkeys}
    if len(zooms) != 1:
        raise ValueError(f"mixed quadkey lengths: {sorted(zooms)}")
    zoom = zooms.pop()
    pieces = []
    index = {}
    for i, q in enumerate(quadkeys):
        b = cell_bounds(q)
        ring = [
            (b.west, b.south),
            (b.east, b.south),
            (b.east, b.north),
            (b.west, b.north),
        ]
        pieces.append([Polygon(exterior=ring)])
        x, y, _ = quadkey_to_tile(q)
        index[(x, y)] = i
    areas = np.array([polygon_area(p[0]) for p in pieces])
    return Support(
        kind="cells",
        keys=list(quadkeys),
        pieces=pieces,
        areas=areas,
        zoom=zoom,
        _cell_index=index,
    )


def fragment_support(
    fragments: list[Fragment], units: dict[str, MultiPolygon], zoom: int
) -> Support:
    keys = [(f.unit_id, f.quadkey) for f in fragments]
    pieces = [list(f.pieces) for f in fragments]
    areas = np.array([f.area for f in fragments])
    return Support(
        kind="hybrid", keys=keys, pieces=pieces, areas=areas, zoom=zoom, units=units
    )


def _locate_in_units(
    lon: np.ndarray, lat: np.ndarray, unit_ids: list[str], units: dict[str, MultiPolygon]
) -> np.ndarray:
    out = np.full(lon.shape, -1, dtype=np.int64)
    for i, uid in enumerate(unit_ids):
        todo = out == -1
        if not np.any(todo):
            break
        w, s, e, n = multipolygon_bounds(units[uid])
        cand = todo & (lon >= w) & (lon <= e) & (lat >= s) & (lat <= n)
        if not np.any(cand):
            continue
        idx = np.nonzero(cand)[0]
        hit = points_in_multipolygon(lon[idx], lat[idx], units[uid])
        out[idx[hit]] = i
    return out


def locate(support: Support, lon: np.ndarray, lat: np.ndarray) -> np.ndarray:
    """Region index per point, -1 outside every region.

    Membership for unit-based supports uses the source polygons; hybrid
    fragments combine that with exact tile assignment, so a point counted in
    a unit is always counted in exactly one of its fragments.
    """
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    if support.kind == "cells":
        x, y = lonlat_to_tile_array(lon, lat, support.zoom)
        index = support._cell_index
        return np.array(
            [index.get((xi, yi), -1) for xi, yi in zip(x.tolist(), y.tolist())],
            dtype=np.int64,
        )
    if support.kind == "units":
        return _locate_in_units(lon, lat, support.keys, support.units)
    unit_ids = sorted(support.units)
    unit_pos = _locate_in_units(lon, lat, unit_ids, support.units)
    x, y = lonlat_to_tile_array(lon, lat, support.zoom)
    frag_index = {
        (key[0], *quadkey_to_tile(key[1])[:2]): i for i, key in enumerate(support.keys)
    }
    out = np.full(lon.shape, -1, dtype=np.int64)
    for j in range(lon.size):
        if unit_pos[j] >= 0:
            out[j] = frag_index.get((unit_ids[unit_pos[j]], x[j], y[j]), -1)
    return out


# ---------------------------------------------------------------------------
# aggregation


def aggregate_points(
    lon: np.ndarray,
    lat: np.ndarray,
    categories: list[str],
    category_map: dict[str, str],
    support: Support,
) -> dict[str, np.ndarray]:
    """Count points per region per category group; columns "poi_<group>".

    The column vocabulary is the mapping's group set plus OTHER, so designs
    built from the same mapping always share columns. Unmapped raw categories
    fall into OTHER with a warning.
    """
    groups = sorted(set(category_map.values()) | {"OTHER"})
    gidx = {g: j for j, g in enumerate(groups)}
    unknown = sorted({c for c in categories if c not in category_map})
    if unknown:
        warnings.warn(
            f"{len(unknown)} unmapped point categories counted as OTHER: "
            + ", ".join(unknown[:5])
            + ("..." if len(unknown) > 5 else ""),
            stacklevel=2,
        )
    counts = np.zeros((len(support.keys), len(groups)))
    if len(categories):
        loc = locate(support, lon, lat)
        col = np.array([gidx[category_map.get(c, "OTHER")] for c in categories])
        inside = loc >= 0
        np.add.at(counts, (loc[inside], col[inside]), 1.0)
    return {f"poi_{g}": counts[:, j] for j, g in enumerate(groups)}


def aggregate_lines(
    lines: list[LineFeature], support: Support
) -> dict[str, np.ndarray]:
    """Count lines per region per class by midpoint attribution."""
    klasses = sorted({ln.klass for ln in lines})
    kidx = {k: j for j, k in enumerate(klasses)}
    counts = np.zeros((len(support.keys), len(klasses)))
    if lines:
        mids = [polyline_midpoint(ln.path) for ln in lines]
        loc = locate(support, np.array([m[0] for m in mids]), np.array([m[1] for m in mids]))
        col = np.array([kidx[ln.klass] for ln in lines])
        inside = loc >= 0
        np.add.at(counts, (loc[inside], col[inside]), 1.0)
    return {f"road_{k}": counts[:, j] for j, k in enumerate(klasses)}


def area_interpolate(raster: RasterGrid, support: Support) -> dict[str, np.ndarray]:
    """Distribute raster mass onto regions with intersection-area weights.

    Each region receives sum over pixels of value * area(pixel meet region) /
    area(pixel). Mass is conserved over any partition of the raster extent;
    nodata pixels carry no mass; parts of a region outside the raster extent
    contribute zero (warned once).
    """
    cs = raster.cell_size
    x0, y0, x1, y1 = raster.extent
    pixel_area = cs * cs
    out = np.zeros(len(support.keys))
    clipped_any = False
    for i, pieces in enumerate(support.pieces):
        total = 0.0
        for piece in pieces:
            w, s, e, n = polygon_bounds(piece)
            if w < x0 - 1e-12 or s < y0 - 1e-12 or e > x1 + 1e-12 or n > y1 + 1e-12:
                clipped_any = True
            c_lo = max(0, int(np.floor((w - x0) / cs)))
            c_hi = min(raster.ncols - 1, int(np.ceil((e - x0) / cs)) - 1)
            r_lo = max(0, int(np.floor((y1 - n) / cs)))
            r_hi = min(raster.nrows - 1, int(np.ceil((y1 - s) / cs)) - 1)
            for r in range(r_lo, r_hi + 1):
                for c in range(c_lo, c_hi + 1):
                    value = raster.values[r, c]
                    if raster.nodata is not None and value == raster.nodata:
                        continue
                    if value == 0.0:
                        continue
                    box = BBox(
                        west=x0 + c * cs,
                        south=y1 - (r + 1) * cs,
                        east=x0 + (c + 1) * cs,
                        north=y1 - r * cs,
                    )
                    clip = clip_polygon_rect(piece, box)
                    if clip is not None:
                        total += value * polygon_area(clip) / pixel_area
        out[i] = total
    if clipped_any:
        warnings.warn(
            f"raster {raster.name!r} does not cover all regions; "
            "uncovered portions contribute zero",
            stacklevel=2,
        )
    return {f"pop_{raster.name}": out}


def assemble_design(
    columns: dict[str, np.ndarray], names: list[str] | None = None
) -> tuple[np.ndarray, list[str]]:
    """Stack covariate columns into a dense matrix with a stable column order.

    Rows follow the support's region order; columns follow `names` when given
    (error on absent ones), otherwise sorted name order.
    """
    if names is None:
        names = sorted(columns)
    missing = [n for n in names if n not in columns]
    if missing:
        raise IngestError(f"design is missing covariate columns: {', '.join(missing)}")
    if not names:
        raise IngestError("design needs at least one covariate column")
    X = np.column_stack([np.asarray(columns[n], dtype=float) for n in names])
    if np.any(X < 0):
        raise IngestError("negative covariate values in design")
    return X, list(names)
