import json

import numpy as np
import pytest

from downscale.geom import (
    MultiPolygon,
    Polygon,
    build_hybrid_support,
    point_in,
    polygon_area,
)
from downscale.ingest import (
    IngestError,
    LineFeature,
    aggregate_lines,
    aggregate_points,
    area_interpolate,
    assemble_design,
    cell_support,
    fragment_support,
    load_category_map,
    load_lines,
    load_points,
    load_raster,
    load_sources,
    locate,
    unit_support,
)
from downscale.quadgrid import BBox, cell_center, cover_bbox


def square_coords(w, s, e, n):
    return [[[w, s], [e, s], [e, n], [w, n], [w, s]]]


def feature(fid, coords, gtype="Polygon", **props):
    return {
        "type": "Feature",
        "geometry": {"type": gtype, "coordinates": coords},
        "properties": {"id": fid, **props},
    }


def write_geojson(path, features):
    path.write_text(json.dumps({"type": "FeatureCollection", "features": features}))
    return path


class TestLoadSources:
    def test_two_disjoint_squares(self, tmp_path):
        p = write_geojson(
            tmp_path / "units.geojson",
            [
                feature("a", square_coords(0, 0, 1, 1), households=12.0),
                feature("b", square_coords(2, 0, 3, 1), households=7),
            ],
        )
        units = load_sources(p)
        assert [u.id for u in units] == ["a", "b"]
        assert units[0].responses == {"households": 12.0}
        assert units[1].responses == {"households": 7.0}
        assert polygon_area(units[0].geometry) == pytest.approx(1.0)

    def test_null_response_is_missing(self, tmp_path):
        p = write_geojson(
            tmp_path / "u.geojson",
            [feature("a", square_coords(0, 0, 1, 1), income=None, name="x")],
        )
        (unit,) = load_sources(p)
        assert unit.responses["income"] is None
        assert "name" not in unit.responses  # strings are not responses

    def test_duplicate_id(self, tmp_path):
        p = write_geojson(
            tmp_path / "u.geojson",
            [
                feature("a", square_coords(0, 0, 1, 1)),
                feature("a", square_coords(2, 0, 3, 1)),
            ],
        )
        with pytest.raises(IngestError, match="'a'"):
            load_sources(p)

    def test_bad_geometry_names_feature(self, tmp_path):
        p = write_geojson(
            tmp_path / "u.geojson",
            [
                feature("ok", square_coords(0, 0, 1, 1)),
                feature("broken", [[[0, 0], [1, 1]]]),
            ],
        )
        with pytest.raises(IngestError, match="feature 1"):
            load_sources(p)

    def test_unclosed_ring_fixed(self, tmp_path):
        p = write_geojson(
            tmp_path / "u.geojson",
            [feature("a", [[[0, 0], [1, 0], [1, 1], [0, 1]]])],
        )
        (unit,) = load_sources(p)
        ring = unit.geometry.parts[0].exterior
        assert ring[0] == ring[-1]

    def test_orientation_normalized(self, tmp_path):
        cw = [[[0, 0], [0, 1], [1, 1], [1, 0], [0, 0]]]
        p = write_geojson(tmp_path / "u.geojson", [feature("a", cw)])
        (unit,) = load_sources(p)
        assert polygon_area(unit.geometry) == pytest.approx(1.0)

    def test_multipolygon(self, tmp_path):
        coords = [square_coords(0, 0, 1, 1), square_coords(2, 0, 3, 1)]
        p = write_geojson(
            tmp_path / "u.geojson", [feature("m", coords, gtype="MultiPolygon")]
        )
        (unit,) = load_sources(p)
        assert len(unit.geometry.parts) == 2

    def test_not_a_collection(self, tmp_path):
        p = tmp_path / "u.geojson"
        p.write_text(json.dumps({"type": "Feature"}))
        with pytest.raises(IngestError, match="FeatureCollection"):
            load_sources(p)


class TestLoadPoints:
    def test_roundtrip(self, tmp_path):
        p = tmp_path / "pts.csv"
        p.write_text("lon,lat,category\n1.5,2.5,FOO\n-3.0,4.0,BAR\n")
        lon, lat, cats = load_points(p)
        assert lon.tolist() == [1.5, -3.0]
        assert lat.tolist() == [2.5, 4.0]
        assert cats == ["FOO", "BAR"]

    def test_missing_column(self, tmp_path):
        p = tmp_path / "pts.csv"
        p.write_text("x,y,category\n1,2,FOO\n")
        with pytest.raises(IngestError, match="lon"):
            load_points(p)

    def test_bad_value_line_number(self, tmp_path):
        p = tmp_path / "pts.csv"
        p.write_text("lon,lat,category\n1,2,FOO\noops,2,BAR\n")
        with pytest.raises(IngestError, match="line 3"):
            load_points(p)


class TestLoadLines:
    def test_linestring_and_multilinestring(self, tmp_path):
        feats = [
            {
                "type": "Feature",
                "geometry": {"type": "LineString", "coordinates": [[0, 0], [1, 0]]},
                "properties": {"class": "primary"},
            },
            {
                "type": "Feature",
                "geometry": {
                    "type": "MultiLineString",
                    "coordinates": [[[0, 0], [0, 1]], [[2, 2], [3, 3], [4, 4]]],
                },
                "properties": {"class": "secondary"},
            },
        ]
        p = write_geojson(tmp_path / "roads.geojson", feats)
        lines = load_lines(p)
        assert len(lines) == 3
        assert [ln.klass for ln in lines] == ["primary", "secondary", "secondary"]

    def test_missing_class(self, tmp_path):
        feats = [
            {
                "type": "Feature",
                "geometry": {"type": "LineString", "coordinates": [[0, 0], [1, 0]]},
                "properties": {},
            }
        ]
        p = write_geojson(tmp_path / "roads.geojson", feats)
        with pytest.raises(IngestError, match="class"):
            load_lines(p)

    def test_short_line(self, tmp_path):
        feats = [
            {
                "type": "Feature",
                "geometry": {"type": "LineString", "coordinates": [[0, 0]]},
                "properties": {"class": "x"},
            }
        ]
        p = write_geojson(tmp_path / "roads.geojson", feats)
        with pytest.raises(IngestError, match="2 vertices"):
            load_lines(p)


RASTER_TEXT = """ncols 3
nrows 2
xllcorner 10.0
yllcorner 20.0
cellsize 0.5
NODATA_value -9999
1 2 3
4 -9999 6
"""


class TestLoadRaster:
    def test_parse(self, tmp_path):
        p = tmp_path / "r.asc"
        p.write_text(RASTER_TEXT)
        r = load_raster(p, "pop")
        assert (r.ncols, r.nrows) == (3, 2)
        assert r.values[0].tolist() == [1.0, 2.0, 3.0]
        assert r.values[1, 1] == -9999.0
        assert r.extent == (10.0, 20.0, 11.5, 21.0)

    def test_value_count_mismatch(self, tmp_path):
        p = tmp_path / "r.asc"
        p.write_text("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2 3\n")
        with pytest.raises(IngestError, match="expected 4"):
            load_raster(p, "x")

    def test_nonpositive_cellsize(self, tmp_path):
        p = tmp_path / "r.asc"
        p.write_text("ncols 1\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 0\n5\n")
        with pytest.raises(IngestError, match="cellsize"):
            load_raster(p, "x")

    def test_negative_value(self, tmp_path):
        p = tmp_path / "r.asc"
        p.write_text("ncols 1\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\n-5\n")
        with pytest.raises(IngestError, match="negative"):
            load_raster(p, "x")

    def test_missing_header(self, tmp_path):
        p = tmp_path / "r.asc"
        p.write_text("ncols 1\nnrows 1\ncellsize 1\n5\n")
        with pytest.raises(IngestError, match="xllcorner"):
            load_raster(p, "x")


class TestCategoryMap:
    def test_packaged_default(self):
        m = load_category_map()
        assert m["EATING AND DRINKING PLACES"] == "FOOD"
        assert m["HEALTH SERVICES"] == "HEALTH"
        assert m["SHOPPING"] == "SHOP"
        assert len(set(m.values())) == 10
        assert len(m) >= 50

    def test_custom_file(self, tmp_path):
        p = tmp_path / "cats.csv"
        p.write_text("raw_category,group\nfoo,A\nbar,B\n")
        assert load_category_map(p) == {"foo": "A", "bar": "B"}

    def test_conflicting_rows(self, tmp_path):
        p = tmp_path / "cats.csv"
        p.write_text("raw_category,group\nfoo,A\nfoo,B\n")
        with pytest.raises(IngestError, match="foo"):
            load_category_map(p)


def make_units():
    a = MultiPolygon(parts=[Polygon(exterior=[(0, 0), (0.4, 0), (0.4, 0.4), (0, 0.4)])])
    b = MultiPolygon(
        parts=[Polygon(exterior=[(0.4, 0), (0.8, 0), (0.8, 0.4), (0.4, 0.4)])]
    )
    from downscale.ingest import SourceUnit

    return [SourceUnit("a", a, {}), SourceUnit("b", b, {})]


class TestSupportsAndLocate:
    def test_cell_support_locate_centers(self):
        keys = cover_bbox(BBox(-0.3, -0.3, 0.3, 0.3), 9)
        sup = cell_support(keys)
        centers = [cell_center(k) for k in keys]
        loc = locate(sup, np.array([c[0] for c in centers]), np.array([c[1] for c in centers]))
        assert loc.tolist() == list(range(len(keys)))

    def test_cell_support_outside(self):
        sup = cell_support(cover_bbox(BBox(0.01, 0.01, 0.02, 0.02), 12))
        loc = locate(sup, np.array([50.0]), np.array([50.0]))
        assert loc.tolist() == [-1]

    def test_unit_support_locate(self):
        sup = unit_support(make_units())
        loc = locate(sup, np.array([0.2, 0.6, 5.0]), np.array([0.2, 0.2, 5.0]))
        assert loc.tolist() == [0, 1, -1]

    def test_fragment_support_locate_consistent_with_unit(self):
        units = make_units()
        geoms = {u.id: u.geometry for u in units}
        frags = build_hybrid_support(geoms, 10)
        fsup = fragment_support(frags, geoms, 10)
        usup = unit_support(units)
        rng = np.random.default_rng(2)
        lon = rng.uniform(-0.1, 0.9, 400)
        lat = rng.uniform(-0.1, 0.5, 400)
        floc = locate(fsup, lon, lat)
        uloc = locate(usup, lon, lat)
        for j in range(lon.size):
            if uloc[j] == -1:
                assert floc[j] == -1
            else:
                assert floc[j] >= 0
                assert fsup.keys[floc[j]][0] == usup.keys[uloc[j]]


class TestAggregatePoints:
    def test_counts_by_group(self):
        units = make_units()
        sup = unit_support(units)
        lon = np.array([0.1, 0.2, 0.3, 0.6])
        lat = np.array([0.1, 0.2, 0.3, 0.1])
        cats = ["s1", "s1", "s1", "o1"]
        cmap = {"s1": "SHOP", "o1": "OFFICE"}
        cols = aggregate_points(lon, lat, cats, cmap, sup)
        assert cols["poi_SHOP"].tolist() == [3.0, 0.0]
        assert cols["poi_OFFICE"].tolist() == [0.0, 1.0]
        assert cols["poi_OTHER"].tolist() == [0.0, 0.0]

    def test_unknown_category_warns_to_other(self):
        sup = unit_support(make_units())
        with pytest.warns(UserWarning, match="OTHER"):
            cols = aggregate_points(
                np.array([0.1]), np.array([0.1]), ["mystery"], {"s1": "SHOP"}, sup
            )
        assert cols["poi_OTHER"].tolist() == [1.0, 0.0]

    def test_extensivity_over_fragments(self):
        units = make_units()
        geoms = {u.id: u.geometry for u in units}
        frags = build_hybrid_support(geoms, 10)
        usup = unit_support(units)
        fsup = fragment_support(frags, geoms, 10)
        rng = np.random.default_rng(7)
        lon = rng.uniform(0.0, 0.8, 500)
        lat = rng.uniform(0.0, 0.4, 500)
        cats = [["x", "y"][i % 2] for i in range(500)]
        cmap = {"x": "SHOP", "y": "FOOD"}
        ucols = aggregate_points(lon, lat, cats, cmap, usup)
        fcols = aggregate_points(lon, lat, cats, cmap, fsup)
        for name in ucols:
            for ui, uid in enumerate(usup.keys):
                frag_sum = sum(
                    fcols[name][fi]
                    for fi, key in enumerate(fsup.keys)
                    if key[0] == uid
                )
                assert frag_sum == ucols[name][ui]

    def test_empty_points(self):
        sup = unit_support(make_units())
        cols = aggregate_points(
            np.array([]), np.array([]), [], {"s1": "SHOP"}, sup
        )
        assert set(cols) == {"poi_SHOP", "poi_OTHER"}
        assert all(np.all(v == 0) for v in cols.values())


class TestAggregateLines:
    def test_midpoint_rule(self):
        # the line starts in unit a but its midpoint is in unit b
        units = make_units()
        sup = unit_support(units)
        lines = [LineFeature(path=[(0.35, 0.2), (0.65, 0.2)], klass="primary")]
        cols = aggregate_lines(lines, sup)
        assert cols["road_primary"].tolist() == [0.0, 1.0]

    def test_brute_force_oracle(self):
        units = make_units()
        sup = unit_support(units)
        rng = np.random.default_rng(13)
        lines = []
        for _ in range(120):
            x0, y0 = rng.uniform(-0.1, 0.9), rng.uniform(-0.1, 0.5)
            pts = [(x0, y0)]
            for _ in range(int(rng.integers(1, 4))):
                pts.append(
                    (pts[-1][0] + rng.uniform(-0.1, 0.1), pts[-1][1] + rng.uniform(-0.1, 0.1))
                )
            lines.append(LineFeature(path=pts, klass=str(rng.integers(0, 3))))
        cols = aggregate_lines(lines, sup)
        from downscale.geom import polyline_midpoint

        expected = {f"road_{k}": np.zeros(2) for k in "012"}
        for ln in lines:
            mid = polyline_midpoint(ln.path)
            for ui, unit in enumerate(units):
                if point_in(mid, unit.geometry):
                    expected[f"road_{ln.klass}"][ui] += 1
        for name in expected:
            assert cols[name].tolist() == expected[name].tolist()

    def test_extensivity_over_fragments(self):
        units = make_units()
        geoms = {u.id: u.geometry for u in units}
        frags = build_hybrid_support(geoms, 10)
        fsup = fragment_support(frags, geoms, 10)
        usup = unit_support(units)
        rng = np.random.default_rng(5)
        lines = [
            LineFeature(
                path=[
                    (rng.uniform(0, 0.8), rng.uniform(0, 0.4)),
                    (rng.uniform(0, 0.8), rng.uniform(0, 0.4)),
                ],
                klass="r",
            )
            for _ in range(200)
        ]
        ucols = aggregate_lines(lines, usup)
        fcols = aggregate_lines(lines, fsup)
        for ui, uid in enumerate(usup.keys):
            frag_sum = sum(
                fcols["road_r"][fi] for fi, key in enumerate(fsup.keys) if key[0] == uid
            )
            assert frag_sum == ucols["road_r"][ui]


class TestAreaInterpolate:
    def _raster(self, values, xll=0.0, yll=0.0, cs=1.0, nodata=None):
        from downscale.ingest import RasterGrid

        arr = np.asarray(values, dtype=float)
        return RasterGrid(
            name="t",
            xll=xll,
            yll=yll,
            cell_size=cs,
            ncols=arr.shape[1],
            nrows=arr.shape[0],
            nodata=nodata,
            values=arr,
        )

    def _support_of_squares(self, boxes):
        from downscale.ingest import SourceUnit

        units = [
            SourceUnit(
                f"u{i}",
                MultiPolygon(
                    parts=[Polygon(exterior=[(w, s), (e, s), (e, n), (w, n)])]
                ),
                {},
            )
            for i, (w, s, e, n) in enumerate(boxes)
        ]
        return unit_support(units)

    @pytest.mark.filterwarnings("ignore:raster")
    def test_pixel_inside_region(self):
        r = self._raster([[5.0]])
        sup = self._support_of_squares([(-1, -1, 2, 2)])
        cols = area_interpolate(r, sup)
        assert cols["pop_t"].tolist() == [5.0]

    def test_half_split(self):
        r = self._raster([[8.0]])
        sup = self._support_of_squares([(0, 0, 0.5, 1), (0.5, 0, 1, 1)])
        cols = area_interpolate(r, sup)
        assert cols["pop_t"][0] == pytest.approx(4.0, abs=1e-9)
        assert cols["pop_t"][1] == pytest.approx(4.0, abs=1e-9)

    def test_nodata_contributes_zero(self):
        r = self._raster([[3.0, -1.0]], nodata=-1.0)
        sup = self._support_of_squares([(0, 0, 2, 1)])
        cols = area_interpolate(r, sup)
        assert cols["pop_t"].tolist() == [3.0]

    def test_mass_conservation_random_partitions(self):
        rng = np.random.default_rng(23)
        for _ in range(10):
            values = rng.uniform(0, 10, size=(4, 5))
            r = self._raster(values, xll=-1.0, yll=2.0, cs=0.5)
            x0, y0, x1, y1 = r.extent
            cuts = np.sort(rng.uniform(x0 + 0.1, x1 - 0.1, size=2))
            sup = self._support_of_squares(
                [(x0, y0, cuts[0], y1), (cuts[0], y0, cuts[1], y1), (cuts[1], y0, x1, y1)]
            )
            cols = area_interpolate(r, sup)
            assert cols["pop_t"].sum() == pytest.approx(values.sum(), rel=1e-9)

    def test_uncovered_region_warns(self):
        r = self._raster([[2.0]])
        sup = self._support_of_squares([(0, 0, 3, 3)])
        with pytest.warns(UserWarning, match="cover"):
            cols = area_interpolate(r, sup)
        assert cols["pop_t"].tolist() == [2.0]

    def test_row_orientation(self):
        # first data row is the northern one
        r = self._raster([[1.0, 1.0], [9.0, 9.0]], cs=1.0)
        sup = self._support_of_squares([(0, 0, 2, 1), (0, 1, 2, 2)])
        cols = area_interpolate(r, sup)
        assert cols["pop_t"].tolist() == [18.0, 2.0]


class TestAssembleDesign:
    def test_sorted_default_order(self):
        X, names = assemble_design({"b": np.array([1.0, 2.0]), "a": np.array([3.0, 4.0])})
        assert names == ["a", "b"]
        assert X.tolist() == [[3.0, 1.0], [4.0, 2.0]]

    def test_explicit_order(self):
        X, names = assemble_design(
            {"b": np.array([1.0]), "a": np.array([2.0])}, names=["b", "a"]
        )
        assert names == ["b", "a"]
        assert X.tolist() == [[1.0, 2.0]]

    def test_missing_column(self):
        with pytest.raises(IngestError, match="poi_SHOP"):
            assemble_design({"a": np.array([1.0])}, names=["a", "poi_SHOP"])

    def test_negative_rejected(self):
        with pytest.raises(IngestError, match="negative"):
            assemble_design({"a": np.array([-1.0])})

    def test_same_columns_across_supports(self):
        cmap = {"x": "SHOP"}
        usup = unit_support(make_units())
        geoms = {u.id: u.geometry for u in make_units()}
        frags = build_hybrid_support(geoms, 10)
        fsup = fragment_support(frags, geoms, 10)
        lon, lat, cats = np.array([0.1]), np.array([0.1]), ["x"]
        _, names_u = assemble_design(aggregate_points(lon, lat, cats, cmap, usup))
        _, names_f = assemble_design(aggregate_points(lon, lat, cats, cmap, fsup))
        assert names_u == names_f
