"""Geometry primitives: distances, projections, fraction lookup, grids."""

import math
from decimal import Decimal, getcontext

import numpy as np
import pytest

from trajtoken.geo import (
    EARTH_RADIUS_M,
    GeometryError,
    GridSpec,
    InvalidCoordinateError,
    LonLat,
    OUT_OF_BOUNDS,
    Polyline,
    geodesic_m,
    grid_index,
    local_xy_m,
    point_at_fraction,
    project_to_polyline,
)

def random_lonlat(rng, span=0.5):
    return LonLat(
        float(rng.uniform(-span, span) + 104.0), float(rng.uniform(-span, span) + 30.0)
    )


def haversine_highprec(a: LonLat, b: LonLat) -> float:
    """Independent oracle: the haversine formula in 50-digit decimal."""
    getcontext().prec = 50

    def sin(x):
        # Taylor series with Decimal terms; |x| < 1 here after range reduction
        x = Decimal(x)
        term = x
        total = x
        for k in range(1, 40):
            term *= -x * x / (Decimal(2 * k) * Decimal(2 * k + 1))
            total += term
        return total

    def cos(x):
        x = Decimal(x)
        term = Decimal(1)
        total = Decimal(1)
        for k in range(1, 40):
            term *= -x * x / (Decimal(2 * k - 1) * Decimal(2 * k))
            total += term
        return total

    rad = Decimal(math.pi) / Decimal(180)
    phi1 = Decimal(a.lat) * rad
    phi2 = Decimal(b.lat) * rad
    dphi = (Decimal(b.lat) - Decimal(a.lat)) * rad
    dlam = (Decimal(b.lon) - Decimal(a.lon)) * rad
    s = sin(dphi / 2) ** 2 + cos(phi1) * cos(phi2) * sin(dlam / 2) ** 2
    return float(2 * Decimal(EARTH_RADIUS_M) * Decimal(math.asin(math.sqrt(float(s)))))


class TestGeodesic:
    def test_identity_is_zero(self):
        p = LonLat(0.0, 0.0)
        assert geodesic_m(p, p) == 0.0

    def test_symmetry(self, rng):
        for _ in range(50):
            a, b = random_lonlat(rng), random_lonlat(rng)
            assert geodesic_m(a, b) == pytest.approx(geodesic_m(b, a), rel=0, abs=0)

    def test_one_degree_matches_highprec_oracle(self):
        a, b = LonLat(0.0, 0.0), LonLat(1.0, 0.0)
        got = geodesic_m(a, b)
        want = haversine_highprec(a, b)
        assert abs(got - want) / want < 1e-9

    def test_random_pairs_match_oracle(self, rng):
        for _ in range(20):
            a, b = random_lonlat(rng), random_lonlat(rng)
            want = haversine_highprec(a, b)
            assert abs(geodesic_m(a, b) - want) / max(want, 1.0) < 1e-9

    def test_triangle_inequality(self, rng):
        for _ in range(100):
            a, b, c = (random_lonlat(rng) for _ in range(3))
            ab, bc, ac = geodesic_m(a, b), geodesic_m(b, c), geodesic_m(a, c)
            assert ac <= ab + bc + 1e-9 * max(ab + bc, 1.0)

    def test_nonfinite_rejected(self):
        with pytest.raises(InvalidCoordinateError):
            LonLat(float("nan"), 0.0)
        with pytest.raises(InvalidCoordinateError):
            LonLat(0.0, float("inf"))

    def test_out_of_range_rejected(self):
        with pytest.raises(InvalidCoordinateError):
            LonLat(181.0, 0.0)
        with pytest.raises(InvalidCoordinateError):
            LonLat(0.0, -91.0)


def _bent_polyline():
    return Polyline(
        [LonLat(104.0, 30.0), LonLat(104.01, 30.0), LonLat(104.01, 30.008), LonLat(104.02, 30.01)]
    )


class TestProjection:
    def test_midpoint_on_curve(self):
        pl = _bent_polyline()
        mid = point_at_fraction(pl, 0.5)
        frac, foot, dist = project_to_polyline(mid, pl)
        assert frac == pytest.approx(0.5, abs=1e-9)
        assert dist < 1e-6

    def test_clamps_beyond_last_vertex(self):
        pl = Polyline([LonLat(104.0, 30.0), LonLat(104.01, 30.0)])
        beyond = LonLat(104.02, 30.0)
        frac, foot, dist = project_to_polyline(beyond, pl)
        assert frac == 1.0
        assert foot.lon == pytest.approx(104.01, abs=1e-12)
        assert foot.lat == pytest.approx(30.0, abs=1e-12)

    def test_degenerate_polyline_rejected(self):
        with pytest.raises(GeometryError):
            Polyline([LonLat(104.0, 30.0)])
        with pytest.raises(GeometryError):
            Polyline([LonLat(104.0, 30.0), LonLat(104.0, 30.0)])

    def test_matches_dense_sampling_oracle(self, rng):
        pl = _bent_polyline()
        samples = np.linspace(0.0, 1.0, 100_000)
        pts = [point_at_fraction(pl, float(t)) for t in samples]
        lons = np.array([q.lon for q in pts])
        lats = np.array([q.lat for q in pts])
        for _ in range(20):
            p = LonLat(
                float(rng.uniform(103.995, 104.025)), float(rng.uniform(29.995, 30.015))
            )
            frac, _, _ = project_to_polyline(p, pl)
            kx = math.cos(math.radians(30.0))
            d2 = ((lons - p.lon) * kx) ** 2 + (lats - p.lat) ** 2
            oracle = samples[int(np.argmin(d2))]
            assert abs(frac - oracle) < 1e-4

    def test_roundtrip_identity_on_curve(self, rng):
        pl = _bent_polyline()
        for t in rng.uniform(0.0, 1.0, size=50):
            q = point_at_fraction(pl, float(t))
            frac, _, _ = project_to_polyline(q, pl)
            back = point_at_fraction(pl, frac)
            assert abs(back.lon - q.lon) < 1e-9
            assert abs(back.lat - q.lat) < 1e-9


class TestPointAtFraction:
    def test_endpoints(self):
        pl = _bent_polyline()
        assert point_at_fraction(pl, 0.0) == pl.points[0]
        end = point_at_fraction(pl, 1.0)
        assert end.lon == pytest.approx(pl.points[-1].lon, abs=1e-12)
        assert end.lat == pytest.approx(pl.points[-1].lat, abs=1e-12)

    def test_straight_segment_quarter_point(self):
        pl = Polyline([LonLat(10.0, 20.0), LonLat(10.4, 20.0)])
        q = point_at_fraction(pl, 0.25)
        assert q.lon == pytest.approx(10.1, abs=1e-12)
        assert q.lat == pytest.approx(20.0, abs=1e-12)

    def test_out_of_domain(self):
        pl = _bent_polyline()
        with pytest.raises(GeometryError):
            point_at_fraction(pl, -0.01)
        with pytest.raises(GeometryError):
            point_at_fraction(pl, 1.01)


class TestGrid:
    def _grid(self):
        return GridSpec(LonLat(104.0, 30.0), cell_m=100.0, rows=10, cols=10)

    def _shift(self, east_m, north_m):
        origin = LonLat(104.0, 30.0)
        kx = math.radians(1.0) * EARTH_RADIUS_M * math.cos(math.radians(origin.lat))
        ky = math.radians(1.0) * EARTH_RADIUS_M
        return LonLat(origin.lon + east_m / kx, origin.lat + north_m / ky)

    def test_origin_cell(self):
        assert grid_index(LonLat(104.0, 30.0), self._grid()) == (0, 0)

    def test_half_open_cells(self):
        p = self._shift(100.0 - 1e-6, 100.0 - 1e-6)
        assert grid_index(p, self._grid()) == (0, 0)
        q = self._shift(100.0 + 1e-6, 0.0)
        assert grid_index(q, self._grid()) == (0, 1)

    def test_floor_rule(self):
        p = self._shift(250.0, 150.0)
        assert grid_index(p, self._grid()) == (1, 2)

    def test_out_of_bounds_marker(self):
        p = self._shift(-50.0, 0.0)
        assert grid_index(p, self._grid()) == OUT_OF_BOUNDS
        q = self._shift(0.0, 1000.0 + 1.0)
        assert grid_index(q, self._grid()) == OUT_OF_BOUNDS

    def test_partition_is_exclusive(self, rng):
        g = self._grid()
        for _ in range(200):
            p = self._shift(float(rng.uniform(0, 999.9)), float(rng.uniform(0, 999.9)))
            cell = grid_index(p, g)
            assert cell != OUT_OF_BOUNDS
            r, c = cell
            assert 0 <= r < g.rows and 0 <= c < g.cols

    def test_local_xy_roundtrip(self):
        origin = LonLat(104.0, 30.0)
        p = self._shift(123.0, -45.0)
        x, y = local_xy_m(p, origin)
        assert x == pytest.approx(123.0, abs=1e-6)
        assert y == pytest.approx(-45.0, abs=1e-6)
