"""Geodesic and planar geometry primitives.

Distances are haversine on a spherical Earth; projections and offsets work
in a local equirectangular plane (longitude scaled by cos(latitude)), which
is linear per edge and accurate at city scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

EARTH_RADIUS_M = 6371008.8

__all__ = [
    "EARTH_RADIUS_M",
    "LonLat",
    "Polyline",
    "GridSpec",
    "GeometryError",
    "InvalidCoordinateError",
    "geodesic_m",
    "local_xy_m",
    "project_to_polyline",
    "project_to_polyline_edge",
    "point_at_fraction",
    "grid_index",
    "OUT_OF_BOUNDS",
]


class GeometryError(ValueError):
    """Degenerate geometry (zero-length polyline, bad fraction, ...)."""


class InvalidCoordinateError(ValueError):
    """Non-finite or out-of-range coordinate."""


@dataclass(frozen=True)
class LonLat:
    lon: float
    lat: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lon) and math.isfinite(self.lat)):
            raise InvalidCoordinateError(f"non-finite coordinate ({self.lon}, {self.lat})")
        if not (-180.0 <= self.lon <= 180.0 and -90.0 <= self.lat <= 90.0):
            raise InvalidCoordinateError(f"coordinate out of range ({self.lon}, {self.lat})")


def geodesic_m(a: LonLat, b: LonLat) -> float:
    """Haversine distance in metres."""
    phi1 = math.radians(a.lat)
    phi2 = math.radians(b.lat)
    dphi = math.radians(b.lat - a.lat)
    dlam = math.radians(b.lon - a.lon)
    s = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(s)))


def geodesic_m_arr(lons1, lats1, lons2, lats2):
    """Vectorized haversine over numpy arrays of degrees."""
    phi1 = np.radians(lats1)
    phi2 = np.radians(lats2)
    dphi = np.radians(np.asarray(lats2) - np.asarray(lats1))
    dlam = np.radians(np.asarray(lons2) - np.asarray(lons1))
    s = np.sin(dphi / 2.0) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(s)))


def local_xy_m(p: LonLat, origin: LonLat) -> tuple[float, float]:
    """Project to metres east/north of ``origin`` in the local plane."""
    kx = math.radians(1.0) * EARTH_RADIUS_M * math.cos(math.radians(origin.lat))
    ky = math.radians(1.0) * EARTH_RADIUS_M
    return (p.lon - origin.lon) * kx, (p.lat - origin.lat) * ky


@dataclass
class Polyline:
    """Ordered lon/lat vertices with cumulative geodesic length prefix sums."""

    points: list[LonLat]
    cum_len_m: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        if len(self.points) < 2:
            raise GeometryError("polyline needs at least 2 points")
        lons = np.array([p.lon for p in self.points])
        lats = np.array([p.lat for p in self.points])
        seg = geodesic_m_arr(lons[:-1], lats[:-1], lons[1:], lats[1:])
        self.cum_len_m = np.concatenate([[0.0], np.cumsum(seg)])
        if self.total_len_m <= 0.0:
            raise GeometryError("polyline has zero total length")
        self._lons = lons
        self._lats = lats

    @property
    def total_len_m(self) -> float:
        return float(self.cum_len_m[-1])

    def coords(self) -> np.ndarray:
        """(N, 2) array of [lon, lat]."""
        return np.stack([self._lons, self._lats], axis=1)


def project_to_polyline(p: LonLat, pl: Polyline, start_edge: int = 0) -> tuple[float, LonLat, float]:
    """Project ``p`` onto ``pl``; returns (abs_fraction, foot, dist_m).

    The perpendicular foot is computed per edge in the local plane, clamped
    to the edge, and the globally nearest edge wins (ties to the smaller
    edge index).  ``start_edge`` restricts the search to edges >= that
    index, which gives the forward-monotone window used for labeling.
    """
    frac, foot, dist, _ = project_to_polyline_edge(p, pl, start_edge)
    return frac, foot, dist


def project_to_polyline_edge(
    p: LonLat, pl: Polyline, start_edge: int = 0
) -> tuple[float, LonLat, float, int]:
    """Like project_to_polyline but also returns the winning edge index."""
    origin = pl.points[0]
    kx = math.radians(1.0) * EARTH_RADIUS_M * math.cos(math.radians(origin.lat))
    ky = math.radians(1.0) * EARTH_RADIUS_M
    xs = (pl._lons - origin.lon) * kx
    ys = (pl._lats - origin.lat) * ky
    px = (p.lon - origin.lon) * kx
    py = (p.lat - origin.lat) * ky

    start_edge = max(0, min(start_edge, len(pl.points) - 2))
    ax, ay = xs[start_edge:-1], ys[start_edge:-1]
    dx, dy = np.diff(xs[start_edge:]), np.diff(ys[start_edge:])
    den = dx * dx + dy * dy
    with np.errstate(invalid="ignore", divide="ignore"):
        t = ((px - ax) * dx + (py - ay) * dy) / den
    t = np.clip(np.where(den > 0.0, t, 0.0), 0.0, 1.0)
    fx = ax + t * dx
    fy = ay + t * dy
    d2 = (px - fx) ** 2 + (py - fy) ** 2
    j = int(np.argmin(d2))  # argmin keeps the first (smallest) index on ties
    edge = start_edge + j

    foot = LonLat(origin.lon + fx[j] / kx, origin.lat + fy[j] / ky)
    edge_len = pl.cum_len_m[edge + 1] - pl.cum_len_m[edge]
    along = pl.cum_len_m[edge] + t[j] * edge_len
    frac = min(1.0, max(0.0, along / pl.total_len_m))
    return frac, foot, geodesic_m(p, foot), edge


def point_at_fraction(pl: Polyline, t: float) -> LonLat:
    """Point at arc-length fraction ``t`` in [0, 1] along the polyline."""
    if not 0.0 <= t <= 1.0:
        raise GeometryError(f"fraction {t} outside [0, 1]")
    target = t * pl.total_len_m
    i = int(np.searchsorted(pl.cum_len_m, target, side="right")) - 1
    i = min(max(i, 0), len(pl.points) - 2)
    seg_len = pl.cum_len_m[i + 1] - pl.cum_len_m[i]
    u = 0.0 if seg_len <= 0.0 else (target - pl.cum_len_m[i]) / seg_len
    a, b = pl.points[i], pl.points[i + 1]
    return LonLat(a.lon + (b.lon - a.lon) * u, a.lat + (b.lat - a.lat) * u)


#: Sentinel returned by grid_index for points outside the grid bbox.
OUT_OF_BOUNDS = (-1, -1)


@dataclass(frozen=True)
class GridSpec:
    """Regular metric grid anchored at the bbox south-west corner."""

    origin: LonLat
    cell_m: float
    rows: int
    cols: int

    def __post_init__(self) -> None:
        if self.cell_m <= 0 or self.rows <= 0 or self.cols <= 0:
            raise ValueError("cell_m, rows and cols must be positive")


def grid_index(p: LonLat, g: GridSpec) -> tuple[int, int]:
    """Half-open (row, col) cell of ``p``; OUT_OF_BOUNDS if outside."""
    x, y = local_xy_m(p, g.origin)
    row = math.floor(y / g.cell_m)
    col = math.floor(x / g.cell_m)
    if 0 <= row < g.rows and 0 <= col < g.cols:
        return row, col
    return OUT_OF_BOUNDS


def polyline_from_coords(coords: Sequence[Sequence[float]]) -> Polyline:
    """Build a Polyline from [[lon, lat], ...] pairs."""
    return Polyline([LonLat(float(c[0]), float(c[1])) for c in coords])
