"""Distribution-similarity evaluation between a real and a generated
trajectory dataset: point-level JSDs (travel distance, step distance,
radius of gyration), grid-level density/pattern, and road-level
density/pattern/point-to-road distance.

JSD histograms use B equal-width bins over the pooled min-max of the two
samples with epsilon smoothing, so the comparison is symmetric in its
inputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geo import (
    EARTH_RADIUS_M,
    GridSpec,
    LonLat,
    OUT_OF_BOUNDS,
    geodesic_m_arr,
    grid_index,
)
from .roadnet import RoadNetwork, Route, route_polyline
from .traj import GpsTrajectory

__all__ = [
    "Histogram",
    "MetricsConfig",
    "MetricsReport",
    "jsd",
    "make_histogram_pair",
    "trajectory_scalars",
    "point_level",
    "grid_level",
    "road_level",
    "evaluate",
    "UndefinedMetricError",
]

EPS = 1e-10


class UndefinedMetricError(ValueError):
    pass


@dataclass
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    probs: np.ndarray


def make_histogram_pair(a: np.ndarray, b: np.ndarray, bins: int) -> tuple[Histogram, Histogram]:
    """Equal-width histograms over the pooled range of both samples."""
    pooled = np.concatenate([a, b])
    lo, hi = float(pooled.min()), float(pooled.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    out = []
    for x in (a, b):
        counts, _ = np.histogram(x, bins=edges)
        probs = counts.astype(float) + EPS
        probs /= probs.sum()
        out.append(Histogram(edges, counts, probs))
    return out[0], out[1]


def jsd(p: Histogram, q: Histogram) -> float:
    """Jensen-Shannon divergence, log base 2, in [0, 1]."""
    if not np.array_equal(p.bin_edges, q.bin_edges):
        raise ValueError("histograms must share bin edges")
    return _jsd_probs(p.probs, q.probs)


def _jsd_probs(p: np.ndarray, q: np.ndarray) -> float:
    m = 0.5 * (p + q)

    def kl(a, b):
        nz = a > 0
        return float((a[nz] * np.log2(a[nz] / b[nz])).sum())

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def _jsd_from_samples(a: np.ndarray, b: np.ndarray, bins: int) -> float:
    ha, hb = make_histogram_pair(a, b, bins)
    return jsd(ha, hb)


# --- point level --------------------------------------------------------------

def trajectory_scalars(traj: GpsTrajectory) -> tuple[float, np.ndarray, float]:
    """(travel_dist_m, step_dists_m, radius_of_gyration_m) for one trajectory."""
    pts = traj.points
    steps = geodesic_m_arr(pts[:-1, 0], pts[:-1, 1], pts[1:, 0], pts[1:, 1])
    travel = float(steps.sum())
    # radius: RMS distance to the centroid in the local metric plane
    lat0 = float(pts[:, 1].mean())
    kx = math.radians(1.0) * EARTH_RADIUS_M * math.cos(math.radians(lat0))
    ky = math.radians(1.0) * EARTH_RADIUS_M
    x = (pts[:, 0] - pts[:, 0].mean()) * kx
    y = (pts[:, 1] - pts[:, 1].mean()) * ky
    radius = float(np.sqrt((x**2 + y**2).mean()))
    return travel, steps, radius


def point_level(
    real: Sequence[GpsTrajectory], gen: Sequence[GpsTrajectory], bins: int
) -> tuple[float, float, float, int]:
    """(t_dist, s_dist, radius) JSDs plus the count of excluded trajectories."""
    excluded = 0

    def collect(trajs):
        nonlocal excluded
        travels, steps, radii = [], [], []
        for t in trajs:
            if len(t) < 2:
                excluded += 1
                continue
            tr, st, ra = trajectory_scalars(t)
            travels.append(tr)
            steps.append(st)
            radii.append(ra)
        merged = np.concatenate(steps) if steps else np.empty(0)
        return np.array(travels), merged, np.array(radii)

    rt, rs, rr = collect(real)
    gt, gs, gr = collect(gen)
    if rt.size == 0 or gt.size == 0:
        raise UndefinedMetricError("point-level metrics need non-empty datasets")
    return (
        _jsd_from_samples(rt, gt, bins),
        _jsd_from_samples(rs, gs, bins),
        _jsd_from_samples(rr, gr, bins),
        excluded,
    )


# --- grid level ---------------------------------------------------------------

def _cell_counts(trajs: Sequence[GpsTrajectory], grid: GridSpec) -> tuple[dict[tuple[int, int], int], int]:
    counts: dict[tuple[int, int], int] = {}
    out_of_bounds = 0
    for t in trajs:
        for lon, lat in t.points:
            cell = grid_index(LonLat(float(lon), float(lat)), grid)
            if cell == OUT_OF_BOUNDS:
                out_of_bounds += 1
                continue
            counts[cell] = counts.get(cell, 0) + 1
    return counts, out_of_bounds


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise UndefinedMetricError("cosine similarity undefined for empty occupancy")
    return float(a @ b / (na * nb))


def _top_k_f1(real_counts: dict, gen_counts: dict, k: int) -> float:
    """F1 of generated top-k keys against real top-k (ties by key order)."""

    def top(counts):
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return {key for key, _ in ranked[:k]}

    truth, pred = top(real_counts), top(gen_counts)
    tp = len(truth & pred)
    if tp == 0:
        return 0.0
    precision = tp / len(pred)
    recall = tp / len(truth)
    return 2 * precision * recall / (precision + recall)


def grid_level(
    real: Sequence[GpsTrajectory], gen: Sequence[GpsTrajectory], grid: GridSpec, k: int
) -> tuple[float, float, int]:
    """(g_den cosine, g_pat top-k F1, out-of-bounds point tally)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rc, ro = _cell_counts(real, grid)
    gc, go = _cell_counts(gen, grid)
    cells = sorted(set(rc) | set(gc))
    if not cells:
        raise UndefinedMetricError("no occupied grid cells")
    rv = np.array([rc.get(c, 0) for c in cells], dtype=float)
    gv = np.array([gc.get(c, 0) for c in cells], dtype=float)
    return _cosine(rv, gv), _top_k_f1(rc, gc, k), ro + go


# --- road level ---------------------------------------------------------------

def _route_cache(net: RoadNetwork, trajs: Sequence[GpsTrajectory]) -> dict[tuple[int, ...], Route]:
    cache: dict[tuple[int, ...], Route] = {}
    for t in trajs:
        if t.route_ids is None:
            raise ValueError(f"trajectory {t.traj_id} carries no route")
        key = tuple(t.route_ids)
        if key not in cache:
            cache[key] = route_polyline(net, list(key))
    return cache


def assign_points_to_segments(
    traj: GpsTrajectory, route: Route
) -> tuple[np.ndarray, np.ndarray]:
    """(segment_id per point, distance-to-segment metres per point).

    Points are placed on the route polyline by forward-monotone projection
    and attributed to the member segment owning that stretch of the route.
    """
    from .geo import project_to_polyline_edge

    n = len(traj)
    seg_ids = np.empty(n, dtype=int)
    dists = np.empty(n)
    edge = 0
    prev = 0.0
    fractions = np.asarray(route.seg_cum_fraction)
    for i in range(n):
        f, _, d, edge = project_to_polyline_edge(traj.point(i), route.merged, start_edge=edge)
        f = max(f, prev)
        prev = f
        j = int(np.searchsorted(fractions, f, side="left"))
        j = min(j, len(route.segment_ids) - 1)
        seg_ids[i] = route.segment_ids[j]
        dists[i] = d
    return seg_ids, dists


def road_level(
    real: Sequence[GpsTrajectory],
    gen: Sequence[GpsTrajectory],
    net: RoadNetwork,
    k: int,
    bins: int,
) -> tuple[float, float, float]:
    """(r_den cosine, r_pat top-k F1, pr_dist JSD)."""

    def collect(trajs):
        cache = _route_cache(net, trajs)
        counts: dict[int, int] = {}
        dists = []
        for t in trajs:
            segs, dd = assign_points_to_segments(t, cache[tuple(t.route_ids)])
            for s in segs:
                counts[int(s)] = counts.get(int(s), 0) + 1
            dists.append(dd)
        return counts, np.concatenate(dists)

    rc, rd = collect(real)
    gc, gd = collect(gen)
    segs = sorted(set(rc) | set(gc))
    rv = np.array([rc.get(s, 0) for s in segs], dtype=float)
    gv = np.array([gc.get(s, 0) for s in segs], dtype=float)
    return _cosine(rv, gv), _top_k_f1(rc, gc, k), _jsd_from_samples(rd, gd, bins)


# --- full report --------------------------------------------------------------

@dataclass
class MetricsConfig:
    bins: int = 50
    top_k: int = 100
    cell_m: float = 100.0

    def to_json(self) -> dict:
        return {"bins": self.bins, "top_k": self.top_k, "cell_m": self.cell_m}


@dataclass
class MetricsReport:
    t_dist: float
    s_dist: float
    radius: float
    g_den: float
    g_pat: float
    r_den: float
    r_pat: float
    pr_dist: float
    num_real: int
    num_gen: int
    excluded_single_point: int
    out_of_bounds_points: int
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "t_dist": self.t_dist,
            "s_dist": self.s_dist,
            "radius": self.radius,
            "g_den": self.g_den,
            "g_pat": self.g_pat,
            "r_den": self.r_den,
            "r_pat": self.r_pat,
            "pr_dist": self.pr_dist,
            "num_real": self.num_real,
            "num_gen": self.num_gen,
            "excluded_single_point": self.excluded_single_point,
            "out_of_bounds_points": self.out_of_bounds_points,
            "config": self.config,
        }


def dataset_grid(net: RoadNetwork, cell_m: float, margin_m: float = 200.0) -> GridSpec:
    """Grid covering the network bbox plus a noise margin."""
    lon_min, lat_min, lon_max, lat_max = net.bbox()
    ky = math.radians(1.0) * EARTH_RADIUS_M
    kx = ky * math.cos(math.radians(lat_min))
    origin = LonLat(lon_min - margin_m / kx, lat_min - margin_m / ky)
    width_m = (lon_max - origin.lon) * kx + margin_m
    height_m = (lat_max - origin.lat) * ky + margin_m
    return GridSpec(origin, cell_m, int(math.ceil(height_m / cell_m)), int(math.ceil(width_m / cell_m)))


def evaluate(
    real: Sequence[GpsTrajectory],
    gen: Sequence[GpsTrajectory],
    net: RoadNetwork,
    config: MetricsConfig = MetricsConfig(),
) -> MetricsReport:
    grid = dataset_grid(net, config.cell_m)
    t_dist, s_dist, radius, excluded = point_level(real, gen, config.bins)
    g_den, g_pat, oob = grid_level(real, gen, grid, config.top_k)
    r_den, r_pat, pr_dist = road_level(real, gen, net, config.top_k, config.bins)
    return MetricsReport(
        t_dist,
        s_dist,
        radius,
        g_den,
        g_pat,
        r_den,
        r_pat,
        pr_dist,
        len(real),
        len(gen),
        excluded,
        oob,
        config.to_json(),
    )


def write_report(report: MetricsReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
