"""Trajectory data model, kinematic simulation, dataset filtering, and the
relative-reconstruction labels (per-point route-fraction increments plus
normalized off-road offsets).

Labels are built so that reconstruction is the exact inverse: each point is
projected forward-monotonically onto its route polyline, the increment of
the arc-length fraction becomes the percent label, and the displacement
from the reconstructed foot (scaled by the dataset offset deviations)
becomes the offset label.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geo import (
    EARTH_RADIUS_M,
    GeometryError,
    LonLat,
    point_at_fraction,
    project_to_polyline_edge,
)
from .roadnet import RoadNetwork, Route, route_polyline

MIN_POINTS = 20
MAX_POINTS = 200

__all__ = [
    "MIN_POINTS",
    "MAX_POINTS",
    "GpsTrajectory",
    "RelativeLabels",
    "DatasetStats",
    "CongestionZone",
    "TooShortError",
    "simulate_trajectory",
    "filter_dataset",
    "compute_dataset_stats",
    "make_labels",
    "reconstruct_from_labels",
    "normalize_traj",
    "denormalize_traj",
    "save_dataset",
    "load_dataset",
    "save_labels",
    "load_labels",
]


class TooShortError(ValueError):
    """Route traversal produced fewer than two samples."""


@dataclass
class GpsTrajectory:
    points: np.ndarray  # (n, 2) [lon, lat]
    sampling_interval_s: float
    start_time_s: float = 0.0
    route_ids: list[int] | None = None
    traj_id: int = -1

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError(f"points must be (n, 2), got {self.points.shape}")

    def __len__(self) -> int:
        return len(self.points)

    def point(self, i: int) -> LonLat:
        return LonLat(float(self.points[i, 0]), float(self.points[i, 1]))


@dataclass
class RelativeLabels:
    rel_percent: np.ndarray  # (n,) increments; cumsum gives absolute fractions
    offsets: np.ndarray  # (n, 2) displacement / offset_scale
    clamped: int = 0  # backward projections forced monotone

    def abs_fractions(self) -> np.ndarray:
        return np.cumsum(self.rel_percent)


@dataclass
class DatasetStats:
    bbox: tuple[float, float, float, float]  # lon_min, lat_min, lon_max, lat_max
    offset_scale: tuple[float, float]  # (sigma_lon, sigma_lat) in degrees

    def __post_init__(self) -> None:
        if self.offset_scale[0] <= 0 or self.offset_scale[1] <= 0:
            raise ValueError("offset_scale must be positive")

    def to_json(self) -> dict:
        return {"bbox": list(self.bbox), "offset_scale": list(self.offset_scale)}

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetStats":
        return cls(tuple(doc["bbox"]), tuple(doc["offset_scale"]))


@dataclass(frozen=True)
class CongestionZone:
    """Speed multiplier applied on a fraction interval of the route."""

    start_frac: float
    end_frac: float
    speed_factor: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.start_frac < self.end_frac <= 1.0:
            raise ValueError("zone must satisfy 0 <= start < end <= 1")
        if self.speed_factor <= 0:
            raise ValueError("speed_factor must be positive")


def _speed_at(dist_m: float, total_m: float, base_mps: float, zones: Sequence[CongestionZone]) -> float:
    f = dist_m / total_m
    for z in zones:
        if z.start_frac <= f < z.end_frac:
            return base_mps * z.speed_factor
    return base_mps


def _next_boundary(dist_m: float, total_m: float, zones: Sequence[CongestionZone]) -> float:
    """Distance of the next zone boundary strictly ahead of dist_m."""
    f = dist_m / total_m
    nxt = 1.0
    for z in zones:
        for b in (z.start_frac, z.end_frac):
            if b > f + 1e-15:
                nxt = min(nxt, b)
    return nxt * total_m


def simulate_trajectory(
    net: RoadNetwork,
    route: Route,
    speed_mps: float,
    congestion_zones: Sequence[CongestionZone] = (),
    gps_noise_m: float = 0.0,
    interval_s: float = 5.0,
    seed: int = 0,
    start_time_s: float = 0.0,
) -> GpsTrajectory:
    """Move a particle along the route and sample its GPS fix every interval.

    Speed is piecewise constant (reduced inside congestion zones) and
    integrated exactly across zone boundaries.  Isotropic Gaussian noise of
    scale ``gps_noise_m`` is added in the local metric plane.
    """
    if interval_s <= 0 or speed_mps <= 0:
        raise ValueError("interval_s and speed_mps must be positive")
    total = route.length_m
    rng = np.random.default_rng(seed)

    # sample arc distances by event-driven integration
    dists = [0.0]
    d = 0.0
    while d < total:
        remaining = interval_s
        while remaining > 1e-12 and d < total:
            v = _speed_at(d, total, speed_mps, congestion_zones)
            boundary = _next_boundary(d, total, congestion_zones)
            step = min(v * remaining, boundary - d, total - d)
            d += step
            remaining -= step / v
        if d < total or remaining <= 1e-12:
            dists.append(min(d, total))
        else:
            break
    if len(dists) < 2:
        raise TooShortError(
            f"route of {total:.1f} m yields {len(dists)} sample(s) at {interval_s}s interval"
        )

    fracs = np.array(dists) / total
    pts = np.array([[p.lon, p.lat] for p in (point_at_fraction(route.merged, min(f, 1.0)) for f in fracs)])

    if gps_noise_m > 0.0:
        lat0 = pts[0, 1]
        kx = math.radians(1.0) * EARTH_RADIUS_M * math.cos(math.radians(lat0))
        ky = math.radians(1.0) * EARTH_RADIUS_M
        noise = rng.normal(0.0, gps_noise_m, size=pts.shape)
        pts[:, 0] += noise[:, 0] / kx
        pts[:, 1] += noise[:, 1] / ky

    return GpsTrajectory(pts, interval_s, start_time_s, list(route.segment_ids))


def filter_dataset(
    trajs: Iterable[GpsTrajectory],
    bbox: tuple[float, float, float, float] | None = None,
) -> list[GpsTrajectory]:
    """Keep trajectories with 20 <= n <= 200 points, all inside the bbox."""
    kept = []
    for t in trajs:
        n = len(t)
        if n < MIN_POINTS or n > MAX_POINTS:
            continue
        if bbox is not None:
            lon_min, lat_min, lon_max, lat_max = bbox
            if (
                t.points[:, 0].min() < lon_min
                or t.points[:, 0].max() > lon_max
                or t.points[:, 1].min() < lat_min
                or t.points[:, 1].max() > lat_max
            ):
                continue
        kept.append(t)
    return kept


def _monotone_fractions(traj: GpsTrajectory, route: Route) -> tuple[np.ndarray, int]:
    """Forward-monotone absolute arc fractions for every trajectory point."""
    fracs = np.empty(len(traj))
    clamped = 0
    edge = 0
    prev = 0.0
    for i in range(len(traj)):
        f, _, _, edge = project_to_polyline_edge(traj.point(i), route.merged, start_edge=edge)
        if f < prev:
            f = prev
            clamped += 1
        fracs[i] = f
        prev = f
    return fracs, clamped


def compute_dataset_stats(
    trajs: Sequence[GpsTrajectory],
    routes: Sequence[Route],
    bbox: tuple[float, float, float, float],
    min_scale_deg: float = 1e-9,
) -> DatasetStats:
    """Bbox plus per-axis standard deviation of raw offset displacements."""
    deltas = []
    for traj, route in zip(trajs, routes):
        fracs, _ = _monotone_fractions(traj, route)
        feet = np.array(
            [[q.lon, q.lat] for q in (point_at_fraction(route.merged, f) for f in fracs)]
        )
        deltas.append(traj.points - feet)
    raw = np.concatenate(deltas) if deltas else np.zeros((1, 2))
    sigma = raw.std(axis=0)
    return DatasetStats(bbox, (max(float(sigma[0]), min_scale_deg), max(float(sigma[1]), min_scale_deg)))


def make_labels(traj: GpsTrajectory, route: Route, stats: DatasetStats) -> RelativeLabels:
    """Percent increments and normalized offsets for one trajectory."""
    fracs, clamped = _monotone_fractions(traj, route)
    rel = np.diff(fracs, prepend=0.0)
    feet = np.array(
        [[q.lon, q.lat] for q in (point_at_fraction(route.merged, f) for f in fracs)]
    )
    offsets = (traj.points - feet) / np.array(stats.offset_scale)
    return RelativeLabels(rel, offsets, clamped)


def reconstruct_from_labels(
    route: Route, labels: RelativeLabels, stats: DatasetStats,
    interval_s: float = 0.0, start_time_s: float = 0.0,
) -> GpsTrajectory:
    """Inverse of make_labels: fractions from cumsum, plus scaled offsets."""
    cum = np.clip(np.cumsum(labels.rel_percent), 0.0, 1.0)
    feet = np.array(
        [[q.lon, q.lat] for q in (point_at_fraction(route.merged, f) for f in cum)]
    )
    pts = feet + labels.offsets * np.array(stats.offset_scale)
    return GpsTrajectory(pts, interval_s, start_time_s, list(route.segment_ids))


def normalize_traj(points: np.ndarray, bbox: tuple[float, float, float, float]) -> np.ndarray:
    lon_min, lat_min, lon_max, lat_max = bbox
    if lon_max <= lon_min or lat_max <= lat_min:
        raise ValueError("bbox has zero extent")
    out = np.empty_like(points, dtype=float)
    out[:, 0] = (points[:, 0] - lon_min) / (lon_max - lon_min)
    out[:, 1] = (points[:, 1] - lat_min) / (lat_max - lat_min)
    return out


def denormalize_traj(norm: np.ndarray, bbox: tuple[float, float, float, float]) -> np.ndarray:
    lon_min, lat_min, lon_max, lat_max = bbox
    out = np.empty_like(norm, dtype=float)
    out[:, 0] = norm[:, 0] * (lon_max - lon_min) + lon_min
    out[:, 1] = norm[:, 1] * (lat_max - lat_min) + lat_min
    return out


# --- dataset IO (JSON Lines) -------------------------------------------------

def save_dataset(trajs: Sequence[GpsTrajectory], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trajs:
            rec = {
                "id": t.traj_id,
                "route": t.route_ids,
                "start_time_s": t.start_time_s,
                "interval_s": t.sampling_interval_s,
                "points": [[float(lon), float(lat)] for lon, lat in t.points],
            }
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path: str | Path) -> list[GpsTrajectory]:
    trajs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            trajs.append(
                GpsTrajectory(
                    np.array(rec["points"]),
                    rec["interval_s"],
                    rec["start_time_s"],
                    rec["route"],
                    rec["id"],
                )
            )
    return trajs


def save_labels(labels: dict[int, RelativeLabels], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tid in sorted(labels):
            lab = labels[tid]
            rec = {
                "id": tid,
                "rel_percent": [float(x) for x in lab.rel_percent],
                "offsets": [[float(a), float(b)] for a, b in lab.offsets],
            }
            fh.write(json.dumps(rec) + "\n")


def load_labels(path: str | Path) -> dict[int, RelativeLabels]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            out[rec["id"]] = RelativeLabels(
                np.array(rec["rel_percent"]), np.array(rec["offsets"])
            )
    return out
