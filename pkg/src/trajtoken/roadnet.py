"""Road network model: directed segment graph, synthetic lattice cities,
shortest paths, and route geometry.

Segments are directed; every undirected street yields two segments, one per
travel direction.  Routes are ordered segment sequences whose geometries are
merged into one polyline (duplicate junction vertices dropped).
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geo import EARTH_RADIUS_M, LonLat, Polyline

__all__ = [
    "RoadSegment",
    "RoadNetwork",
    "Route",
    "NoRouteError",
    "ConnectivityError",
    "build_synthetic_city",
    "shortest_path",
    "route_polyline",
    "segment_spatial_input",
    "save_network",
    "load_network",
]


class NoRouteError(ValueError):
    """Destination unreachable from source."""


class ConnectivityError(ValueError):
    """Consecutive route segments are not adjacent in the network."""


@dataclass
class RoadSegment:
    id: int
    geometry: Polyline

    @property
    def length_m(self) -> float:
        return self.geometry.total_len_m

    @property
    def start(self) -> LonLat:
        return self.geometry.points[0]

    @property
    def end(self) -> LonLat:
        return self.geometry.points[-1]


@dataclass
class RoadNetwork:
    segments: list[RoadSegment]
    successors: list[list[int]]  # successors[i] = sorted ids j with A[i, j] = 1

    def __post_init__(self) -> None:
        n = len(self.segments)
        for i, seg in enumerate(self.segments):
            if seg.id != i:
                raise ValueError(f"segment ids must be 0..{n - 1} in order, got {seg.id} at {i}")
        for succ in self.successors:
            for j in succ:
                if not 0 <= j < n:
                    raise ValueError(f"adjacency references unknown segment {j}")

    @property
    def num_segments(self) -> int:
        return len(self.segments)

    def adjacent(self, i: int, j: int) -> bool:
        return j in self.successors[i]

    def bbox(self) -> tuple[float, float, float, float]:
        """(lon_min, lat_min, lon_max, lat_max) over all segment vertices."""
        coords = np.concatenate([s.geometry.coords() for s in self.segments])
        return (
            float(coords[:, 0].min()),
            float(coords[:, 1].min()),
            float(coords[:, 0].max()),
            float(coords[:, 1].max()),
        )


@dataclass
class Route:
    segment_ids: list[int]
    merged: Polyline
    seg_cum_fraction: np.ndarray  # strictly increasing, last value 1.0

    @property
    def length_m(self) -> float:
        return self.merged.total_len_m


def build_synthetic_city(
    rows: int,
    cols: int,
    spacing_m: float = 200.0,
    jitter_frac: float = 0.1,
    seed: int = 0,
    origin: LonLat = LonLat(104.0, 30.65),
) -> RoadNetwork:
    """Grid-of-streets city: a rows x cols lattice of intersections.

    Every lattice edge becomes two directed segments.  Intersection
    coordinates are jittered by at most ``jitter_frac * spacing_m`` so
    streets are not perfectly straight.  Deterministic per seed.
    """
    if rows < 2 or cols < 2:
        raise ValueError("rows and cols must be >= 2")
    if spacing_m <= 0:
        raise ValueError("spacing_m must be positive")
    if not 0.0 <= jitter_frac < 0.5:
        raise ValueError("jitter_frac must be in [0, 0.5)")

    rng = np.random.default_rng(seed)
    kx = math.radians(1.0) * EARTH_RADIUS_M * math.cos(math.radians(origin.lat))
    ky = math.radians(1.0) * EARTH_RADIUS_M

    # intersection positions in local metres, then jitter
    nodes = np.empty((rows, cols, 2))
    for r in range(rows):
        for c in range(cols):
            nodes[r, c] = (c * spacing_m, r * spacing_m)
    nodes += rng.uniform(-jitter_frac * spacing_m, jitter_frac * spacing_m, size=nodes.shape)

    def lonlat(r: int, c: int) -> LonLat:
        x, y = nodes[r, c]
        return LonLat(origin.lon + x / kx, origin.lat + y / ky)

    # undirected lattice edges in a stable order: east streets then north streets
    edges: list[tuple[tuple[int, int], tuple[int, int]]] = []
    for r in range(rows):
        for c in range(cols - 1):
            edges.append(((r, c), (r, c + 1)))
    for r in range(rows - 1):
        for c in range(cols):
            edges.append(((r, c), (r + 1, c)))

    segments: list[RoadSegment] = []
    node_out: dict[tuple[int, int], list[int]] = {}  # node -> outgoing segment ids
    node_in: dict[tuple[int, int], list[int]] = {}  # node -> incoming segment ids
    for a, b in edges:
        for u, v in ((a, b), (b, a)):
            sid = len(segments)
            segments.append(RoadSegment(sid, Polyline([lonlat(*u), lonlat(*v)])))
            node_out.setdefault(u, []).append(sid)
            node_in.setdefault(v, []).append(sid)

    # A[i, j] = 1 iff segment j starts where segment i ends
    successors: list[list[int]] = [[] for _ in segments]
    seg_end: list[tuple[int, int]] = []
    for a, b in edges:
        seg_end.append(b)
        seg_end.append(a)
    for i, node in enumerate(seg_end):
        successors[i] = sorted(node_out.get(node, []))

    return RoadNetwork(segments, successors)


def shortest_path(net: RoadNetwork, src_id: int, dst_id: int) -> Route:
    """Minimum total-length segment path from src to dst (both inclusive).

    Dijkstra over segments; ties broken deterministically by preferring the
    smaller predecessor segment id.
    """
    n = net.num_segments
    if not (0 <= src_id < n and 0 <= dst_id < n):
        raise ValueError(f"segment id out of range (V={n})")
    if src_id == dst_id:
        return route_polyline(net, [src_id])

    lengths = [s.length_m for s in net.segments]
    dist = np.full(n, np.inf)
    prev = np.full(n, -1, dtype=int)
    dist[src_id] = lengths[src_id]
    heap = [(dist[src_id], src_id)]
    done = np.zeros(n, dtype=bool)
    while heap:
        d, i = heapq.heappop(heap)
        if done[i]:
            continue
        done[i] = True
        if i == dst_id:
            break
        for j in net.successors[i]:
            nd = d + lengths[j]
            if nd < dist[j] - 1e-12 or (abs(nd - dist[j]) <= 1e-12 and prev[j] > i):
                dist[j] = nd
                prev[j] = i
                heapq.heappush(heap, (nd, j))
    if not done[dst_id]:
        raise NoRouteError(f"segment {dst_id} unreachable from {src_id}")

    ids = [dst_id]
    while ids[-1] != src_id:
        ids.append(int(prev[ids[-1]]))
    ids.reverse()
    return route_polyline(net, ids)


def route_polyline(net: RoadNetwork, segment_ids: list[int]) -> Route:
    """Merge segment geometries into one polyline, deduplicating junctions."""
    if not segment_ids:
        raise ValueError("route must contain at least one segment")
    for a, b in zip(segment_ids, segment_ids[1:]):
        if not net.adjacent(a, b):
            raise ConnectivityError(f"segments {a} -> {b} are not adjacent")

    points: list[LonLat] = []
    for sid in segment_ids:
        geom = net.segments[sid].geometry.points
        start = 1 if points else 0  # drop the shared junction vertex
        points.extend(geom[start:])
    merged = Polyline(points)

    seg_lens = np.array([net.segments[sid].length_m for sid in segment_ids])
    cum = np.cumsum(seg_lens)
    frac = cum / cum[-1]
    frac[-1] = 1.0
    return Route(list(segment_ids), merged, frac)


def segment_spatial_input(seg: RoadSegment, bbox: tuple[float, float, float, float]) -> np.ndarray:
    """Min-max normalized (N, 2) linestring coordinates for spatial pooling."""
    lon_min, lat_min, lon_max, lat_max = bbox
    coords = seg.geometry.coords()
    out = np.empty_like(coords)
    out[:, 0] = (coords[:, 0] - lon_min) / (lon_max - lon_min)
    out[:, 1] = (coords[:, 1] - lat_min) / (lat_max - lat_min)
    return out


def save_network(net: RoadNetwork, path: str | Path) -> None:
    doc = {
        "segments": [
            {"id": s.id, "points": [[p.lon, p.lat] for p in s.geometry.points]}
            for s in net.segments
        ],
        "adjacency": [[i, j] for i in range(net.num_segments) for j in net.successors[i]],
    }
    Path(path).write_text(json.dumps(doc))


def load_network(path: str | Path) -> RoadNetwork:
    doc = json.loads(Path(path).read_text())
    segs = sorted(doc["segments"], key=lambda s: s["id"])
    segments = [
        RoadSegment(s["id"], Polyline([LonLat(lon, lat) for lon, lat in s["points"]]))
        for s in segs
    ]
    successors: list[list[int]] = [[] for _ in segments]
    for i, j in doc["adjacency"]:
        successors[i].append(j)
    successors = [sorted(s) for s in successors]
    return RoadNetwork(segments, successors)
