"""Geometry and road-network tour.

Builds a small jittered lattice city, routes across it, and shows the
projection primitives that the rest of the pipeline is built on.
"""

import numpy as np

from trajtoken.geo import LonLat, geodesic_m, point_at_fraction, project_to_polyline
from trajtoken.roadnet import build_synthetic_city, route_polyline, shortest_path

net = build_synthetic_city(rows=4, cols=5, spacing_m=300.0, jitter_frac=0.1, seed=7)
print(f"city: 4x5 lattice, {net.num_segments} directed segments")
print(f"bbox: {np.round(net.bbox(), 4)}")

src, dst = 0, net.num_segments - 1
route = shortest_path(net, src, dst)
print(f"\nshortest path {src} -> {dst}: {len(route.segment_ids)} segments, "
      f"{route.length_m:.1f} m")
print(f"segment ids: {route.segment_ids}")

# the merged polyline parameterizes the whole route by arc fraction
for f in (0.0, 0.25, 0.5, 0.75, 1.0):
    p = point_at_fraction(route.merged, f)
    print(f"  fraction {f:.2f} -> ({p.lon:.5f}, {p.lat:.5f})")

# displace a mid-route point sideways and project it back
mid = point_at_fraction(route.merged, 0.5)
off = LonLat(mid.lon, mid.lat + 5e-5)
frac, snapped, dist = project_to_polyline(off, route.merged)
print(f"\npoint displaced ~{geodesic_m(mid, off):.1f} m off-route projects to "
      f"fraction {frac:.4f}, {dist:.1f} m away")
