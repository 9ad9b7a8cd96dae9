"""Shared fixtures: small deterministic networks, routes, and datasets."""

import numpy as np
import pytest

from trajtoken.roadnet import build_synthetic_city, shortest_path
from trajtoken.traj import (
    CongestionZone,
    compute_dataset_stats,
    make_labels,
    simulate_trajectory,
)


@pytest.fixture(scope="session")
def small_net():
    """4x4 lattice with jitter, 96 directed segments."""
    return build_synthetic_city(4, 4, spacing_m=300.0, jitter_frac=0.1, seed=7)


@pytest.fixture(scope="session")
def flat_net():
    """3x3 lattice without jitter: closed-form Manhattan geometry."""
    return build_synthetic_city(3, 3, spacing_m=250.0, jitter_frac=0.0, seed=0)


@pytest.fixture(scope="session")
def small_dataset(small_net):
    """A handful of simulated trajectories with routes, labels, and stats."""
    rng = np.random.default_rng(11)
    trajs, routes = [], []
    attempts = 0
    while len(trajs) < 12 and attempts < 200:
        attempts += 1
        src, dst = rng.integers(0, small_net.num_segments, size=2)
        try:
            route = shortest_path(small_net, int(src), int(dst))
        except ValueError:
            continue
        zones = (CongestionZone(0.3, 0.6, 0.5),)
        try:
            t = simulate_trajectory(
                small_net, route, speed_mps=10.0, congestion_zones=zones,
                gps_noise_m=4.0, interval_s=3.0, seed=int(rng.integers(1 << 31)),
            )
        except ValueError:
            continue
        if not 20 <= len(t) <= 200:
            continue
        t.traj_id = len(trajs)
        trajs.append(t)
        routes.append(route)
    assert len(trajs) == 12
    stats = compute_dataset_stats(trajs, routes, small_net.bbox())
    labels = {t.traj_id: make_labels(t, r, stats) for t, r in zip(trajs, routes)}
    return trajs, routes, labels, stats


@pytest.fixture
def rng():
    return np.random.default_rng(0)
