"""Synthetic flow pairs with a planted, controllable relationship.

A shared daily profile drives a latent vehicle count per node. Cameras
observe that count directly; the cellular-traffic side sees it through a
per-node multiplier plus an additive pedestrian component, so the two
sources share trends but differ in magnitude, and the disparity is
node-specific. With both noise terms at zero the relation collapses to
``gct = multiplier * vehicle`` exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, time, timedelta
from typing import Sequence

import numpy as np

from .flowdata import (
    CameraMapping,
    FlowDataError,
    FlowKind,
    FlowMatrix,
    RoadSegment,
    day_interval_count,
)
from .numcore import seeded_rng

PROFILE_AMPLITUDE = 400.0
PEDESTRIAN_LEVEL_FACTOR = 4.0  # bump amplitude per unit of pedestrian noise std
SEGMENT_SPACING_M = 250.0
BASE_LAT, BASE_LON = 24.78, 120.97
START_DATE = datetime(2022, 8, 1)

PROFILES = ("commute-peaked", "midday-peaked", "flat")


@dataclass(frozen=True)
class SynthConfig:
    n_nodes: int
    m_cameras: int
    days: int = 14
    interval_minutes: int = 5
    base_profile: str = "commute-peaked"
    vehicle_scale: float | Sequence[float] = 3.0  # gct = scale * vehicle (+ pedestrians)
    pedestrian_noise_std: float = 25.0
    observation_noise_std: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not self.n_nodes > self.m_cameras >= 2:
            raise FlowDataError(
                f"need N > M >= 2, got N={self.n_nodes} M={self.m_cameras}"
            )
        if self.days < 1:
            raise FlowDataError("days must be >= 1")
        if self.pedestrian_noise_std < 0 or self.observation_noise_std < 0:
            raise FlowDataError("noise stds must be >= 0")
        if self.base_profile not in PROFILES:
            raise FlowDataError(f"unknown profile {self.base_profile!r}; pick from {PROFILES}")

    def scales(self) -> np.ndarray:
        if np.isscalar(self.vehicle_scale):
            return np.full(self.n_nodes, float(self.vehicle_scale))
        arr = np.asarray(self.vehicle_scale, dtype=float)
        if arr.shape != (self.n_nodes,):
            raise FlowDataError(
                f"vehicle_scale needs {self.n_nodes} entries, got {arr.shape}"
            )
        return arr


def _bump(h: np.ndarray, center: float, width: float) -> np.ndarray:
    return np.exp(-((h - center) ** 2) / (2.0 * width * width))


def base_profile(name: str, hours: np.ndarray) -> np.ndarray:
    """Dimensionless daily shape evaluated at fractional hours."""
    if name == "commute-peaked":
        return 0.2 + 1.0 * _bump(hours, 8.5, 1.2) + 0.6 * _bump(hours, 17.5, 1.5)
    if name == "midday-peaked":
        return 0.2 + 1.0 * _bump(hours, 12.5, 2.0)
    if name == "flat":
        return np.full_like(hours, 0.6)
    raise FlowDataError(f"unknown profile {name!r}")


def pedestrian_profile(hours: np.ndarray) -> np.ndarray:
    # deliberately midday-shaped so it corrupts commute-shaped flows
    return _bump(hours, 13.0, 2.5)


def make_segments(n_nodes: int) -> list[RoadSegment]:
    dlat = SEGMENT_SPACING_M / 6371000.0 * 180.0 / math.pi
    return [RoadSegment(i + 1, BASE_LAT + i * dlat, BASE_LON) for i in range(n_nodes)]


def generate(config: SynthConfig):
    """Returns (gct_flows, vehicle_flows, mapping, segments).

    Latent vehicle count per node and interval:
        v = max(0, round(amplitude * profile(t) + noise_v))
    Cameras observe v directly. The cellular-traffic side sees
        g = max(0, round(scale_s * v + ped_level_s * ped_profile(t) + noise_g))
    with ped_level_s drawn once per node, so magnitude disparity varies
    by node. Same seed, same matrices.
    """
    rng = seeded_rng(config.seed)
    n, m = config.n_nodes, config.m_cameras
    per_day = day_interval_count(time(6, 0), time(19, 0), config.interval_minutes)
    t_total = per_day * config.days

    hours = 6.0 + np.arange(per_day) * (config.interval_minutes / 60.0)
    profile_day = base_profile(config.base_profile, hours)
    ped_day = pedestrian_profile(hours)
    profile = np.tile(profile_day, config.days)[:, None]  # [T, 1]
    ped_shape = np.tile(ped_day, config.days)[:, None]

    scales = config.scales()[None, :]  # [1, N]
    ped_level = (
        PEDESTRIAN_LEVEL_FACTOR
        * config.pedestrian_noise_std
        * rng.uniform(0.5, 1.5, size=n)[None, :]
    )
    noise_v = rng.normal(0.0, 1.0, size=(t_total, n)) * config.observation_noise_std
    noise_ped = rng.normal(0.0, 1.0, size=(t_total, n)) * config.pedestrian_noise_std
    noise_g = rng.normal(0.0, 1.0, size=(t_total, n)) * config.observation_noise_std

    vehicle = np.maximum(0.0, np.round(PROFILE_AMPLITUDE * profile + noise_v))
    gct = np.maximum(
        0.0, np.round(scales * vehicle + ped_level * ped_shape + noise_ped + noise_g)
    )

    times = [
        START_DATE + timedelta(days=d, hours=6, minutes=config.interval_minutes * i)
        for d in range(config.days)
        for i in range(per_day)
    ]
    segments = make_segments(n)
    node_ids = [str(s.segment_id) for s in segments]
    gct_flows = FlowMatrix(times, node_ids, gct, config.interval_minutes, FlowKind.GCT).validate()
    veh_flows = FlowMatrix(
        list(times), [f"Cam{i + 1}" for i in range(m)], vehicle[:, :m].copy(),
        config.interval_minutes, FlowKind.VEHICLE,
    ).validate()
    mapping = CameraMapping(tuple((f"Cam{i + 1}", i + 1) for i in range(m)))
    mapping.validate(node_ids, veh_flows.node_ids)
    return gct_flows, veh_flows, mapping, segments
