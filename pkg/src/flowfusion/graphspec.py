"""Adjacency graph over road-segment locations.

One shared graph covers all flow nodes; vehicle-flow nodes reuse their
mapped segment's rows, so no second graph exists. The default
construction is a thresholded Gaussian kernel of great-circle distance.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .flowdata import RoadSegment

EARTH_RADIUS_M = 6371000.0


class GraphError(ValueError):
    pass


@dataclass
class GraphSpec:
    node_ids: list[str]
    weights: np.ndarray  # [N, N], non-negative
    self_loops: bool = True

    def validate(self) -> "GraphSpec":
        n = len(self.node_ids)
        if self.weights.shape != (n, n):
            raise GraphError(f"weights shape {self.weights.shape} for {n} nodes")
        if np.any(self.weights < 0):
            raise GraphError("negative edge weight")
        if self.self_loops and not np.allclose(np.diag(self.weights), 1.0):
            raise GraphError("self_loops set but diagonal is not 1")
        return self

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)


def haversine_m(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in meters."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(math.sqrt(a))


def build_distance_graph(
    segments: Sequence[RoadSegment],
    sigma_m: float = 1000.0,
    threshold: float = 0.1,
) -> GraphSpec:
    """Gaussian kernel w_ij = exp(-(d_ij / sigma_m)^2), pruned below threshold."""
    if len(segments) < 2:
        raise GraphError(f"need at least 2 segments, got {len(segments)}")
    if sigma_m <= 0:
        raise GraphError(f"sigma_m must be positive, got {sigma_m}")
    if not 0 < threshold <= 1:
        raise GraphError(f"threshold must be in (0, 1], got {threshold}")
    n = len(segments)
    weights = np.zeros((n, n))
    duplicates = 0
    for i in range(n):
        weights[i, i] = 1.0
        for j in range(i + 1, n):
            d = haversine_m(
                segments[i].center_lat, segments[i].center_lon,
                segments[j].center_lat, segments[j].center_lon,
            )
            if d == 0.0:
                duplicates += 1
            w = math.exp(-((d / sigma_m) ** 2))
            if w < threshold:
                w = 0.0
            weights[i, j] = weights[j, i] = w  # mirrored, symmetric bit for bit
    if duplicates:
        warnings.warn(f"{duplicates} segment pairs share coordinates (weight 1)", stacklevel=2)
    return GraphSpec([str(s.segment_id) for s in segments], weights, True).validate()


def row_normalize(g: GraphSpec) -> GraphSpec:
    sums = g.weights.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        raise GraphError("row with non-positive sum; self-loops guarantee positivity")
    return GraphSpec(list(g.node_ids), g.weights / sums, False)


def restrict(g: GraphSpec, node_ids: Sequence[str]) -> GraphSpec:
    """Subgraph reusing the rows/columns of the given nodes, in order."""
    try:
        idx = [g.node_ids.index(str(n)) for n in node_ids]
    except ValueError as exc:
        raise GraphError(f"unknown node in restriction: {exc}") from None
    sub = g.weights[np.ix_(idx, idx)].copy()
    np.fill_diagonal(sub, 1.0)
    return GraphSpec([str(n) for n in node_ids], sub, True).validate()


def load_adjacency(path, node_ids: Sequence[str]) -> GraphSpec:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        rows = [row for row in reader if row and any(c.strip() for c in row)]
    expected = [str(n) for n in node_ids]
    if header != expected:
        raise GraphError(
            f"{path}: header order {header} does not match flow node order {expected}"
        )
    if len(rows) != len(expected):
        raise GraphError(f"{path}: {len(rows)} rows for {len(expected)} nodes (not square)")
    try:
        weights = np.asarray([[float(c) for c in row] for row in rows])
    except ValueError as exc:
        raise GraphError(f"{path}: {exc}") from None
    if weights.shape != (len(expected), len(expected)):
        raise GraphError(f"{path}: matrix shape {weights.shape} is not square")
    if np.any(weights < 0):
        raise GraphError(f"{path}: negative weights rejected")
    self_loops = bool(np.allclose(np.diag(weights), 1.0))
    return GraphSpec(expected, weights, self_loops).validate()


def save_adjacency(g: GraphSpec, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(g.node_ids)
        for row in g.weights:
            writer.writerow([repr(float(v)) for v in row])
