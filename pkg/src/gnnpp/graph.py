"""Per-day forecast graphs over (station, member) nodes.

Node ``(s, n)`` has index ``s * N + n``. Two nodes are joined, in both
directions, when they belong to the same station (every member pair, self
loops included) or when their stations are closer than ``d_max``. Edge
attribute: ``d / d_max`` across stations, ``eps`` within a station.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

EARTH_RADIUS_KM = 6371.0
DEFAULT_EPS = 1e-6


class GraphConfigError(ValueError):
    pass


def geodesic_km(a, b):
    """Haversine great-circle distance between two (lat, lon) points in degrees."""
    lat1, lon1 = np.radians(a[0]), np.radians(a[1])
    lat2, lon2 = np.radians(b[0]), np.radians(b[1])
    h = np.sin((lat2 - lat1) / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2
    return float(2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(min(1.0, h))))


def distance_matrix(coords):
    coords = np.radians(np.asarray(coords, dtype=np.float64))
    lat, lon = coords[:, 0], coords[:, 1]
    dlat = lat[:, None] - lat[None, :]
    dlon = lon[:, None] - lon[None, :]
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.minimum(1.0, h)))


@dataclass(frozen=True)
class Topology:
    """Edge structure shared by every day with the same stations and member count."""

    n_stations: int
    n_members: int
    src: np.ndarray
    dst: np.ndarray
    edge_attr: np.ndarray

    @property
    def n_nodes(self):
        return self.n_stations * self.n_members

    @property
    def n_edges(self):
        return len(self.src)

    def batched(self, n_graphs):
        """Block-diagonal union of ``n_graphs`` copies (day-major node order)."""
        V = self.n_nodes
        offs = (np.arange(n_graphs, dtype=np.int64) * V)[:, None]
        return (
            (self.src[None, :] + offs).ravel(),
            (self.dst[None, :] + offs).ravel(),
            np.tile(self.edge_attr, n_graphs),
        )


def build_topology(coords, n_members, d_max, eps=DEFAULT_EPS, self_loops_only=False):
    """Edges for stations at ``coords`` (S, 2) with ``n_members`` members each."""
    if not d_max > 0:
        raise GraphConfigError(f"d_max must be > 0 km, got {d_max}")
    if not eps > 0:
        raise GraphConfigError(f"eps must be > 0, got {eps}")
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    S, N = len(coords), int(n_members)
    if self_loops_only:
        idx = np.arange(S * N, dtype=np.int64)
        return Topology(S, N, idx, idx.copy(), np.full(S * N, float(eps)))
    D = distance_matrix(coords)
    adjacent = D < d_max
    np.fill_diagonal(adjacent, True)
    dst_s, src_s = np.nonzero(adjacent)
    attr_pair = np.where(dst_s == src_s, eps, np.maximum(D[dst_s, src_s] / d_max, eps))
    v, u = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
    dst = (dst_s[:, None] * N + v.ravel()[None, :]).ravel()
    src = (src_s[:, None] * N + u.ravel()[None, :]).ravel()
    attr = np.repeat(attr_pair, N * N)
    return Topology(S, N, src.astype(np.int64), dst.astype(np.int64), attr)


@lru_cache(maxsize=32)
def _cached_topology(coords_key, n_members, d_max, eps, self_loops_only):
    return build_topology(np.array(coords_key), n_members, d_max, eps, self_loops_only)


def topology_for(stations, n_members, d_max, eps=DEFAULT_EPS, self_loops_only=False):
    key = tuple((s.lat, s.lon) for s in stations)
    return _cached_topology(key, int(n_members), float(d_max), float(eps), bool(self_loops_only))


@dataclass
class ForecastGraph:
    day: int
    station_ids: np.ndarray
    n_members: int
    x: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_attr: np.ndarray

    @property
    def n_nodes(self):
        return self.x.shape[0]

    @property
    def nodes(self):
        """(station position, member) per node, in node order."""
        V = self.n_nodes
        return [(i // self.n_members, i % self.n_members) for i in range(V)]

    @property
    def node_station(self):
        return np.arange(self.n_nodes) // self.n_members

    def edge_set(self):
        return set(zip(self.src.tolist(), self.dst.tolist()))


def node_features(ds, day, normalizer=None, embeddings=None):
    """(S * N, F) node features for one day: inputs, optionally standardised, plus embeddings."""
    t = ds.day_positions([day])[0]
    x = ds.select([t]).node_inputs()[0]
    if normalizer is not None:
        x = normalizer.apply(x)
    S, N, F = x.shape
    x = x.reshape(S * N, F)
    if embeddings is not None:
        emb = np.asarray(embeddings, dtype=np.float64)
        x = np.concatenate([x, np.repeat(emb, N, axis=0)], axis=1)
    return x


def build_graph(ds, day, d_max, eps=DEFAULT_EPS, embeddings=None, normalizer=None, self_loops_only=False):
    """Forecast graph for ``day``.

    ``embeddings`` (S, D), when given, is appended to every node of the
    matching station. Models with learned embeddings pass ``None`` and append
    their own differentiable lookup.
    """
    topo = build_topology(ds.static()[:, :2], ds.n_members, d_max, eps, self_loops_only)
    return ForecastGraph(
        day=int(day),
        station_ids=ds.station_ids,
        n_members=ds.n_members,
        x=node_features(ds, day, normalizer, embeddings),
        src=topo.src,
        dst=topo.dst,
        edge_attr=topo.edge_attr,
    )


def brute_force_edges(coords, n_members, d_max, eps=DEFAULT_EPS):
    """Reference O(V^2) enumeration of the edge definition: {(src, dst): attr}."""
    S, N = len(coords), n_members
    edges = {}
    for a in range(S * N):
        for b in range(S * N):
            i, j = a // N, b // N
            if i == j:
                edges[(a, b)] = eps
                continue
            d = geodesic_km(coords[i], coords[j])
            if d < d_max:
                edges[(a, b)] = max(d / d_max, eps)
    return edges


def write_edge_list(graph, path):
    """Debug dump: day,src_s,src_n,dst_s,dst_n,dist_norm (station ids, member indices)."""
    N = graph.n_members
    ids = graph.station_ids
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["day", "src_s", "src_n", "dst_s", "dst_n", "dist_norm"])
        for a, b, d in zip(graph.src.tolist(), graph.dst.tolist(), graph.edge_attr.tolist()):
            w.writerow([graph.day, int(ids[a // N]), a % N, int(ids[b // N]), b % N, repr(d)])
