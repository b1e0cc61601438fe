import csv

import numpy as np
import pytest

from gnnpp.data import ForecastDataset, Normalizer, Station
from gnnpp.graph import (
    GraphConfigError,
    brute_force_edges,
    build_graph,
    build_topology,
    distance_matrix,
    geodesic_km,
    topology_for,
    write_edge_list,
)
from gnnpp.synth import KM_PER_DEG


pytestmark = pytest.mark.filterwarnings("ignore:constant feature")


def dataset_at(coords, n_members=1, n_days=2, seed=0):
    rng = np.random.default_rng(seed)
    stations = [Station(id=s + 1, lat=float(a), lon=float(b), alt=0.0, orog=0.0) for s, (a, b) in enumerate(coords)]
    S = len(coords)
    return ForecastDataset(
        stations,
        np.arange(n_days),
        ["t2m"],
        rng.normal(size=(n_days, S, n_members, 1)),
        rng.normal(size=(n_days, 2)),
        rng.normal(size=(n_days, S)),
    )


def edge_dict(g):
    return {(a, b): d for a, b, d in zip(g.src.tolist(), g.dst.tolist(), g.edge_attr.tolist())}


def test_geodesic_examples():
    assert geodesic_km((0, 0), (0, 0)) == 0.0
    assert abs(geodesic_km((0, 0), (0, 1)) - 111.195) < 0.001
    assert abs(geodesic_km((52.52, 13.405), (48.8566, 2.3522)) - 877.46) < 0.5
    a, b = (47.1, 8.3), (51.9, 11.0)
    assert geodesic_km(a, b) == geodesic_km(b, a) > 0


def test_distance_matrix_matches_scalar(rng):
    c = np.column_stack([rng.uniform(-60, 60, 8), rng.uniform(-170, 170, 8)])
    D = distance_matrix(c)
    for i in range(8):
        for j in range(8):
            assert abs(D[i, j] - geodesic_km(c[i], c[j])) < 1e-9


def test_single_station_clique():
    g = build_graph(dataset_at([(50.0, 8.0)], n_members=11), 0, d_max=100)
    assert g.n_nodes == 11 and len(g.src) == 121
    assert np.all(g.edge_attr == 1e-6)


def test_three_station_example():
    # triangle with sides 50, 200, 230 km laid out in a local flat frame
    x_c = (200**2 - 230**2 + 50**2) / (2 * 50)
    y_c = np.sqrt(200**2 - x_c**2)
    lat0 = 50.0
    to_deg = lambda x, y: (lat0 + y / KM_PER_DEG, 8.0 + x / (KM_PER_DEG * np.cos(np.radians(lat0))))  # noqa: E731
    coords = [to_deg(0, 0), to_deg(50, 0), to_deg(x_c, y_c)]
    D = distance_matrix(coords)
    assert abs(D[0, 1] - 50) < 1 and abs(D[0, 2] - 200) < 3 and abs(D[1, 2] - 230) < 3
    g = build_graph(dataset_at(coords), 0, d_max=100)
    assert g.edge_set() == {(0, 0), (1, 1), (2, 2), (0, 1), (1, 0)}
    np.testing.assert_allclose(edge_dict(g)[(0, 1)], D[0, 1] / 100)


def test_exact_threshold_not_connected():
    coords = [(50.0, 8.0), (50.5, 8.7)]
    d = distance_matrix(coords)[0, 1]
    assert build_topology(coords, 1, d_max=d).n_edges == 2
    assert build_topology(coords, 1, d_max=np.nextafter(d, np.inf)).n_edges == 4


def test_config_errors():
    with pytest.raises(GraphConfigError):
        build_topology([(50, 8)], 1, d_max=0)
    with pytest.raises(GraphConfigError):
        build_topology([(50, 8)], 1, d_max=100, eps=0)


def test_brute_force_oracle_random_configs():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        S, N = int(rng.integers(1, 11)), int(rng.integers(1, 12))
        coords = np.column_stack([rng.uniform(49, 52, S), rng.uniform(7, 11, S)])
        d_max = float(rng.uniform(10, 300))
        g = build_graph(dataset_at(coords, n_members=N, n_days=1), 0, d_max=d_max)
        got = edge_dict(g)
        assert len(got) == len(g.src)  # no duplicate edges
        want = brute_force_edges(coords, N, d_max)
        assert got.keys() == want.keys()
        for k, v in want.items():
            assert abs(got[k] - v) < 1e-12


def test_reverse_closure_and_attr_range(rng):
    coords = np.column_stack([rng.uniform(49, 52, 8), rng.uniform(7, 11, 8)])
    topo = build_topology(coords, 3, 120)
    edges = set(zip(topo.src.tolist(), topo.dst.tolist()))
    assert all((b, a) in edges for a, b in edges)
    cross = topo.src // 3 != topo.dst // 3
    assert np.all((topo.edge_attr[cross] > 0) & (topo.edge_attr[cross] <= 1))
    assert np.all(topo.edge_attr[~cross] == 1e-6)


def test_station_reordering_is_isomorphic(rng):
    coords = np.column_stack([rng.uniform(49, 52, 7), rng.uniform(7, 11, 7)])
    N = 2
    perm = rng.permutation(7)
    a = build_topology(coords, N, 150)
    b = build_topology(coords[perm], N, 150)
    # node (s, n) of b is node (perm[s], n) of a
    relabel = lambda v: perm[v // N] * N + v % N  # noqa: E731
    ea = {(s, d): x for s, d, x in zip(a.src.tolist(), a.dst.tolist(), a.edge_attr.tolist())}
    eb = {(relabel(s), relabel(d)): x for s, d, x in zip(b.src.tolist(), b.dst.tolist(), b.edge_attr.tolist())}
    assert ea.keys() == eb.keys()
    assert all(abs(ea[k] - eb[k]) < 1e-12 for k in ea)


def test_dmax_limits(rng):
    coords = np.column_stack([rng.uniform(49, 52, 5), rng.uniform(7, 11, 5)])
    assert build_topology(coords, 2, 1e6).n_edges == (5 * 2) ** 2
    assert build_topology(coords, 2, 1e-9).n_edges == 5 * 2 * 2
    ds = build_topology(coords, 2, 100, self_loops_only=True)
    assert np.array_equal(ds.src, ds.dst) and ds.n_edges == 10


def test_batched_is_block_diagonal():
    topo = build_topology([(50, 8), (50.3, 8.2)], 2, 100)
    src, dst, attr = topo.batched(3)
    assert len(src) == 3 * topo.n_edges
    assert np.array_equal(src[topo.n_edges : 2 * topo.n_edges], topo.src + topo.n_nodes)
    assert np.all(src // topo.n_nodes == dst // topo.n_nodes)


def test_node_features_concatenate_inputs_and_embeddings():
    ds = dataset_at([(50, 8), (50.2, 8.1)], n_members=3)
    norm = Normalizer.fit(ds.node_inputs(), ds.input_names())
    emb = np.arange(8.0).reshape(2, 4)
    g = build_graph(ds, 1, 100, embeddings=emb, normalizer=norm)
    F = len(ds.input_names())
    assert g.x.shape == (6, F + 4)
    np.testing.assert_allclose(g.x[:, :F], norm.apply(ds.node_inputs()[1]).reshape(6, F))
    assert np.array_equal(g.x[4, F:], emb[1])
    assert g.nodes[4] == (1, 1) and g.node_station.tolist() == [0, 0, 0, 1, 1, 1]


def test_topology_cache_returns_same_object():
    st = [Station(id=1, lat=50, lon=8, alt=0, orog=0), Station(id=2, lat=50.1, lon=8, alt=0, orog=0)]
    assert topology_for(st, 3, 100.0) is topology_for(st, 3, 100.0)


def test_edge_list_dump(tmp_path):
    ds = dataset_at([(50, 8), (50.2, 8.1)], n_members=2)
    g = build_graph(ds, 0, 100)
    write_edge_list(g, tmp_path / "edges.csv")
    rows = list(csv.DictReader((tmp_path / "edges.csv").open()))
    assert len(rows) == 16
    assert set(rows[0]) == {"day", "src_s", "src_n", "dst_s", "dst_n", "dist_norm"}
