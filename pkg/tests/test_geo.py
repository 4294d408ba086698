import math
import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from airground.geo import UNREACHABLE, Point, RoadNetwork, euclidean_distance

from util import floyd_warshall, random_metric_network

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


def test_euclidean_trivial_cases():
    assert euclidean_distance(Point(0, 0), Point(0, 0)) == 0.0
    assert euclidean_distance(Point(0, 0), Point(3, 4)) == 5.0


def test_euclidean_matches_coordinate_arithmetic():
    rng = np.random.default_rng(0)
    for _ in range(200):
        ax, ay, bx, by = rng.uniform(-100, 100, size=4)
        got = euclidean_distance(Point(ax, ay), Point(bx, by))
        expected = math.sqrt((ax - bx) ** 2 + (ay - by) ** 2)
        assert got == pytest.approx(expected, abs=1e-12)


@given(finite, finite, finite, finite)
def test_euclidean_symmetric_nonnegative(ax, ay, bx, by):
    a, b = Point(ax, ay), Point(bx, by)
    assert euclidean_distance(a, b) >= 0
    assert euclidean_distance(a, b) == euclidean_distance(b, a)


@given(*(finite for _ in range(6)))
def test_triangle_inequality(ax, ay, bx, by, cx, cy):
    a, b, c = Point(ax, ay), Point(bx, by), Point(cx, cy)
    assert euclidean_distance(a, c) <= (
        euclidean_distance(a, b) + euclidean_distance(b, c) + 1e-7
    )


def _path_graph():
    nodes = [(0, Point(0, 0)), (1, Point(1, 0)), (2, Point(3, 0))]
    edges = [(0, 1, 1.0, True), (1, 2, 2.0, True)]
    return RoadNetwork(nodes, edges)


def test_shortest_path_trivial_cases():
    net = _path_graph()
    assert net.shortest_path_distance(0, 0) == 0.0
    assert net.shortest_path_distance(0, 2) == 3.0
    assert net.shortest_path(0, 2) == [0, 1, 2]


def test_shortest_path_unreachable():
    net = RoadNetwork([(0, Point(0, 0)), (1, Point(1, 0))], [])
    assert net.shortest_path_distance(0, 1) == UNREACHABLE
    assert net.shortest_path(0, 1) is None


def test_shortest_path_unknown_node():
    net = _path_graph()
    with pytest.raises(ValueError):
        net.shortest_path_distance(0, 99)


def test_shortest_path_matches_floyd_warshall():
    for seed in range(8):
        rng = np.random.default_rng(seed)
        net = random_metric_network(rng, n_nodes=20, extra_edges=15)
        dist = floyd_warshall(net)
        for a in net.node_ids:
            for b in net.node_ids:
                assert net.shortest_path_distance(a, b) == pytest.approx(
                    dist[(a, b)], rel=1e-9
                )


def test_shortest_path_symmetric_on_bidirectional():
    rng = np.random.default_rng(3)
    net = random_metric_network(rng, n_nodes=15, extra_edges=10)
    for a in net.node_ids:
        for b in net.node_ids:
            assert net.shortest_path_distance(a, b) == pytest.approx(
                net.shortest_path_distance(b, a), rel=1e-9
            )


def test_shortest_path_at_least_euclidean_on_metric_graphs():
    rng = np.random.default_rng(4)
    net = random_metric_network(rng, n_nodes=18, extra_edges=12)
    for a in net.node_ids:
        for b in net.node_ids:
            d = net.shortest_path_distance(a, b)
            if math.isfinite(d):
                assert d >= euclidean_distance(net.point_of(a), net.point_of(b)) - 1e-9


def test_nearest_node_trivials():
    net = _path_graph()
    assert net.nearest_node(Point(3, 0)) == 2
    # two equidistant nodes: lowest id wins
    nodes = [(3, Point(0, 0)), (7, Point(2, 0))]
    net2 = RoadNetwork(nodes, [(3, 7, 2.0, True)])
    assert net2.nearest_node(Point(1, 0)) == 3


def test_nearest_node_matches_linear_scan():
    rng = np.random.default_rng(5)
    pts = rng.uniform(-5, 5, size=(50, 2))
    nodes = [(i, Point(float(x), float(y))) for i, (x, y) in enumerate(pts)]
    net = RoadNetwork(nodes, [(0, 1, 1.0, True)])
    for _ in range(100):
        p = Point(*map(float, rng.uniform(-5, 5, size=2)))
        best = min(
            ((euclidean_distance(net.point_of(i), p), i) for i, _ in nodes)
        )[1]
        assert net.nearest_node(p) == best


def test_network_validation():
    with pytest.raises(ValueError):
        RoadNetwork([], [])
    with pytest.raises(ValueError):
        RoadNetwork([(0, Point(0, 0))], [(0, 1, 1.0, True)])
    with pytest.raises(ValueError):
        RoadNetwork([(0, Point(0, 0)), (1, Point(1, 0))], [(0, 1, 0.0, True)])
    with pytest.raises(ValueError):
        RoadNetwork([(0, Point(0, 0)), (0, Point(1, 0))], [])


def test_directed_edges_respected():
    nodes = [(0, Point(0, 0)), (1, Point(1, 0))]
    net = RoadNetwork(nodes, [(0, 1, 1.0, False)])
    assert net.shortest_path_distance(0, 1) == 1.0
    assert net.shortest_path_distance(1, 0) == UNREACHABLE


def test_concurrent_readers_consistent():
    rng = np.random.default_rng(6)
    net = random_metric_network(rng, n_nodes=25, extra_edges=20)
    expected = {
        (a, b): net.shortest_path_distance(a, b)
        for a in net.node_ids[:5]
        for b in net.node_ids
    }
    fresh = random_metric_network(np.random.default_rng(6), n_nodes=25, extra_edges=20)
    errors = []

    def worker(src):
        for b in fresh.node_ids:
            if fresh.shortest_path_distance(src, b) != expected[(src, b)]:
                errors.append((src, b))

    threads = [threading.Thread(target=worker, args=(s,)) for s in fresh.node_ids[:5]]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    net = random_metric_network(rng, n_nodes=10, extra_edges=5)
    net.to_csv(tmp_path / "nodes.csv", tmp_path / "edges.csv")
    loaded = RoadNetwork.from_csv(tmp_path / "nodes.csv", tmp_path / "edges.csv")
    assert loaded.node_ids == net.node_ids
    for a in net.node_ids:
        for b in net.node_ids:
            assert loaded.shortest_path_distance(a, b) == net.shortest_path_distance(a, b)
