"""Shared builders and independent oracles used across the test modules."""

from __future__ import annotations

import numpy as np

from airground.config import (
    FleetSpec,
    GridSpec,
    ModelSpec,
    OrderGenSpec,
    ScenarioConfig,
)
from airground.feasibility import FeasibilityMask
from airground.geo import Point, RoadNetwork
from airground.world import (
    Carrier,
    ChargingStation,
    Order,
    OrderStatus,
    Uav,
    VehicleStatus,
    WorldState,
)


def random_metric_network(rng: np.random.Generator, n_nodes: int, extra_edges: int = 0):
    """Connected random graph whose edge lengths respect the metric.

    Nodes sit at random planar points; a random spanning tree guarantees
    connectivity and extra edges add shortcuts. Every edge length is the
    straight-line distance times a factor >= 1, so road distance can
    never undercut the Euclidean distance.
    """
    pts = [Point(float(x), float(y)) for x, y in rng.uniform(0, 10, size=(n_nodes, 2))]
    nodes = list(enumerate(pts))
    edges = []
    order = rng.permutation(n_nodes)
    for i in range(1, n_nodes):
        a, b = int(order[i]), int(order[int(rng.integers(0, i))])
        d = np.hypot(pts[a].x - pts[b].x, pts[a].y - pts[b].y)
        edges.append((a, b, max(d, 1e-6) * float(rng.uniform(1.0, 1.5)), True))
    for _ in range(extra_edges):
        a, b = rng.integers(0, n_nodes, size=2)
        if a == b:
            continue
        a, b = int(a), int(b)
        d = np.hypot(pts[a].x - pts[b].x, pts[a].y - pts[b].y)
        edges.append((a, b, max(d, 1e-6) * float(rng.uniform(1.0, 1.5)), True))
    return RoadNetwork(nodes, edges)


def floyd_warshall(net: RoadNetwork) -> dict[tuple[int, int], float]:
    """Brute-force all-pairs shortest paths."""
    ids = net.node_ids
    dist = {(a, b): (0.0 if a == b else np.inf) for a in ids for b in ids}
    for src, nbrs in net.adjacency.items():
        for dst, w in nbrs:
            dist[(src, dst)] = min(dist[(src, dst)], w)
    for k in ids:
        for i in ids:
            dik = dist[(i, k)]
            if dik == np.inf:
                continue
            for j in ids:
                alt = dik + dist[(k, j)]
                if alt < dist[(i, j)]:
                    dist[(i, j)] = alt
    return dist


def random_world(
    rng: np.random.Generator,
    n_nodes: int = 12,
    n_orders: int = 8,
    n_uav: int = 3,
    n_carrier: int = 3,
    t_max: int = 50,
    clock: int = 0,
) -> WorldState:
    net = random_metric_network(rng, n_nodes, extra_edges=n_nodes)
    ids = net.node_ids
    orders = []
    for i in range(n_orders):
        origin = int(ids[int(rng.integers(len(ids)))])
        dest = int(ids[int(rng.integers(len(ids)))])
        while dest == origin:
            dest = int(ids[int(rng.integers(len(ids)))])
        rel = int(rng.integers(0, max(t_max - 2, 1)))
        ddl = rel + int(rng.integers(5, 40))
        o = Order(id=i, origin=origin, destination=dest, release_time=rel, deadline=ddl)
        roll = rng.random()
        if roll < 0.15 and ddl <= clock:
            o.status = OrderStatus.EXPIRED
        elif roll < 0.3:
            o.status = OrderStatus.DELIVERED
        orders.append(o)
    uavs = []
    for i in range(n_uav):
        nid = ids[int(rng.integers(len(ids)))]
        status = [VehicleStatus.IDLE, VehicleStatus.SERVING, VehicleStatus.CHARGING][
            int(rng.integers(3))
        ]
        uavs.append(
            Uav(
                id=i,
                location=net.point_of(nid),
                speed=60.0,
                battery=float(rng.uniform(0.05, 1.0)),
                battery_capacity=1.0,
                status=status,
            )
        )
    carriers = []
    for i in range(n_carrier):
        nid = ids[int(rng.integers(len(ids)))]
        status = [VehicleStatus.IDLE, VehicleStatus.SERVING][int(rng.integers(2))]
        carriers.append(Carrier(id=i, location_node=nid, speed=45.0, status=status))
    stations = [
        ChargingStation(j, net.point_of(ids[int(rng.integers(len(ids)))]))
        for j in range(2)
    ]
    return WorldState(
        clock=clock,
        t_max=t_max,
        net=net,
        orders=orders,
        uavs=uavs,
        carriers=carriers,
        stations=stations,
    )


def random_mask(
    rng: np.random.Generator, n_orders: int, n_uav: int, n_carrier: int, density: float = 0.5
) -> FeasibilityMask:
    entries = rng.random((n_orders, n_uav + n_carrier)) < density
    return FeasibilityMask(
        order_ids=list(range(n_orders)),
        uav_ids=list(range(n_uav)),
        carrier_ids=list(range(n_carrier)),
        entries=entries,
    )


def max_matching_by_enumeration(entries: np.ndarray) -> int:
    """Exhaustive maximum matching cardinality (exponential; tiny inputs)."""
    n_rows, n_cols = entries.shape

    def best(r: int, used: frozenset) -> int:
        if r == n_rows:
            return 0
        top = best(r + 1, used)
        for c in range(n_cols):
            if entries[r, c] and c not in used:
                top = max(top, 1 + best(r + 1, used | {c}))
        return top

    return best(0, frozenset())


def random_global_state(rng: np.random.Generator, arch, min_valid_orders: int = 1):
    """Synthetic normalized encoding, independent of any real world."""
    from airground.mdp import GlobalState

    n_valid = int(rng.integers(min_valid_orders, arch.n_max + 1))
    valid = np.zeros(arch.n_max, dtype=bool)
    valid[:n_valid] = True
    return GlobalState(
        order_seg=rng.random((arch.n_max, 6)) * valid[:, None],
        uav_seg=rng.random((arch.n_u, 5)),
        carrier_seg=rng.random((arch.n_c, 4)),
        sys_seg=rng.random(8),
        valid_order_flags=valid,
        slot_order_ids=list(range(n_valid)),
        uav_ids=list(range(arch.n_u)),
        carrier_ids=list(range(arch.n_c)),
    )


def random_transitions(rng: np.random.Generator, arch, count: int):
    from airground.trainer import Transition

    out = []
    for _ in range(count):
        gs = random_global_state(rng, arch)
        gs_next = random_global_state(rng, arch)
        goals = rng.random((arch.n_max, 2))
        goals = goals / goals.sum(axis=1, keepdims=True)
        scores = np.full((arch.n_max, arch.m), -np.inf)
        feas = (rng.random((arch.n_max, arch.m)) < 0.6) & gs.valid_order_flags[:, None]
        scores[feas] = rng.random(int(feas.sum()))
        mask_next = (rng.random((arch.n_max, arch.m)) < 0.6) & gs_next.valid_order_flags[:, None]
        out.append(
            Transition(
                gs=gs,
                goals=goals,
                scores=scores,
                r_ex=float(rng.uniform(0, 10)),
                r_in=float(rng.uniform(-1, 1)),
                gs_next=gs_next,
                mask_next=mask_next,
                done=bool(rng.random() < 0.1),
            )
        )
    return out


def max_grad_rel_error(
    probe,
    groups: dict,
    analytic: dict[str, dict[str, np.ndarray]],
    rng: np.random.Generator,
    entries_per_tensor: int = 3,
    h: float = 1e-6,
    noise_floor: float = 1e-7,
) -> float:
    """Central-difference check of analytic gradients at sampled entries.

    probe() evaluates the scalar objective at the current parameter
    values; groups maps group name -> parameter container; analytic maps
    group name -> {tensor name -> gradient array}.

    Entries where both gradients sit below the finite-difference noise
    floor (the probe is O(1), so fd cannot resolve below ~1e-8) are held
    to absolute agreement instead of the relative criterion; a real bug
    producing a large analytic value against a tiny numeric one still
    lands in the relative branch and fails.
    """
    worst = 0.0
    for gname, group in groups.items():
        for tname, arr in group.tensors():
            g = analytic[gname][tname]
            flat = arr.reshape(-1)
            gflat = g.reshape(-1)
            idx = rng.choice(flat.size, size=min(entries_per_tensor, flat.size), replace=False)
            for i in idx:
                keep = flat[i]
                flat[i] = keep + h
                up = probe()
                flat[i] = keep - h
                down = probe()
                flat[i] = keep
                numeric = (up - down) / (2 * h)
                a = gflat[i]
                scale = max(abs(a), abs(numeric))
                if scale < noise_floor:
                    assert abs(a - numeric) < noise_floor, (
                        f"{gname}.{tname}[{i}]: {a} vs fd {numeric}"
                    )
                    continue
                worst = max(worst, abs(a - numeric) / scale)
    return worst


def tiny_scenario(
    n_uav: int = 3,
    n_carrier: int = 3,
    rate: float = 0.4,
    t_max: int = 50,
    n_max: int = 10,
    hidden: int = 16,
    rows: int = 4,
    cols: int = 5,
    mode: str = "mixed",
) -> ScenarioConfig:
    sc = ScenarioConfig(n_max=n_max, t_max=t_max, mode=mode)
    sc.grid = GridSpec(rows=rows, cols=cols, spacing_km=1.0)
    sc.ordergen = OrderGenSpec(arrival_rate=rate)
    sc.fleet = FleetSpec(n_uav=n_uav, n_carrier=n_carrier)
    sc.n_stations = 2
    sc.model = ModelSpec(hidden=hidden, heads=4)
    return sc
