"""Planar geometry and road-network routing primitives.

Two distance metrics coexist in this system: straight-line kilometers for
airborne vehicles and shortest-path kilometers along the road graph for
ground vehicles. All coordinates are pre-projected planar kilometers, so
distances divide cleanly by km/h speeds; converting raw lat/lon data is the
dataset loader's job, not this module's.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from heapq import heappop, heappush
from pathlib import Path

#: Sentinel returned by shortest_path_distance when no path exists.
UNREACHABLE = math.inf


@dataclass(frozen=True)
class Point:
    """A planar position in kilometers."""

    x: float
    y: float


def euclidean_distance(a: Point, b: Point) -> float:
    """Straight-line distance in kilometers."""
    return math.hypot(a.x - b.x, a.y - b.y)


class RoadNetwork:
    """Immutable road graph with static edge lengths in kilometers.

    Nodes are integer ids with planar positions; edges carry explicit
    lengths (which may exceed the straight-line distance between their
    endpoints). Single-source shortest paths are memoized per source,
    which is safe because the graph never changes after construction.
    """

    def __init__(
        self,
        nodes: list[tuple[int, Point]],
        edges: list[tuple[int, int, float, bool]],
    ):
        if not nodes:
            raise ValueError("road network must have at least one node")
        self.points: dict[int, Point] = {}
        for nid, p in nodes:
            if nid in self.points:
                raise ValueError(f"duplicate node id {nid}")
            if not (math.isfinite(p.x) and math.isfinite(p.y)):
                raise ValueError(f"node {nid} has non-finite coordinates")
            self.points[nid] = p
        self.node_ids: list[int] = sorted(self.points)

        adj: dict[int, list[tuple[int, float]]] = {nid: [] for nid in self.node_ids}
        for src, dst, length, bidirectional in edges:
            if src not in self.points or dst not in self.points:
                raise ValueError(f"edge ({src},{dst}) references undeclared node")
            if length <= 0:
                raise ValueError(f"edge ({src},{dst}) has non-positive length {length}")
            adj[src].append((dst, float(length)))
            if bidirectional:
                adj[dst].append((src, float(length)))
        # Sorted adjacency keeps Dijkstra tie-breaking deterministic.
        self.adjacency: dict[int, list[tuple[int, float]]] = {
            nid: sorted(nbrs) for nid, nbrs in adj.items()
        }
        self.edges = [(s, d, float(l), bool(b)) for s, d, l, b in edges]
        self._sp_cache: dict[int, tuple[dict[int, float], dict[int, int]]] = {}

    # ------------------------------------------------------------------
    def _check_node(self, nid: int) -> None:
        if nid not in self.points:
            raise ValueError(f"unknown node id {nid}")

    def point_of(self, nid: int) -> Point:
        self._check_node(nid)
        return self.points[nid]

    def bounding_box(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) over all node positions."""
        xs = [p.x for p in self.points.values()]
        ys = [p.y for p in self.points.values()]
        return min(xs), min(ys), max(xs), max(ys)

    # ------------------------------------------------------------------
    def _dijkstra(self, src: int) -> tuple[dict[int, float], dict[int, int]]:
        cached = self._sp_cache.get(src)
        if cached is not None:
            return cached
        dist: dict[int, float] = {src: 0.0}
        prev: dict[int, int] = {}
        heap: list[tuple[float, int]] = [(0.0, src)]
        settled: set[int] = set()
        while heap:
            d, u = heappop(heap)
            if u in settled:
                continue
            settled.add(u)
            for v, w in self.adjacency[u]:
                nd = d + w
                if nd < dist.get(v, math.inf):
                    dist[v] = nd
                    prev[v] = u
                    heappush(heap, (nd, v))
        result = (dist, prev)
        self._sp_cache[src] = result
        return result

    def shortest_path_distance(self, src: int, dst: int) -> float:
        """Length of a minimum-total-length path, or UNREACHABLE."""
        self._check_node(src)
        self._check_node(dst)
        dist, _ = self._dijkstra(src)
        return dist.get(dst, UNREACHABLE)

    def shortest_path(self, src: int, dst: int) -> list[int] | None:
        """Node sequence of a shortest path src..dst, or None if unreachable."""
        self._check_node(src)
        self._check_node(dst)
        dist, prev = self._dijkstra(src)
        if dst not in dist:
            return None
        path = [dst]
        while path[-1] != src:
            path.append(prev[path[-1]])
        path.reverse()
        return path

    # ------------------------------------------------------------------
    def nearest_node(self, p: Point) -> int:
        """Node minimizing Euclidean distance to p; ties go to the lowest id."""
        best_id = self.node_ids[0]
        best_d = euclidean_distance(self.points[best_id], p)
        for nid in self.node_ids[1:]:
            d = euclidean_distance(self.points[nid], p)
            if d < best_d:
                best_id, best_d = nid, d
        return best_id

    # ------------------------------------------------------------------
    @classmethod
    def from_csv(cls, nodes_path: str | Path, edges_path: str | Path) -> "RoadNetwork":
        """Load from the nodes.csv / edges.csv pair.

        nodes.csv header: node_id,x_km,y_km
        edges.csv header: src,dst,length_km,bidirectional  (bidirectional in {0,1})
        """
        nodes = []
        with open(nodes_path, newline="") as f:
            for row in csv.DictReader(f):
                nodes.append(
                    (int(row["node_id"]), Point(float(row["x_km"]), float(row["y_km"])))
                )
        edges = []
        with open(edges_path, newline="") as f:
            for row in csv.DictReader(f):
                edges.append(
                    (
                        int(row["src"]),
                        int(row["dst"]),
                        float(row["length_km"]),
                        bool(int(row["bidirectional"])),
                    )
                )
        return cls(nodes, edges)

    def to_csv(self, nodes_path: str | Path, edges_path: str | Path) -> None:
        with open(nodes_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["node_id", "x_km", "y_km"])
            for nid in self.node_ids:
                p = self.points[nid]
                w.writerow([nid, repr(p.x), repr(p.y)])
        with open(edges_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["src", "dst", "length_km", "bidirectional"])
            for s, d, l, b in self.edges:
                w.writerow([s, d, repr(l), int(b)])
