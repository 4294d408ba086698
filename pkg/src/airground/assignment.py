"""One-to-one matching of orders to vehicles.

Two matchers operate on the feasibility mask: the greedy score sweep that
every dispatch policy uses, and an exact maximum-cardinality matcher that
doubles as the optimal per-step baseline and the correctness oracle for
tests. A depth-first branch-and-bound variant is kept for cross-checking
the exact matcher on small instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .feasibility import FeasibilityMask
from .geo import euclidean_distance
from .world import VehicleKind, WorldState, active_orders, idle_vehicles

#: Sentinel score for masked (infeasible) pairs.
MASKED = -np.inf

#: Hard cap for the exact matcher; beyond this the per-step ILP is not the
#: tool anyway.
EXACT_SIZE_CAP = 50


@dataclass
class ScoreMatrix:
    """Real-valued scores with the same indexing as a FeasibilityMask.

    Masked entries hold -inf; every unmasked entry must be finite.
    """

    order_ids: list[int]
    uav_ids: list[int]
    carrier_ids: list[int]
    values: np.ndarray  # float64, orders x (uavs + carriers)

    @property
    def n_uav(self) -> int:
        return len(self.uav_ids)

    @classmethod
    def masked_like(cls, mask: FeasibilityMask) -> "ScoreMatrix":
        values = np.full(mask.entries.shape, MASKED, dtype=np.float64)
        return cls(
            list(mask.order_ids), list(mask.uav_ids), list(mask.carrier_ids), values
        )


@dataclass
class Assignment:
    """A one-to-one set of (order, vehicle) pairs for one decision epoch."""

    pairs: list[tuple[int, VehicleKind, int]]

    def __len__(self) -> int:
        return len(self.pairs)


def _check_same_indexing(scores: ScoreMatrix, mask: FeasibilityMask) -> None:
    if (
        scores.order_ids != mask.order_ids
        or scores.uav_ids != mask.uav_ids
        or scores.carrier_ids != mask.carrier_ids
    ):
        raise ValueError("score matrix and mask must share indexing")


def greedy_match(scores: ScoreMatrix, mask: FeasibilityMask) -> Assignment:
    """Repeatedly take the best-scoring unused feasible pair.

    Ties break by lower order id, then UAV before carrier, then lower
    vehicle id. The result is a maximal matching under the mask.
    """
    _check_same_indexing(scores, mask)
    rows, cols = np.nonzero(mask.entries)
    if rows.size == 0:
        return Assignment([])
    vals = scores.values[rows, cols]
    if not np.all(np.isfinite(vals)):
        raise ValueError("unmasked score entries must be finite")

    n_uav = mask.n_uav
    kind_rank = (cols >= n_uav).astype(np.int64)  # 0 = uav, 1 = carrier
    oid_arr = np.asarray(mask.order_ids, dtype=np.int64)[rows]
    col_vids = np.asarray(mask.uav_ids + mask.carrier_ids, dtype=np.int64)
    vid_arr = col_vids[cols]
    # lexsort: last key is primary. Highest score first, then the tie-break.
    order = np.lexsort((vid_arr, kind_rank, oid_arr, -vals))

    used_rows: set[int] = set()
    used_cols: set[int] = set()
    pairs: list[tuple[int, VehicleKind, int]] = []
    for idx in order:
        r, c = int(rows[idx]), int(cols[idx])
        if r in used_rows or c in used_cols:
            continue
        used_rows.add(r)
        used_cols.add(c)
        kind, vid = mask.vehicle_of_col(c)
        pairs.append((mask.order_ids[r], kind, vid))
    return Assignment(pairs)


# ----------------------------------------------------------------------
# Exact maximum-cardinality matching
# ----------------------------------------------------------------------


def _kuhn_max_matching(adj: list[list[int]], n_cols: int) -> int:
    """Max-cardinality bipartite matching size via augmenting paths."""
    match_col = [-1] * n_cols

    def try_augment(r: int, seen: list[bool]) -> bool:
        for c in adj[r]:
            if not seen[c]:
                seen[c] = True
                if match_col[c] == -1 or try_augment(match_col[c], seen):
                    match_col[c] = r
                    return True
        return False

    size = 0
    for r in range(len(adj)):
        if adj[r] and try_augment(r, [False] * n_cols):
            size += 1
    return size


def exact_match(mask: FeasibilityMask) -> Assignment:
    """Maximum-cardinality one-to-one assignment under the mask.

    Among all maximum matchings, returns the one with lexicographically
    smallest pair list (orders ascending; for each order the first usable
    column in UAV-then-carrier order), so results are reproducible.
    """
    n_rows, n_cols = mask.entries.shape
    if n_rows > EXACT_SIZE_CAP or n_cols > EXACT_SIZE_CAP:
        raise ValueError(
            f"instance {n_rows}x{n_cols} exceeds exact matcher cap "
            f"{EXACT_SIZE_CAP}x{EXACT_SIZE_CAP}"
        )
    adj = [list(np.nonzero(mask.entries[r])[0]) for r in range(n_rows)]
    target = _kuhn_max_matching(adj, n_cols)

    pairs: list[tuple[int, VehicleKind, int]] = []
    used_cols: set[int] = set()
    fixed = 0
    for r in range(n_rows):
        if fixed == target:
            break
        remaining = [
            [c for c in adj[rr] if c not in used_cols] for rr in range(r + 1, n_rows)
        ]
        for c in adj[r]:
            if c in used_cols:
                continue
            rest = [[cc for cc in row if cc != c] for row in remaining]
            if fixed + 1 + _kuhn_max_matching(rest, n_cols) >= target:
                used_cols.add(c)
                fixed += 1
                kind, vid = mask.vehicle_of_col(c)
                pairs.append((mask.order_ids[r], kind, vid))
                break
    return Assignment(pairs)


def exact_match_bnb(mask: FeasibilityMask, size_cap: int = 12) -> Assignment:
    """Depth-first branch-and-bound over per-order assign-or-skip decisions.

    Slower than exact_match but mirrors the integer-programming view
    directly; kept for cross-checking on small instances.
    """
    n_rows, n_cols = mask.entries.shape
    if n_rows > size_cap or n_cols > size_cap:
        raise ValueError(f"instance {n_rows}x{n_cols} exceeds B&B cap {size_cap}")
    adj = [list(np.nonzero(mask.entries[r])[0]) for r in range(n_rows)]

    best_pairs: list[tuple[int, int]] = []

    def dfs(r: int, used: set[int], current: list[tuple[int, int]]) -> None:
        nonlocal best_pairs
        if len(current) + (n_rows - r) <= len(best_pairs):
            return  # even assigning every remaining order cannot win
        if r == n_rows:
            if len(current) > len(best_pairs):
                best_pairs = list(current)
            return
        for c in adj[r]:
            if c not in used:
                used.add(c)
                current.append((r, c))
                dfs(r + 1, used, current)
                current.pop()
                used.remove(c)
        dfs(r + 1, used, current)  # skip this order

    dfs(0, set(), [])
    pairs = []
    for r, c in best_pairs:
        kind, vid = mask.vehicle_of_col(c)
        pairs.append((mask.order_ids[r], kind, vid))
    return Assignment(pairs)


# ----------------------------------------------------------------------
# Distance-greedy baseline scoring
# ----------------------------------------------------------------------


def greedy_distance_policy(state: WorldState, mask: FeasibilityMask) -> ScoreMatrix:
    """Score feasible pairs by negated total distance (approach + order leg).

    UAVs measure straight lines; carriers measure road distances. Greedy
    matching on these scores picks smallest totals first.
    """
    scores = ScoreMatrix.masked_like(mask)
    actives = {o.id: o for o in active_orders(state)}
    idle_uavs, idle_carriers = idle_vehicles(state)
    n_uav = mask.n_uav
    uav_col = {uid: j for j, uid in enumerate(mask.uav_ids)}
    carrier_col = {cid: n_uav + j for j, cid in enumerate(mask.carrier_ids)}

    for i, oid in enumerate(mask.order_ids):
        order = actives.get(oid)
        if order is None:
            continue
        origin = state.net.point_of(order.origin)
        dest = state.net.point_of(order.destination)
        od_euclid = euclidean_distance(origin, dest)
        for u in idle_uavs:
            j = uav_col[u.id]
            if mask.entries[i, j]:
                scores.values[i, j] = -(
                    euclidean_distance(u.location, origin) + od_euclid
                )
        od_road = None
        for c in idle_carriers:
            j = carrier_col[c.id]
            if mask.entries[i, j]:
                if od_road is None:
                    od_road = state.net.shortest_path_distance(
                        order.origin, order.destination
                    )
                approach = state.net.shortest_path_distance(
                    c.location_node, order.origin
                )
                scores.values[i, j] = -(approach + od_road)
    return scores
