"""Constraint predicates gating which vehicle may serve which order.

Three checks exist: an optimistic straight-line deadline check applied to
every vehicle, an exact road-network deadline check applied to carriers,
and the safe-return energy check applied to UAVs (battery must cover
current position -> pickup -> delivery -> nearest charging station). The
conjunction per pair forms the feasibility mask consumed both by the
matchers and by policy action masking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geo import Point, RoadNetwork, euclidean_distance
from .world import (
    Carrier,
    ChargingStation,
    Order,
    Uav,
    WorldState,
    active_orders,
    idle_vehicles,
)

#: Simulated minutes per timestep. Speeds are km/h, so a vehicle covers
#: speed/60 km per step.
MINUTES_PER_STEP = 1.0


def travel_steps(distance_km: float, speed_kmh: float) -> int:
    """Whole timesteps needed to cover a distance at a constant speed."""
    if speed_kmh <= 0:
        raise ValueError(f"speed must be positive, got {speed_kmh}")
    return math.ceil(distance_km / speed_kmh * 60.0 / MINUTES_PER_STEP)


@dataclass
class EnergyModel:
    """UAV energy accounting: linear in distance flown.

    Attributes:
        eta: kWh consumed per kilometer
        charge_threshold: battery ratio below which a UAV must recharge
        recharge_rate: battery ratio restored per timestep at a station
    """

    eta: float = 0.01
    charge_threshold: float = 0.40
    recharge_rate: float = 1.0 / 30.0

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if not 0 < self.charge_threshold < 1:
            raise ValueError("charge_threshold must lie in (0, 1)")
        if self.recharge_rate <= 0:
            raise ValueError("recharge_rate must be positive")


@dataclass
class FeasibilityMask:
    """Boolean order x vehicle matrix; UAV columns precede carrier columns.

    Rows cover every order in the book and columns every vehicle; inactive
    orders and unavailable vehicles simply carry all-false entries.
    """

    order_ids: list[int]
    uav_ids: list[int]
    carrier_ids: list[int]
    entries: np.ndarray  # bool, shape (len(order_ids), n_uav + n_carrier)

    def __post_init__(self):
        if len(set(self.order_ids)) != len(self.order_ids):
            raise ValueError("duplicate order ids in mask rows")
        if len(set(self.uav_ids)) != len(self.uav_ids) or len(
            set(self.carrier_ids)
        ) != len(self.carrier_ids):
            raise ValueError("duplicate vehicle ids in mask columns")
        expected = (len(self.order_ids), len(self.uav_ids) + len(self.carrier_ids))
        if self.entries.shape != expected:
            raise ValueError(f"mask shape {self.entries.shape} != {expected}")

    @property
    def n_uav(self) -> int:
        return len(self.uav_ids)

    @property
    def n_cols(self) -> int:
        return self.entries.shape[1]

    def vehicle_of_col(self, col: int):
        from .world import VehicleKind

        if col < self.n_uav:
            return VehicleKind.UAV, self.uav_ids[col]
        return VehicleKind.CARRIER, self.carrier_ids[col - self.n_uav]

    def row_of(self, order_id: int) -> int:
        return self.order_ids.index(order_id)


def nearest_station(p: Point, stations: list[ChargingStation]) -> ChargingStation:
    """Station closest to p by straight-line distance; ties to lowest id."""
    if not stations:
        raise ValueError("station list is empty")
    best = None
    best_d = math.inf
    for s in sorted(stations, key=lambda s: s.id):
        d = euclidean_distance(p, s.location)
        if d < best_d:
            best, best_d = s, d
    return best


def ddl_check_euclidean(
    vehicle_loc: Point, order: Order, clock: int, speed: float, net: RoadNetwork
) -> bool:
    """Optimistic straight-line deadline check (both legs)."""
    origin = net.point_of(order.origin)
    dest = net.point_of(order.destination)
    total = euclidean_distance(vehicle_loc, origin) + euclidean_distance(origin, dest)
    return clock + travel_steps(total, speed) <= order.deadline


def ddl_check_road(
    net: RoadNetwork, carrier: Carrier, order: Order, clock: int
) -> bool:
    """Exact road-network deadline check; unreachable legs fail the check."""
    d1 = net.shortest_path_distance(carrier.location_node, order.origin)
    d2 = net.shortest_path_distance(order.origin, order.destination)
    if math.isinf(d1) or math.isinf(d2):
        return False
    return clock + travel_steps(d1 + d2, carrier.speed) <= order.deadline


def energy_safe_return(
    uav: Uav,
    origin: Point,
    dest: Point,
    stations: list[ChargingStation],
    em: EnergyModel,
) -> bool:
    """Battery must cover pickup, delivery, and the hop to the nearest station.

    All three legs use straight-line distances; the station is the one
    nearest to the delivery point.
    """
    if not stations:
        raise ValueError("energy check requires at least one charging station")
    station = nearest_station(dest, stations)
    needed = em.eta * (
        euclidean_distance(uav.location, origin)
        + euclidean_distance(origin, dest)
        + euclidean_distance(dest, station.location)
    )
    return uav.battery * uav.battery_capacity >= needed


def build_mask(state: WorldState, em: EnergyModel) -> FeasibilityMask:
    """Feasibility matrix over the full order book and fleet.

    An entry is true only when the order is active, the vehicle idle, and
    every applicable predicate passes: straight-line deadline plus energy
    safe-return for UAVs; straight-line deadline (a lower bound, so it
    never falsely prunes) plus the exact road deadline for carriers.
    """
    order_ids = [o.id for o in state.orders]
    uav_ids = [u.id for u in state.uavs]
    carrier_ids = [c.id for c in state.carriers]
    entries = np.zeros((len(order_ids), len(uav_ids) + len(carrier_ids)), dtype=bool)

    actives = {o.id: o for o in active_orders(state)}
    idle_uavs, idle_carriers = idle_vehicles(state)
    n_uav = len(uav_ids)
    uav_col = {uid: j for j, uid in enumerate(uav_ids)}
    carrier_col = {cid: n_uav + j for j, cid in enumerate(carrier_ids)}

    for i, oid in enumerate(order_ids):
        order = actives.get(oid)
        if order is None:
            continue
        origin = state.net.point_of(order.origin)
        dest = state.net.point_of(order.destination)
        for u in idle_uavs:
            if ddl_check_euclidean(
                u.location, order, state.clock, u.speed, state.net
            ) and energy_safe_return(u, origin, dest, state.stations, em):
                entries[i, uav_col[u.id]] = True
        for c in idle_carriers:
            loc = state.net.point_of(c.location_node)
            if ddl_check_euclidean(
                loc, order, state.clock, c.speed, state.net
            ) and ddl_check_road(state.net, c, order, state.clock):
                entries[i, carrier_col[c.id]] = True

    return FeasibilityMask(order_ids, uav_ids, carrier_ids, entries)
