"""Domain model: orders, the heterogeneous fleet, and global simulation state.

Orders move forward through a fixed lifecycle; UAVs fly free points and carry
a battery, carriers sit on road nodes and do not. WorldState bundles the road
network, fleets, order book, clock and running statistics, and is mutated
single-threaded by the engine within one episode.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geo import Point, RoadNetwork


class OrderStatus(Enum):
    PENDING = "pending"
    MATCHED = "matched"
    PICKED_UP = "picked_up"
    DELIVERED = "delivered"
    EXPIRED = "expired"


#: Forward-only transition order; EXPIRED is a terminal branch off PENDING.
_STATUS_RANK = {
    OrderStatus.PENDING: 0,
    OrderStatus.MATCHED: 1,
    OrderStatus.PICKED_UP: 2,
    OrderStatus.DELIVERED: 3,
    OrderStatus.EXPIRED: 1,
}


class VehicleStatus(Enum):
    IDLE = "idle"
    SERVING = "serving"
    CHARGING = "charging"


class VehicleKind(Enum):
    UAV = "uav"
    CARRIER = "carrier"


@dataclass
class Order:
    """A delivery request between two road nodes with a time window.

    Attributes:
        id: unique integer id
        origin: pickup road node
        destination: delivery road node
        release_time: step at which the order becomes dispatchable
        deadline: step by which delivery must complete (strictly > release_time)
        status: current lifecycle state
        pickup_step / delivery_step: set by the engine when the events occur
    """

    id: int
    origin: int
    destination: int
    release_time: int
    deadline: int
    status: OrderStatus = OrderStatus.PENDING
    pickup_step: int | None = None
    delivery_step: int | None = None

    def __post_init__(self):
        if self.deadline <= self.release_time:
            raise ValueError(
                f"order {self.id}: deadline {self.deadline} must exceed "
                f"release {self.release_time}"
            )

    def advance_status(self, new: OrderStatus) -> None:
        """Move to `new`, enforcing the forward-only lifecycle."""
        if new == OrderStatus.EXPIRED and self.status != OrderStatus.PENDING:
            raise ValueError(f"order {self.id}: only pending orders expire")
        if _STATUS_RANK[new] <= _STATUS_RANK[self.status]:
            raise ValueError(
                f"order {self.id}: illegal transition {self.status} -> {new}"
            )
        self.status = new


@dataclass
class Uav:
    """Airborne vehicle: free planar position, battery-limited."""

    id: int
    location: Point
    speed: float  # km/h
    battery: float  # ratio in [0, 1]
    battery_capacity: float  # kWh
    status: VehicleStatus = VehicleStatus.IDLE

    @property
    def available(self) -> bool:
        return self.status == VehicleStatus.IDLE


@dataclass
class Carrier:
    """Ground vehicle: constrained to road nodes, no energy budget."""

    id: int
    location_node: int
    speed: float  # km/h
    status: VehicleStatus = VehicleStatus.IDLE

    @property
    def available(self) -> bool:
        return self.status == VehicleStatus.IDLE


@dataclass
class ChargingStation:
    id: int
    location: Point


class MissionPhase(Enum):
    TO_PICKUP = "to_pickup"
    TO_DELIVERY = "to_delivery"
    TO_CHARGE = "to_charge"


@dataclass
class Mission:
    """An in-flight task binding one vehicle to one order (or a charge trip).

    `legs` is schedule metadata: semantic waypoints with their planned
    arrival steps, strictly increasing. Motion itself is tracked
    continuously via `traveled` against the cumulative waypoint distances,
    so event steps match the planned schedule exactly.
    """

    kind: VehicleKind
    vehicle_id: int
    order_id: int | None
    legs: list[tuple[Point, int]]
    phase: MissionPhase
    # motion bookkeeping
    path: list[Point] = field(default_factory=list)  # polyline waypoints
    path_nodes: list[int | None] = field(default_factory=list)  # node id per waypoint
    cum_dist: list[float] = field(default_factory=list)  # cumulative km at waypoints
    pickup_dist: float = 0.0  # km along path where pickup occurs
    traveled: float = 0.0
    picked: bool = False

    def __post_init__(self):
        arrivals = [step for _, step in self.legs]
        if any(b <= a for a, b in zip(arrivals, arrivals[1:])):
            raise ValueError("mission leg arrival steps must be strictly increasing")

    @property
    def total_dist(self) -> float:
        return self.cum_dist[-1] if self.cum_dist else 0.0


@dataclass
class SystemStats:
    """Macroscopic 8-vector; every entry normalized to [0, 1].

    The eighth slot is fixed at zero (see reserved_zero).
    """

    timestep_ratio: float = 0.0
    order_ratio: float = 0.0
    matching_rate: float = 0.0
    fleet_utilization: float = 0.0
    uav_failure_rate: float = 0.0
    charging_frequency: float = 0.0
    uav_proportion: float = 0.0
    reserved_zero: float = 0.0

    def as_vector(self) -> np.ndarray:
        return np.array(
            [
                self.timestep_ratio,
                self.order_ratio,
                self.matching_rate,
                self.fleet_utilization,
                self.uav_failure_rate,
                self.charging_frequency,
                self.uav_proportion,
                self.reserved_zero,
            ],
            dtype=np.float64,
        )


@dataclass
class StatsCounters:
    """Raw event counters behind SystemStats."""

    cum_matched: int = 0
    cum_picked: int = 0
    cum_delivered: int = 0
    uav_missions_started: int = 0
    uav_late_deliveries: int = 0
    charge_events: int = 0


@dataclass
class WorldState:
    """Ground truth the dispatcher observes and the engine mutates."""

    clock: int
    t_max: int
    net: RoadNetwork
    orders: list[Order]
    uavs: list[Uav]
    carriers: list[Carrier]
    stations: list[ChargingStation]
    stats: SystemStats = field(default_factory=SystemStats)
    counters: StatsCounters = field(default_factory=StatsCounters)
    active_missions: list[Mission] = field(default_factory=list)


def active_orders(state: WorldState) -> list[Order]:
    """Pending orders inside their time window: released and not yet due."""
    return [
        o
        for o in state.orders
        if o.status == OrderStatus.PENDING
        and o.release_time <= state.clock
        and o.deadline > state.clock
    ]


def idle_vehicles(state: WorldState) -> tuple[list[Uav], list[Carrier]]:
    """Vehicles with status IDLE; charging UAVs are not dispatchable."""
    return (
        [u for u in state.uavs if u.status == VehicleStatus.IDLE],
        [c for c in state.carriers if c.status == VehicleStatus.IDLE],
    )


def expire_orders(state: WorldState) -> int:
    """Expire pending orders whose deadline has arrived; returns the count.

    Orders already matched or picked up are never expired mid-mission; a
    late delivery is counted as a failed delivery instead.
    """
    n = 0
    for o in state.orders:
        if o.status == OrderStatus.PENDING and o.deadline <= state.clock:
            o.advance_status(OrderStatus.EXPIRED)
            n += 1
    return n
