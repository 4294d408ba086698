"""Discrete-event simulation loop: one decision epoch per timestep.

Each epoch runs three phases: collect active orders and idle vehicles,
dispatch (feasibility mask, policy scoring, matching — the timed part),
then execution: vehicles advance one step's worth of distance, pickups
and deliveries fire as their cumulative distances are crossed, UAV
batteries drain with distance flown, and UAVs ending a delivery below
the charge threshold fly to the nearest station and recharge to full.

Trace output is line-delimited JSON with a fixed field order so equal
seeds reproduce byte-identical files; wall-clock dispatch timings are
therefore reported separately, never embedded in the trace.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .assignment import Assignment
from .feasibility import EnergyModel, build_mask, nearest_station, travel_steps
from .geo import Point, euclidean_distance
from .world import (
    Mission,
    MissionPhase,
    Order,
    OrderStatus,
    VehicleKind,
    VehicleStatus,
    WorldState,
    expire_orders,
)

if TYPE_CHECKING:
    from .config import ScenarioConfig
    from .policies import DispatchPolicy

_EPS = 1e-9


class ContractViolation(Exception):
    """An assignment referenced a busy vehicle or a non-dispatchable order."""


@dataclass
class StepReport:
    """Per-epoch event counts plus the dispatch wall time."""

    n_matched: int = 0
    n_picked: int = 0
    n_delivered: int = 0
    n_expired: int = 0
    n_failed_deliveries: int = 0
    dispatch_wall_time: float = 0.0


@dataclass
class EpisodeMetrics:
    """Aggregates over one episode: pickups, deliveries, timing."""

    pn: int = 0
    dn: int = 0
    mean_et: float = 0.0
    per_mode_dn: tuple[int, int] = (0, 0)  # (uav, carrier)
    step_reports: list[StepReport] = field(default_factory=list)


class TraceWriter:
    """JSONL sink with compact separators and insertion-ordered keys."""

    def __init__(self, path: str | Path):
        self._f = open(path, "w", newline="\n")

    def write(self, record: dict) -> None:
        self._f.write(json.dumps(record, separators=(",", ":")) + "\n")

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ----------------------------------------------------------------------
# Mission construction
# ----------------------------------------------------------------------


def _service_legs(clock: int, d1: float, total: float, speed: float,
                  origin_pt: Point, dest_pt: Point) -> list[tuple[Point, int]]:
    arr_pick = clock + travel_steps(d1, speed)
    arr_del = clock + travel_steps(total, speed)
    legs = []
    if clock < arr_pick < arr_del:
        legs.append((origin_pt, arr_pick))
    if arr_del > clock:
        legs.append((dest_pt, arr_del))
    return legs


def _make_uav_mission(state: WorldState, uav, order: Order) -> Mission:
    origin_pt = state.net.point_of(order.origin)
    dest_pt = state.net.point_of(order.destination)
    d1 = euclidean_distance(uav.location, origin_pt)
    d2 = euclidean_distance(origin_pt, dest_pt)
    return Mission(
        kind=VehicleKind.UAV,
        vehicle_id=uav.id,
        order_id=order.id,
        legs=_service_legs(state.clock, d1, d1 + d2, uav.speed, origin_pt, dest_pt),
        phase=MissionPhase.TO_PICKUP,
        path=[uav.location, origin_pt, dest_pt],
        path_nodes=[None, order.origin, order.destination],
        cum_dist=[0.0, d1, d1 + d2],
        pickup_dist=d1,
    )


def _make_carrier_mission(state: WorldState, carrier, order: Order) -> Mission:
    net = state.net
    leg1 = net.shortest_path(carrier.location_node, order.origin)
    leg2 = net.shortest_path(order.origin, order.destination)
    if leg1 is None or leg2 is None:
        raise ContractViolation(
            f"carrier {carrier.id} cannot reach order {order.id} by road"
        )
    nodes = leg1 + leg2[1:]
    d1 = net.shortest_path_distance(carrier.location_node, order.origin)
    cum = [net.shortest_path_distance(carrier.location_node, n) for n in leg1]
    cum += [d1 + net.shortest_path_distance(order.origin, n) for n in leg2[1:]]
    origin_pt = net.point_of(order.origin)
    dest_pt = net.point_of(order.destination)
    return Mission(
        kind=VehicleKind.CARRIER,
        vehicle_id=carrier.id,
        order_id=order.id,
        legs=_service_legs(state.clock, d1, cum[-1], carrier.speed, origin_pt, dest_pt),
        phase=MissionPhase.TO_PICKUP,
        path=[net.point_of(n) for n in nodes],
        path_nodes=list(nodes),
        cum_dist=cum,
        pickup_dist=d1,
    )


def _make_charge_mission(state: WorldState, uav) -> Mission | None:
    station = nearest_station(uav.location, state.stations)
    d = euclidean_distance(uav.location, station.location)
    if d <= _EPS:
        return None  # already at the station; recharge in place
    arr = state.clock + travel_steps(d, uav.speed)
    return Mission(
        kind=VehicleKind.UAV,
        vehicle_id=uav.id,
        order_id=None,
        legs=[(station.location, max(arr, state.clock + 1))],
        phase=MissionPhase.TO_CHARGE,
        path=[uav.location, station.location],
        path_nodes=[None, None],
        cum_dist=[0.0, d],
        pickup_dist=0.0,
    )


def _interpolate(path: list[Point], cum: list[float], traveled: float) -> Point:
    if traveled >= cum[-1] - _EPS:
        return path[-1]
    for i in range(1, len(path)):
        if traveled <= cum[i] + _EPS:
            seg = cum[i] - cum[i - 1]
            if seg <= _EPS:
                continue
            frac = (traveled - cum[i - 1]) / seg
            a, b = path[i - 1], path[i]
            return Point(a.x + frac * (b.x - a.x), a.y + frac * (b.y - a.y))
    return path[-1]


def _last_node_passed(mission: Mission, traveled: float) -> int:
    node = None
    for i, c in enumerate(mission.cum_dist):
        if c <= traveled + _EPS and mission.path_nodes[i] is not None:
            node = mission.path_nodes[i]
    if node is None:
        raise RuntimeError("carrier mission has no node waypoints")
    return node


# ----------------------------------------------------------------------
# Phase 3: execution and state transition
# ----------------------------------------------------------------------


def advance_world(
    state: WorldState,
    new_assignments: Assignment,
    em: EnergyModel,
    events: list | None = None,
) -> StepReport:
    """Create missions for the new pairs, then advance one timestep.

    Raises ContractViolation when an assignment names a busy vehicle or a
    non-pending order. Returns the step's event counts (n_expired is
    filled by the caller, which owns the expiry phase).
    """
    report = StepReport()
    uavs = {u.id: u for u in state.uavs}
    carriers = {c.id: c for c in state.carriers}
    orders = {o.id: o for o in state.orders}

    def emit(kind: str, order_id: int) -> None:
        if events is not None:
            events.append((kind, order_id))

    # --- recharge ticks (UAVs parked at a station since a prior step) ----
    busy_uav_ids = {
        m.vehicle_id for m in state.active_missions if m.kind == VehicleKind.UAV
    }
    for u in state.uavs:
        if u.status == VehicleStatus.CHARGING and u.id not in busy_uav_ids:
            u.battery = min(1.0, u.battery + em.recharge_rate)
            if u.battery >= 1.0 - _EPS:
                u.battery = 1.0
                u.status = VehicleStatus.IDLE

    # --- create missions ------------------------------------------------
    for oid, kind, vid in sorted(
        new_assignments.pairs, key=lambda p: (p[0], p[1].value, p[2])
    ):
        order = orders.get(oid)
        if order is None or order.status != OrderStatus.PENDING:
            raise ContractViolation(f"order {oid} is not dispatchable")
        if order.release_time > state.clock or order.deadline <= state.clock:
            raise ContractViolation(f"order {oid} is outside its time window")
        vehicle = uavs.get(vid) if kind == VehicleKind.UAV else carriers.get(vid)
        if vehicle is None:
            raise ContractViolation(f"unknown vehicle {kind.value} {vid}")
        if vehicle.status != VehicleStatus.IDLE:
            raise ContractViolation(f"vehicle {kind.value} {vid} is busy")

        order.advance_status(OrderStatus.MATCHED)
        report.n_matched += 1
        state.counters.cum_matched += 1
        emit("matched", oid)

        if kind == VehicleKind.UAV:
            mission = _make_uav_mission(state, vehicle, order)
            state.counters.uav_missions_started += 1
        else:
            mission = _make_carrier_mission(state, vehicle, order)
        vehicle.status = VehicleStatus.SERVING

        # zero-length legs complete at the dispatch step itself
        if mission.pickup_dist <= _EPS:
            mission.picked = True
            mission.phase = MissionPhase.TO_DELIVERY
            order.advance_status(OrderStatus.PICKED_UP)
            order.pickup_step = state.clock
            report.n_picked += 1
            state.counters.cum_picked += 1
            emit("picked_up", oid)
        if mission.total_dist <= _EPS:
            _complete_delivery(state, mission, vehicle, order, state.clock, report, em, events)
        else:
            state.active_missions.append(mission)

    # --- move active missions -------------------------------------------
    arrival_step = state.clock + 1
    for mission in list(state.active_missions):
        if mission.kind == VehicleKind.UAV:
            vehicle = uavs[mission.vehicle_id]
        else:
            vehicle = carriers[mission.vehicle_id]
        step_reach = vehicle.speed / 60.0
        remaining = mission.total_dist - mission.traveled
        flown = min(step_reach, max(remaining, 0.0))
        mission.traveled = min(mission.traveled + step_reach, mission.total_dist)

        if mission.kind == VehicleKind.UAV:
            vehicle.battery -= em.eta * flown / vehicle.battery_capacity
            vehicle.location = _interpolate(mission.path, mission.cum_dist, mission.traveled)
        else:
            vehicle.location_node = _last_node_passed(mission, mission.traveled)

        if (
            not mission.picked
            and mission.phase == MissionPhase.TO_PICKUP
            and mission.traveled >= mission.pickup_dist - _EPS
        ):
            order = orders[mission.order_id]
            mission.picked = True
            mission.phase = MissionPhase.TO_DELIVERY
            order.advance_status(OrderStatus.PICKED_UP)
            order.pickup_step = arrival_step
            report.n_picked += 1
            state.counters.cum_picked += 1
            emit("picked_up", order.id)

        if mission.traveled >= mission.total_dist - _EPS:
            state.active_missions.remove(mission)
            if mission.phase == MissionPhase.TO_CHARGE:
                pass  # stays CHARGING; recharge ticks start next step
            else:
                order = orders[mission.order_id]
                _complete_delivery(
                    state, mission, vehicle, order, arrival_step, report, em, events
                )

    state.clock += 1
    _refresh_stats(state)
    return report


def _complete_delivery(state, mission, vehicle, order, step, report, em, events):
    order.advance_status(OrderStatus.DELIVERED)
    order.delivery_step = step
    on_time = step <= order.deadline
    if on_time:
        report.n_delivered += 1
        state.counters.cum_delivered += 1
    else:
        report.n_failed_deliveries += 1
        if mission.kind == VehicleKind.UAV:
            state.counters.uav_late_deliveries += 1
    if events is not None:
        events.append(("delivered", order.id, mission.kind.value, on_time))

    if mission.kind == VehicleKind.CARRIER:
        vehicle.location_node = order.destination
        vehicle.status = VehicleStatus.IDLE
    else:
        vehicle.location = state.net.point_of(order.destination)
        if vehicle.battery < em.charge_threshold:
            vehicle.status = VehicleStatus.CHARGING
            state.counters.charge_events += 1
            charge = _make_charge_mission(state, vehicle)
            if charge is not None:
                state.active_missions.append(charge)
        else:
            vehicle.status = VehicleStatus.IDLE


def _refresh_stats(state: WorldState) -> None:
    total_orders = len(state.orders)
    n_active = sum(
        1
        for o in state.orders
        if o.status == OrderStatus.PENDING
        and o.release_time <= state.clock
        and o.deadline > state.clock
    )
    released = sum(1 for o in state.orders if o.release_time <= state.clock)
    n_vehicles = len(state.uavs) + len(state.carriers)
    busy = sum(1 for u in state.uavs if u.status != VehicleStatus.IDLE) + sum(
        1 for c in state.carriers if c.status != VehicleStatus.IDLE
    )
    c = state.counters
    s = state.stats
    s.timestep_ratio = min(state.clock, state.t_max) / state.t_max
    s.order_ratio = n_active / max(total_orders, 1)
    s.matching_rate = c.cum_matched / max(released, 1)
    s.fleet_utilization = busy / max(n_vehicles, 1)
    s.uav_failure_rate = c.uav_late_deliveries / max(c.uav_missions_started, 1)
    s.charging_frequency = c.charge_events / max(c.uav_missions_started, 1)
    s.uav_proportion = len(state.uavs) / max(n_vehicles, 1)
    s.reserved_zero = 0.0


# ----------------------------------------------------------------------
# Episode driver
# ----------------------------------------------------------------------


class EpisodeRunner:
    """Steps one episode; exposes per-step results for training loops."""

    def __init__(
        self,
        state: WorldState,
        em: EnergyModel,
        policy: "DispatchPolicy",
        trace: TraceWriter | None = None,
    ):
        self.state = state
        self.em = em
        self.policy = policy
        self.trace = trace
        self.metrics = EpisodeMetrics()
        self._dn_uav = 0
        self._dn_carrier = 0

    @property
    def done(self) -> bool:
        return self.state.clock >= self.state.t_max

    def step(self):
        """One full decision epoch; returns (report, decision, mask)."""
        state = self.state
        t = state.clock
        n_expired = expire_orders(state)
        if self.trace and n_expired:
            # an order expires exactly when the clock reaches its deadline
            for o in sorted(state.orders, key=lambda o: o.id):
                if o.status == OrderStatus.EXPIRED and o.deadline == t:
                    self.trace.write(
                        {"kind": "order_event", "clock": t, "id": o.id, "transition": "expired"}
                    )

        t0 = time.perf_counter()
        mask = build_mask(state, self.em)
        decision = self.policy.propose(state, mask)
        et = time.perf_counter() - t0

        if self.trace:
            pairs = []
            for oid, kind, vid in decision.assignment.pairs:
                score = None
                if decision.scores is not None:
                    r = decision.scores.order_ids.index(oid)
                    col = (
                        decision.scores.uav_ids.index(vid)
                        if kind == VehicleKind.UAV
                        else decision.scores.n_uav + decision.scores.carrier_ids.index(vid)
                    )
                    score = float(decision.scores.values[r, col])
                goal = None
                if decision.goals is not None and oid in decision.goals:
                    goal = float(decision.goals[oid][0])
                pairs.append(
                    {"order": oid, "vehicle": vid, "vkind": kind.value, "score": score, "goal_uav": goal}
                )
            self.trace.write({"kind": "dispatch", "clock": t, "pairs": pairs})

        events: list = []
        report = advance_world(state, decision.assignment, self.em, events)
        report.n_expired = n_expired
        report.dispatch_wall_time = et

        for ev in events:
            if ev[0] == "delivered" and ev[3]:
                if ev[2] == VehicleKind.UAV.value:
                    self._dn_uav += 1
                else:
                    self._dn_carrier += 1
            if self.trace:
                self.trace.write(
                    {"kind": "order_event", "clock": t, "id": ev[1], "transition": ev[0]}
                )

        if self.trace:
            for u in state.uavs:
                self.trace.write(
                    {
                        "kind": "vehicle",
                        "clock": t,
                        "id": u.id,
                        "vkind": "uav",
                        "x": u.location.x,
                        "y": u.location.y,
                        "battery": u.battery,
                        "status": u.status.value,
                    }
                )
            for c in state.carriers:
                p = state.net.point_of(c.location_node)
                self.trace.write(
                    {
                        "kind": "vehicle",
                        "clock": t,
                        "id": c.id,
                        "vkind": "carrier",
                        "x": p.x,
                        "y": p.y,
                        "battery": None,
                        "status": c.status.value,
                    }
                )
            self.trace.write(
                {
                    "kind": "step",
                    "clock": t,
                    "n_matched": report.n_matched,
                    "n_picked": report.n_picked,
                    "n_delivered": report.n_delivered,
                    "n_expired": report.n_expired,
                    "n_failed": report.n_failed_deliveries,
                }
            )

        self.metrics.step_reports.append(report)
        self.metrics.pn += report.n_picked
        self.metrics.dn += report.n_delivered
        return report, decision, mask

    def finish(self) -> EpisodeMetrics:
        reports = self.metrics.step_reports
        if reports:
            self.metrics.mean_et = float(
                np.mean([r.dispatch_wall_time for r in reports])
            )
        self.metrics.per_mode_dn = (self._dn_uav, self._dn_carrier)
        return self.metrics


def run_episode(
    config: "ScenarioConfig",
    policy: "DispatchPolicy",
    seed: int,
    trace_path: str | Path | None = None,
) -> EpisodeMetrics:
    """Run one seeded episode to the horizon and return its metrics.

    Identical (config, policy parameters, seed) triples produce identical
    metrics and byte-identical traces.
    """
    state = config.build_world(seed)
    policy.reset(np.random.default_rng(np.random.SeedSequence([seed, 7])))
    trace = TraceWriter(trace_path) if trace_path else None
    try:
        runner = EpisodeRunner(state, config.energy_model(), policy, trace)
        while not runner.done:
            runner.step()
        return runner.finish()
    finally:
        if trace:
            trace.close()
