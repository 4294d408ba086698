"""Fixed-length state encoding and the shaped reward family.

The global state concatenates four segments (orders, UAVs, carriers,
system statistics), every feature normalized into [0, 1]. Rewards come in
three flavors: the dense extrinsic signal built from per-step milestone
counts, the intrinsic goal-consistency signal, and their hybrid blend.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .assignment import Assignment
from .world import VehicleKind, WorldState, active_orders

if TYPE_CHECKING:  # avoid a runtime cycle with the engine module
    from .engine import StepReport

ORDER_FEATS = 6  # origin x, y; dest x, y; release; deadline
UAV_FEATS = 5  # x, y, speed, availability, battery
CARRIER_FEATS = 4  # x, y, speed, availability
SYS_FEATS = 8


@dataclass
class RewardWeights:
    """Weights of the shaped reward plus the RL discount settings."""

    lambda_m: float = 1.5
    lambda_p: float = 3.0
    lambda_d: float = 10.0
    lambda_t: float = 0.2
    lambda_r: float = 1.0
    alpha: float = 0.1
    gamma: float = 0.99

    def __post_init__(self):
        for name in ("lambda_m", "lambda_p", "lambda_d", "lambda_t", "lambda_r", "alpha"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")


@dataclass
class Normalizer:
    """Affine maps taking world quantities into [0, 1] and back."""

    x_min: float
    y_min: float
    x_span: float  # >= tiny epsilon
    y_span: float
    t_max: int
    speed_max: float

    def norm_x(self, x: float) -> float:
        return (x - self.x_min) / self.x_span

    def norm_y(self, y: float) -> float:
        return (y - self.y_min) / self.y_span

    def norm_time(self, t: float) -> float:
        return min(t, self.t_max) / self.t_max

    def norm_speed(self, v: float) -> float:
        return v / self.speed_max


def normalizer_for(state: WorldState) -> Normalizer:
    x_min, y_min, x_max, y_max = state.net.bounding_box()
    speeds = [u.speed for u in state.uavs] + [c.speed for c in state.carriers]
    return Normalizer(
        x_min=x_min,
        y_min=y_min,
        x_span=max(x_max - x_min, 1e-12),
        y_span=max(y_max - y_min, 1e-12),
        t_max=state.t_max,
        speed_max=max(speeds) if speeds else 1.0,
    )


@dataclass
class GlobalState:
    """Zero-padded fixed-shape encoding of one WorldState snapshot.

    slot_order_ids maps occupied order slots back to order ids so scores
    can be scattered into the full matrices; it is bookkeeping, not a
    feature.
    """

    order_seg: np.ndarray  # (n_max, 6)
    uav_seg: np.ndarray  # (n_u, 5)
    carrier_seg: np.ndarray  # (n_c, 4)
    sys_seg: np.ndarray  # (8,)
    valid_order_flags: np.ndarray  # (n_max,) bool
    slot_order_ids: list[int] = field(default_factory=list)
    uav_ids: list[int] = field(default_factory=list)
    carrier_ids: list[int] = field(default_factory=list)
    _flat: np.ndarray | None = None

    def flat(self) -> np.ndarray:
        """Single concatenated feature vector (the critics' state input).

        Cached: encodings are immutable snapshots and get re-used across
        many replay samples.
        """
        if self._flat is None:
            self._flat = np.concatenate(
                [
                    self.order_seg.ravel(),
                    self.uav_seg.ravel(),
                    self.carrier_seg.ravel(),
                    self.sys_seg,
                ]
            )
        return self._flat


def encode_state(state: WorldState, caps: tuple[int, int, int]) -> GlobalState:
    """Encode a world snapshot into the fixed-length global state.

    caps = (n_max, n_u, n_c). Active orders are sorted by (deadline, id)
    and the first n_max occupy slots; any excess is deferred to later
    epochs. Fleet slots follow list order. Positions normalize by the road
    network bounding box, times by the horizon, speeds by the fastest
    configured vehicle.
    """
    n_max, n_u, n_c = caps
    if len(state.uavs) > n_u or len(state.carriers) > n_c:
        raise ValueError("fleet exceeds declared caps")
    nz = normalizer_for(state)

    order_seg = np.zeros((n_max, ORDER_FEATS), dtype=np.float64)
    valid = np.zeros(n_max, dtype=bool)
    actives = sorted(active_orders(state), key=lambda o: (o.deadline, o.id))[:n_max]
    slot_ids = []
    for i, o in enumerate(actives):
        origin = state.net.point_of(o.origin)
        dest = state.net.point_of(o.destination)
        order_seg[i] = [
            nz.norm_x(origin.x),
            nz.norm_y(origin.y),
            nz.norm_x(dest.x),
            nz.norm_y(dest.y),
            nz.norm_time(o.release_time),
            nz.norm_time(o.deadline),
        ]
        valid[i] = True
        slot_ids.append(o.id)

    uav_seg = np.zeros((n_u, UAV_FEATS), dtype=np.float64)
    for j, u in enumerate(state.uavs):
        uav_seg[j] = [
            nz.norm_x(u.location.x),
            nz.norm_y(u.location.y),
            nz.norm_speed(u.speed),
            1.0 if u.available else 0.0,
            u.battery,
        ]

    carrier_seg = np.zeros((n_c, CARRIER_FEATS), dtype=np.float64)
    for j, c in enumerate(state.carriers):
        p = state.net.point_of(c.location_node)
        carrier_seg[j] = [
            nz.norm_x(p.x),
            nz.norm_y(p.y),
            nz.norm_speed(c.speed),
            1.0 if c.available else 0.0,
        ]

    return GlobalState(
        order_seg=order_seg,
        uav_seg=uav_seg,
        carrier_seg=carrier_seg,
        sys_seg=state.stats.as_vector(),
        valid_order_flags=valid,
        slot_order_ids=slot_ids,
        uav_ids=[u.id for u in state.uavs],
        carrier_ids=[c.id for c in state.carriers],
    )


def extrinsic_reward(
    report: "StepReport",
    cum_matched: int,
    clock: int,
    w: RewardWeights,
    t_max: int,
) -> float:
    """Dense shaped reward for one step.

    Three parts: a completion gradient over matched / picked / delivered
    counts, an execution-rate bonus against cumulative matches (guarded by
    max(.,1) so the zero-match start is defined), and a time-decay term.
    """
    if cum_matched < 0:
        raise ValueError("cumulative matched count cannot be negative")
    gradient = (
        w.lambda_m * report.n_matched
        + w.lambda_p * report.n_picked
        + w.lambda_d * report.n_delivered
    )
    execution = (
        w.lambda_r * (report.n_picked + report.n_delivered) / max(cum_matched, 1)
    )
    decay = w.lambda_t * (1.0 - clock / t_max)
    return gradient + execution + decay


def intrinsic_reward(
    goals: dict[int, np.ndarray],
    executed: Assignment,
    w: RewardWeights,
    normalize: bool = True,
) -> float:
    """Goal-consistency signal: +1 per pair whose mode follows the goal.

    A goal puts the UAV fleet first: its mode is UAV when goal[0] > 0.5,
    carrier otherwise (ties resolve to carrier). Unassigned orders
    contribute nothing. With normalize the sum is averaged over executed
    pairs so the scale is stable across fleet sizes.
    """
    if not executed.pairs:
        return 0.0
    total = 0.0
    for order_id, kind, _vid in executed.pairs:
        goal = goals.get(order_id)
        if goal is None:
            raise ValueError(f"executed order {order_id} has no goal entry")
        wants_uav = goal[0] > 0.5
        agrees = (kind == VehicleKind.UAV) == wants_uav
        total += 1.0 if agrees else -1.0
    if normalize:
        total /= len(executed.pairs)
    return total


def hybrid_reward(r_ex: float, r_in: float, w: RewardWeights) -> float:
    """Worker reward: the extrinsic signal plus the weighted intrinsic one."""
    return r_ex + w.alpha * r_in
