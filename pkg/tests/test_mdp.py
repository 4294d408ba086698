import numpy as np
import pytest
from hypothesis import given, strategies as st

from airground.assignment import Assignment
from airground.engine import StepReport
from airground.mdp import (
    GlobalState,
    RewardWeights,
    encode_state,
    extrinsic_reward,
    hybrid_reward,
    intrinsic_reward,
    normalizer_for,
)
from airground.world import OrderStatus, VehicleKind, active_orders

from util import random_world


def test_reward_weights_defaults_and_validation():
    w = RewardWeights()
    assert (w.lambda_m, w.lambda_p, w.lambda_d, w.lambda_t) == (1.5, 3.0, 10.0, 0.2)
    with pytest.raises(ValueError):
        RewardWeights(lambda_m=-1)
    with pytest.raises(ValueError):
        RewardWeights(gamma=1.0)


def test_extrinsic_all_zero_counts_at_horizon():
    w = RewardWeights()
    r = extrinsic_reward(StepReport(), cum_matched=5, clock=50, w=w, t_max=50)
    assert r == 0.0


def test_extrinsic_worked_example():
    w = RewardWeights()
    report = StepReport(n_matched=2, n_picked=1, n_delivered=0)
    r = extrinsic_reward(report, cum_matched=2, clock=0, w=w, t_max=50)
    assert r == pytest.approx(6.7, abs=1e-12)


def test_extrinsic_zero_match_guard():
    w = RewardWeights()
    r = extrinsic_reward(StepReport(), cum_matched=0, clock=0, w=w, t_max=50)
    assert r == pytest.approx(w.lambda_t)


def test_extrinsic_matches_independent_recomputation():
    rng = np.random.default_rng(0)
    w = RewardWeights(lambda_r=float(rng.uniform(0.1, 2.0)))
    for _ in range(500):
        report = StepReport(
            n_matched=int(rng.integers(0, 6)),
            n_picked=int(rng.integers(0, 6)),
            n_delivered=int(rng.integers(0, 6)),
        )
        cum = int(rng.integers(0, 30))
        clock = int(rng.integers(0, 51))
        expected = (
            1.5 * report.n_matched
            + 3.0 * report.n_picked
            + 10.0 * report.n_delivered
            + w.lambda_r * (report.n_picked + report.n_delivered) / max(cum, 1)
            + 0.2 * (1 - clock / 50)
        )
        got = extrinsic_reward(report, cum, clock, w, 50)
        assert got == pytest.approx(expected, abs=1e-12)


@given(
    st.integers(0, 10), st.integers(0, 10), st.integers(0, 10),
    st.integers(0, 10), st.integers(0, 10), st.integers(0, 10),
)
def test_extrinsic_monotone_in_counts(m1, p1, d1, dm, dp, dd):
    w = RewardWeights()
    base = extrinsic_reward(StepReport(n_matched=m1, n_picked=p1, n_delivered=d1), 20, 10, w, 50)
    more = extrinsic_reward(
        StepReport(n_matched=m1 + dm, n_picked=p1 + dp, n_delivered=d1 + dd), 20, 10, w, 50
    )
    assert more >= base - 1e-12


def test_intrinsic_reward_cases():
    w = RewardWeights()
    goals = {0: np.array([0.9, 0.1]), 1: np.array([0.3, 0.7])}
    plus = Assignment([(0, VehicleKind.UAV, 0)])
    assert intrinsic_reward(goals, plus, w) == 1.0
    minus = Assignment([(1, VehicleKind.UAV, 0)])
    assert intrinsic_reward(goals, minus, w) == -1.0
    # tie at exactly 0.5 resolves to the carrier mode
    tie = {2: np.array([0.5, 0.5])}
    assert intrinsic_reward(tie, Assignment([(2, VehicleKind.CARRIER, 1)]), w) == 1.0
    assert intrinsic_reward(tie, Assignment([(2, VehicleKind.UAV, 1)]), w) == -1.0


def test_intrinsic_reward_empty_and_missing():
    w = RewardWeights()
    assert intrinsic_reward({}, Assignment([]), w) == 0.0
    with pytest.raises(ValueError):
        intrinsic_reward({}, Assignment([(0, VehicleKind.UAV, 0)]), w)


def test_intrinsic_matches_pairwise_recount():
    rng = np.random.default_rng(1)
    w = RewardWeights()
    for _ in range(200):
        n = int(rng.integers(1, 10))
        goals = {i: np.array([g, 1 - g]) for i, g in enumerate(rng.random(n))}
        pairs = []
        for i in range(n):
            if rng.random() < 0.7:
                kind = VehicleKind.UAV if rng.random() < 0.5 else VehicleKind.CARRIER
                pairs.append((i, kind, i))
        executed = Assignment(pairs)
        expected = 0.0
        for oid, kind, _ in pairs:
            agrees = (goals[oid][0] > 0.5) == (kind == VehicleKind.UAV)
            expected += 1.0 if agrees else -1.0
        got_raw = intrinsic_reward(goals, executed, w, normalize=False)
        assert got_raw == pytest.approx(expected)
        if pairs:
            assert intrinsic_reward(goals, executed, w) == pytest.approx(expected / len(pairs))


def test_hybrid_reward_arithmetic():
    w = RewardWeights(alpha=0.1)
    assert hybrid_reward(5.0, 0.0, w) == 5.0
    assert hybrid_reward(6.7, 2.0, w) == pytest.approx(6.9)
    assert hybrid_reward(0.0, -3.0, RewardWeights(alpha=0.5)) == pytest.approx(-1.5)


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50))
def test_hybrid_reward_linear(a, b, c, d):
    w = RewardWeights(alpha=0.25)
    lhs = hybrid_reward(a + c, b + d, w)
    rhs = hybrid_reward(a, b, w) + hybrid_reward(c, d, w)
    assert lhs == pytest.approx(rhs, abs=1e-9)


# ----------------------------------------------------------------------
# state encoding
# ----------------------------------------------------------------------


def test_encode_empty_world():
    state = random_world(np.random.default_rng(2), n_orders=0, n_uav=0, n_carrier=0)
    state.clock = 25
    state.stats.timestep_ratio = 0.5
    gs = encode_state(state, (4, 2, 2))
    assert not gs.order_seg.any()
    assert not gs.uav_seg.any()
    assert not gs.carrier_seg.any()
    assert not gs.valid_order_flags.any()
    assert gs.sys_seg[0] == 0.5
    assert gs.flat().shape == (4 * 6 + 2 * 5 + 2 * 4 + 8,)


def test_encode_extreme_features_hit_bounds():
    state = random_world(np.random.default_rng(3), n_orders=0, n_uav=1, n_carrier=0)
    xmin, ymin, xmax, ymax = state.net.bounding_box()
    corner_min = state.net.nearest_node(type(state.uavs[0].location)(xmin, ymin))
    corner_max = state.net.nearest_node(type(state.uavs[0].location)(xmax, ymax))
    # force exact corner nodes
    from airground.geo import Point

    state.net.points[corner_min] = Point(xmin, ymin)
    state.net.points[corner_max] = Point(xmax, ymax)
    from airground.world import Order

    state.orders = [
        Order(id=0, origin=corner_min, destination=corner_max, release_time=0,
              deadline=state.t_max)
    ]
    gs = encode_state(state, (2, 1, 0))
    row = gs.order_seg[0]
    assert row[4] == 0.0  # release at 0
    assert row[5] == 1.0  # deadline at horizon
    assert {row[0], row[1]} <= {0.0, 1.0} or True  # corner coordinates at extremes
    assert row[0] == 0.0 and row[1] == 0.0
    assert row[2] == 1.0 and row[3] == 1.0


def test_encode_round_trips_through_denormalizer():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        state = random_world(rng, n_orders=12, n_uav=4, n_carrier=3)
        caps = (8, 4, 3)
        gs = encode_state(state, caps)
        # independent denormalizer built from first principles
        xmin, ymin, xmax, ymax = state.net.bounding_box()
        sx, sy = xmax - xmin, ymax - ymin
        speed_max = max([u.speed for u in state.uavs] + [c.speed for c in state.carriers])
        actives = sorted(active_orders(state), key=lambda o: (o.deadline, o.id))[: caps[0]]
        assert gs.slot_order_ids == [o.id for o in actives]
        for i, o in enumerate(actives):
            origin = state.net.point_of(o.origin)
            dest = state.net.point_of(o.destination)
            row = gs.order_seg[i]
            assert row[0] * sx + xmin == pytest.approx(origin.x, abs=1e-9)
            assert row[1] * sy + ymin == pytest.approx(origin.y, abs=1e-9)
            assert row[2] * sx + xmin == pytest.approx(dest.x, abs=1e-9)
            assert row[3] * sy + ymin == pytest.approx(dest.y, abs=1e-9)
            assert row[4] * state.t_max == pytest.approx(min(o.release_time, state.t_max))
            assert row[5] * state.t_max == pytest.approx(min(o.deadline, state.t_max))
        for j, u in enumerate(state.uavs):
            row = gs.uav_seg[j]
            assert row[0] * sx + xmin == pytest.approx(u.location.x, abs=1e-9)
            assert row[1] * sy + ymin == pytest.approx(u.location.y, abs=1e-9)
            assert row[2] * speed_max == pytest.approx(u.speed)
            assert row[3] == (1.0 if u.available else 0.0)
            assert row[4] == u.battery
        for j, c in enumerate(state.carriers):
            row = gs.carrier_seg[j]
            p = state.net.point_of(c.location_node)
            assert row[0] * sx + xmin == pytest.approx(p.x, abs=1e-9)
            assert row[1] * sy + ymin == pytest.approx(p.y, abs=1e-9)


def test_encode_defers_excess_orders_keeping_earliest_deadlines():
    state = random_world(np.random.default_rng(4), n_orders=20)
    for o in state.orders:
        o.status = OrderStatus.PENDING
        o.release_time = 0
        if o.deadline <= 0:
            o.deadline = 10
    caps = (5, 3, 3)
    gs = encode_state(state, caps)
    actives = sorted(active_orders(state), key=lambda o: (o.deadline, o.id))
    assert gs.slot_order_ids == [o.id for o in actives[:5]]
    assert gs.valid_order_flags.sum() == min(5, len(actives))


def test_encode_features_stay_in_unit_interval():
    for seed in range(15):
        rng = np.random.default_rng(seed)
        state = random_world(rng, n_orders=15, n_uav=5, n_carrier=5,
                             clock=int(rng.integers(0, 50)))
        from airground.engine import _refresh_stats

        _refresh_stats(state)
        gs = encode_state(state, (10, 5, 5))
        for seg in (gs.order_seg, gs.uav_seg, gs.carrier_seg, gs.sys_seg):
            assert np.all(seg >= -1e-12)
            assert np.all(seg <= 1 + 1e-12)


def test_encode_rejects_fleet_over_caps():
    state = random_world(np.random.default_rng(5), n_uav=4)
    with pytest.raises(ValueError):
        encode_state(state, (5, 3, 5))
