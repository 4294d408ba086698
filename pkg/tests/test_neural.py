import numpy as np
import pytest

from airground.feasibility import FeasibilityMask
from airground.mdp import RewardWeights
from airground.neural import (
    ArchConfig,
    PolicyParams,
    actor_forward,
    batch_features,
    critic_fwd,
    encoder_fwd,
    load_checkpoint,
    save_checkpoint,
    score_all,
)
from airground.trainer import (
    TrainConfig,
    _batch_arrays,
    _featurize_manager_action,
    _featurize_worker_action,
    actor_gradients,
    critic_losses_and_grads,
)

from util import max_grad_rel_error, random_global_state, random_transitions

ARCH = ArchConfig(n_max=4, n_u=3, n_c=2, hidden=8, heads=4)


def _params(seed=0, arch=ARCH):
    return PolicyParams.init(np.random.default_rng(seed), arch)


def test_arch_validation():
    with pytest.raises(ValueError):
        ArchConfig(n_max=2, n_u=1, n_c=1, hidden=10, heads=4)


def test_single_entity_attention_reduces_to_feedforward():
    # with one valid entity, softmax over one key is 1, so the block is a
    # plain feed-forward of the projected entity; recompute it directly
    p = _params().stack.uav
    x = np.random.default_rng(1).random((1, 1, 5))
    valid = np.ones((1, 1), dtype=bool)
    out, _ = encoder_fwd(p, x, valid, ARCH.heads)

    def ln(v, g, b, eps=1e-5):
        mu = v.mean()
        var = ((v - mu) ** 2).mean()
        return (v - mu) / np.sqrt(var + eps) * g + b

    h0 = x[0, 0] @ p.w_in + p.b_in[0]
    v = h0 @ p.wv + p.bv[0]  # attention output is exactly the value vector
    proj = v @ p.wo + p.bo[0]
    h1 = ln(h0 + proj, p.ln1_g[0], p.ln1_b[0])
    f = np.maximum(h1 @ p.w_f1 + p.b_f1[0], 0) @ p.w_f2 + p.b_f2[0]
    h2 = ln(h1 + f, p.ln2_g[0], p.ln2_b[0])
    assert out[0, 0] == pytest.approx(h2, abs=1e-12)


def test_encoder_empty_set_yields_zeros():
    p = _params().stack.uav
    out, cache = encoder_fwd(p, np.zeros((2, 0, 5)), np.zeros((2, 0), dtype=bool), 4)
    assert out.shape == (2, 0, 8)
    out2, _ = encoder_fwd(p, np.random.rand(2, 3, 5), np.zeros((2, 3), dtype=bool), 4)
    assert not out2.any()


def test_padding_rows_do_not_influence_valid_rows():
    p = _params().stack.uav
    rng = np.random.default_rng(2)
    x = rng.random((1, 3, 5))
    valid = np.array([[True, True, False]])
    out_a, _ = encoder_fwd(p, x, valid, ARCH.heads)
    x2 = x.copy()
    x2[0, 2] = rng.random(5) * 100  # garbage in the padded slot
    out_b, _ = encoder_fwd(p, x2, valid, ARCH.heads)
    assert np.allclose(out_a[0, :2], out_b[0, :2], atol=1e-12)
    assert not out_a[0, 2].any() and not out_b[0, 2].any()


def test_permutation_invariance_of_fleet_slots():
    params = _params(3)
    rng = np.random.default_rng(4)
    gs = random_global_state(rng, ARCH, min_valid_orders=2)
    feats = batch_features([gs])
    goals, raw, _ = actor_forward(
        params.stack, params.manager, params.worker_uav, params.worker_carrier, ARCH, feats
    )
    for trial in range(20):
        perm = np.random.default_rng(trial).permutation(ARCH.n_u)
        feats_p = {k: (v.copy() if hasattr(v, "copy") else v) for k, v in feats.items()}
        feats_p["uav_x"] = feats["uav_x"][:, perm]
        feats_p["uav_valid"] = feats["uav_valid"][:, perm]
        goals_p, raw_p, _ = actor_forward(
            params.stack, params.manager, params.worker_uav, params.worker_carrier, ARCH, feats_p
        )
        assert np.max(np.abs(goals_p - goals)) < 1e-9
        # per-vehicle scores permute with the slots
        assert np.allclose(raw_p[..., : ARCH.n_u], raw[..., perm], atol=1e-9)
        assert np.allclose(raw_p[..., ARCH.n_u :], raw[..., ARCH.n_u :], atol=1e-9)


def test_goal_distribution_normalized():
    params = _params(5)
    rng = np.random.default_rng(6)
    for _ in range(20):
        gs = random_global_state(rng, ARCH)
        feats = batch_features([gs])
        goals, _, _ = actor_forward(
            params.stack, params.manager, params.worker_uav, params.worker_carrier, ARCH, feats
        )
        assert np.all(goals > 0)
        assert np.max(np.abs(goals.sum(axis=-1) - 1.0)) < 1e-9


def test_zeroed_manager_head_gives_uniform_goals():
    params = _params(7)
    params.manager.w2[:] = 0.0
    params.manager.b2[:] = 0.0
    gs = random_global_state(np.random.default_rng(8), ARCH)
    feats = batch_features([gs])
    goals, _, _ = actor_forward(
        params.stack, params.manager, params.worker_uav, params.worker_carrier, ARCH, feats
    )
    assert np.allclose(goals, 0.5, atol=1e-12)


def test_zeroed_worker_head_gives_zero_scores_and_bounds():
    params = _params(9)
    params.worker_uav.w2[:] = 0.0
    params.worker_uav.b2[:] = 0.0
    rng = np.random.default_rng(10)
    gs = random_global_state(rng, ARCH)
    feats = batch_features([gs])
    _, raw, _ = actor_forward(
        params.stack, params.manager, params.worker_uav, params.worker_carrier, ARCH, feats
    )
    assert np.allclose(raw[..., : ARCH.n_u], 0.0, atol=1e-12)
    params2 = _params(11)
    for _ in range(20):
        gs = random_global_state(rng, ARCH)
        feats = batch_features([gs])
        _, raw, _ = actor_forward(
            params2.stack, params2.manager, params2.worker_uav, params2.worker_carrier, ARCH, feats
        )
        assert np.all(np.abs(raw) < 1.0)


def test_forward_finite_on_unit_inputs():
    rng = np.random.default_rng(12)
    for seed in range(10):
        params = _params(seed)
        gs = random_global_state(rng, ARCH, min_valid_orders=0)
        feats = batch_features([gs])
        goals, raw, _ = actor_forward(
            params.stack, params.manager, params.worker_uav, params.worker_carrier, ARCH, feats
        )
        assert np.isfinite(goals).all()
        assert np.isfinite(raw).all()


# ----------------------------------------------------------------------
# score_all
# ----------------------------------------------------------------------


def _mask_for(gs, density, rng):
    entries = rng.random((len(gs.slot_order_ids), ARCH.m)) < density
    return FeasibilityMask(
        order_ids=list(gs.slot_order_ids),
        uav_ids=list(gs.uav_ids),
        carrier_ids=list(gs.carrier_ids),
        entries=entries,
    )


def test_score_all_all_false_mask():
    params = _params(13)
    rng = np.random.default_rng(14)
    gs = random_global_state(rng, ARCH)
    mask = _mask_for(gs, 0.0, rng)
    scores, goals = score_all(params, gs, mask)
    assert not np.isfinite(scores.values).any()
    assert set(goals) == set(gs.slot_order_ids)


def test_score_all_deterministic_without_noise():
    params = _params(15)
    rng = np.random.default_rng(16)
    gs = random_global_state(rng, ARCH)
    mask = _mask_for(gs, 0.7, rng)
    s1, g1 = score_all(params, gs, mask)
    s2, g2 = score_all(params, gs, mask)
    assert np.array_equal(s1.values, s2.values)
    for k in g1:
        assert np.array_equal(g1[k], g2[k])


def test_score_all_sentinels_exactly_on_masked_entries():
    params = _params(17)
    rng = np.random.default_rng(18)
    for _ in range(20):
        gs = random_global_state(rng, ARCH)
        mask = _mask_for(gs, float(rng.uniform(0, 1)), rng)
        scores, _ = score_all(params, gs, mask, noise_std=0.1, rng=rng)
        finite = np.isfinite(scores.values)
        assert np.array_equal(finite, mask.entries)
        vals = scores.values[finite]
        assert np.all((vals > 0) & (vals < 1))


def test_score_all_noise_requires_rng():
    params = _params(19)
    rng = np.random.default_rng(20)
    gs = random_global_state(rng, ARCH)
    mask = _mask_for(gs, 0.5, rng)
    with pytest.raises(ValueError):
        score_all(params, gs, mask, noise_std=0.1)


def test_score_all_checks_fleet_indexing():
    params = _params(21)
    rng = np.random.default_rng(22)
    gs = random_global_state(rng, ARCH)
    mask = _mask_for(gs, 0.5, rng)
    mask.uav_ids[0] = 99
    with pytest.raises(ValueError):
        score_all(params, gs, mask)


# ----------------------------------------------------------------------
# gradients
# ----------------------------------------------------------------------


def _actor_probe(params, batch, w, cfg, frozen_goals):
    arrays = _batch_arrays(batch, w, cfg)
    goals, raw, _ = actor_forward(
        params.stack,
        params.manager,
        params.worker_uav,
        params.worker_carrier,
        params.arch,
        arrays["feats"],
        cfg.hierarchy,
        worker_goals=frozen_goals,
    )
    shifted = (raw + 1.0) / 2.0
    a_w = _featurize_worker_action(shifted, arrays["valid"])
    x_w = np.concatenate([arrays["s_flat"], a_w], axis=1)
    q_w, _ = critic_fwd(params.critic_w, x_w)
    a_m = _featurize_manager_action(goals, arrays["slot_valid"])
    x_m = np.concatenate([arrays["s_flat"], a_m], axis=1)
    q_m, _ = critic_fwd(params.critic_m, x_m)
    return float(-(q_m.mean() + q_w.mean()))


def test_actor_gradients_match_central_differences():
    w = RewardWeights()
    cfg = TrainConfig(episodes=1, warmup=1, buffer_capacity=100)
    for seed in range(4):
        rng = np.random.default_rng(seed)
        params = _params(seed + 40)
        batch = random_transitions(rng, ARCH, 2)
        arrays = _batch_arrays(batch, w, cfg)
        goals0, _, _ = actor_forward(
            params.stack, params.manager, params.worker_uav, params.worker_carrier,
            ARCH, arrays["feats"], cfg.hierarchy,
        )
        frozen = goals0.copy()
        (g_stack, g_m, g_wu, g_wc), _, _ = actor_gradients(params, batch, w, cfg)
        analytic = {
            "stack": g_stack,
            "manager": g_m,
            "worker_uav": g_wu,
            "worker_carrier": g_wc,
        }
        groups = {
            "stack": params.stack,
            "manager": params.manager,
            "worker_uav": params.worker_uav,
            "worker_carrier": params.worker_carrier,
        }
        err = max_grad_rel_error(
            lambda: _actor_probe(params, batch, w, cfg, frozen),
            groups,
            analytic,
            rng,
            entries_per_tensor=2,
        )
        assert err < 1e-4, f"seed {seed}: actor gradient error {err}"


def test_critic_gradients_match_central_differences():
    w = RewardWeights()
    cfg = TrainConfig(episodes=1, warmup=1, buffer_capacity=100)
    for seed in range(4):
        rng = np.random.default_rng(seed + 60)
        params = _params(seed + 80)
        batch = random_transitions(rng, ARCH, 3)
        loss_m, loss_w, grads_m, grads_w = critic_losses_and_grads(params, batch, w, cfg)
        analytic = {"critic_m": grads_m, "critic_w": grads_w}
        groups = {"critic_m": params.critic_m, "critic_w": params.critic_w}

        def probe():
            lm, lw, _, _ = critic_losses_and_grads(params, batch, w, cfg)
            return lm + lw

        err = max_grad_rel_error(probe, groups, analytic, rng, entries_per_tensor=3)
        assert err < 1e-4, f"seed {seed}: critic gradient error {err}"


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------


def test_checkpoint_round_trip_is_byte_stable(tmp_path):
    params = _params(23)
    p1 = tmp_path / "a.bin"
    p2 = tmp_path / "b.bin"
    save_checkpoint(params, p1)
    loaded = load_checkpoint(p1, ARCH)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    with open(p1, "rb") as f:
        assert f.read(8) == b"HRL4AG01"


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
    with pytest.raises(ValueError):
        load_checkpoint(path, ARCH)


def test_checkpoint_rejects_wrong_architecture(tmp_path):
    params = _params(24)
    path = tmp_path / "ck.bin"
    save_checkpoint(params, path)
    other = ArchConfig(n_max=4, n_u=3, n_c=2, hidden=16, heads=4)
    with pytest.raises(ValueError):
        load_checkpoint(path, other)
