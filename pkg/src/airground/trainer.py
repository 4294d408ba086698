"""DDPG optimization of the manager/worker hierarchy.

One shared replay buffer feeds two critic regressions (the manager's
targets use the shaped global reward, the workers' use the hybrid reward
with the intrinsic term) and one joint actor step per level: each actor
ascends its own critic through the deterministic policy gradient. The
worker treats the manager's goal as a constant input, so worker updates
never touch the manager; both heads share the encoder trunk, which
receives both contributions in a single step. Target copies track the
online parameters through soft updates.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ScenarioConfig
from .engine import EpisodeRunner
from .mdp import GlobalState, RewardWeights, encode_state, extrinsic_reward, intrinsic_reward
from .neural import (
    PolicyParams,
    actor_backward,
    actor_forward,
    batch_features,
    check_finite,
    clip_grads,
    critic_bwd,
    critic_fwd,
    grad_norm,
    save_checkpoint,
    sgd_step,
)
from .policies import HrlPolicy


class TrainingFault(Exception):
    """A non-finite loss or gradient aborted the training step."""


@dataclass
class Transition:
    """One step of experience at state-slot granularity."""

    gs: GlobalState
    goals: np.ndarray  # (N, 2)
    scores: np.ndarray  # (N, M) post-shift, -inf where unscored/infeasible
    r_ex: float
    r_in: float
    gs_next: GlobalState
    mask_next: np.ndarray  # (N, M) bool, feasibility at the next state
    done: bool

    def __post_init__(self):
        if not (np.isfinite(self.r_ex) and np.isfinite(self.r_in)):
            raise ValueError("transition rewards must be finite")


@dataclass
class TrainConfig:
    episodes: int = 200
    batch_size: int = 32
    lr_actor: float = 0.005
    lr_critic: float = 0.005
    tau: float = 0.005
    buffer_capacity: int = 100_000
    warmup: int = 500
    update_every: int = 1
    grad_clip: float = 1.0
    noise_start: float = 0.2
    noise_end: float = 0.01
    checkpoint_every: int = 0  # 0 = final checkpoint only
    optimizer: str = "sgd"  # "sgd" | "adam"
    hierarchy: bool = True
    intrinsic: bool = True
    shaping: bool = True

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size cannot exceed buffer_capacity")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.hierarchy:
            self.intrinsic = False  # no manager, no goal to be consistent with


class ReplayBuffer:
    """Ring buffer; push is safe under concurrent producers."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._next = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._items)

    def push(self, tr: Transition) -> None:
        with self._lock:
            if len(self._items) < self.capacity:
                self._items.append(tr)
            else:
                self._items[self._next] = tr
            self._next = (self._next + 1) % self.capacity

    def sample(self, batch: int, rng: np.random.Generator) -> list[Transition] | None:
        """Uniform draw without replacement; None while undersized."""
        if len(self._items) < batch:
            return None
        idx = rng.choice(len(self._items), size=batch, replace=False)
        return [self._items[i] for i in idx]


# ----------------------------------------------------------------------
# Featurization shared by critic targets and actor objectives
# ----------------------------------------------------------------------


def _stack_states(states: list[GlobalState]) -> np.ndarray:
    return np.stack([g.flat() for g in states])


def _featurize_manager_action(goals: np.ndarray, slot_valid: np.ndarray) -> np.ndarray:
    """(B, N, 2) goals -> flat action features; invalid slots zeroed."""
    return (goals * slot_valid[:, :, None]).reshape(goals.shape[0], -1)


def _featurize_worker_action(scores01: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Post-shift scores (zeros where invalid) plus a validity channel."""
    b = scores01.shape[0]
    filled = np.where(valid, scores01, 0.0)
    return np.concatenate([filled.reshape(b, -1), valid.reshape(b, -1).astype(np.float64)], axis=1)


def _batch_arrays(batch: list[Transition], w: RewardWeights, cfg: TrainConfig):
    """Precompute every array a critic or actor step needs."""
    s_flat = _stack_states([t.gs for t in batch])
    s_next_flat = _stack_states([t.gs_next for t in batch])
    goals = np.stack([t.goals for t in batch])
    stored = np.stack([t.scores for t in batch])
    valid = np.isfinite(stored)
    scores01 = np.where(valid, stored, 0.0)
    slot_valid = np.stack([t.gs.valid_order_flags for t in batch])
    slot_valid_next = np.stack([t.gs_next.valid_order_flags for t in batch])
    mask_next = np.stack([t.mask_next for t in batch])
    r_ex = np.array([t.r_ex for t in batch])[:, None]
    alpha = w.alpha if cfg.intrinsic else 0.0
    r_w = r_ex + alpha * np.array([t.r_in for t in batch])[:, None]
    not_done = 1.0 - np.array([float(t.done) for t in batch])[:, None]
    feats = batch_features([t.gs for t in batch])
    feats_next = batch_features([t.gs_next for t in batch])
    return {
        "s_flat": s_flat,
        "s_next_flat": s_next_flat,
        "goals": goals,
        "scores01": scores01,
        "valid": valid,
        "slot_valid": slot_valid,
        "slot_valid_next": slot_valid_next,
        "mask_next": mask_next,
        "r_ex": r_ex,
        "r_w": r_w,
        "not_done": not_done,
        "feats": feats,
        "feats_next": feats_next,
    }


# ----------------------------------------------------------------------
# Updates
# ----------------------------------------------------------------------


class _Optimizer:
    """SGD, optionally with adaptive moments, over named tensor groups."""

    def __init__(self, kind: str):
        self.kind = kind
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def step(self, group, grads: dict[str, np.ndarray], lr: float, tag: str) -> None:
        if self.kind == "sgd":
            sgd_step(group, grads, lr)
            return
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        for name, arr in group.tensors():
            key = f"{tag}.{name}"
            g = grads[name]
            m = self._m.setdefault(key, np.zeros_like(arr))
            v = self._v.setdefault(key, np.zeros_like(arr))
            t = self._t.get(key, 0) + 1
            self._t[key] = t
            m[:] = beta1 * m + (1 - beta1) * g
            v[:] = beta2 * v + (1 - beta2) * g * g
            mh = m / (1 - beta1**t)
            vh = v / (1 - beta2**t)
            arr -= lr * mh / (np.sqrt(vh) + eps)


def _target_actions(params: PolicyParams, arrays, cfg: TrainConfig):
    """Goal and score features of the target actors at the next states."""
    goals_n, raw_n, _ = actor_forward(
        params.t_stack,
        params.t_manager,
        params.t_worker_uav,
        params.t_worker_carrier,
        params.arch,
        arrays["feats_next"],
        cfg.hierarchy,
    )
    shifted = (raw_n + 1.0) / 2.0
    a_m = _featurize_manager_action(goals_n, arrays["slot_valid_next"])
    a_w = _featurize_worker_action(shifted, arrays["mask_next"])
    return a_m, a_w


def critic_losses_and_grads(
    params: PolicyParams,
    batch: list[Transition],
    w: RewardWeights,
    cfg: TrainConfig,
    arrays: dict | None = None,
):
    """Pure critic regression: losses and parameter gradients, no step.

    Targets bootstrap through the target networks; done transitions use
    the reward alone. The manager regresses on the shaped global reward,
    the worker on the hybrid reward.
    """
    if arrays is None:
        arrays = _batch_arrays(batch, w, cfg)
    b = len(batch)
    a_m_next, a_w_next = _target_actions(params, arrays, cfg)

    x_m_next = np.concatenate([arrays["s_next_flat"], a_m_next], axis=1)
    x_w_next = np.concatenate([arrays["s_next_flat"], a_w_next], axis=1)
    q_m_next, _ = critic_fwd(params.t_critic_m, x_m_next)
    q_w_next, _ = critic_fwd(params.t_critic_w, x_w_next)
    y_m = arrays["r_ex"] + w.gamma * arrays["not_done"] * q_m_next
    y_w = arrays["r_w"] + w.gamma * arrays["not_done"] * q_w_next

    a_m = _featurize_manager_action(arrays["goals"], arrays["slot_valid"])
    a_w = _featurize_worker_action(arrays["scores01"], arrays["valid"])
    x_m = np.concatenate([arrays["s_flat"], a_m], axis=1)
    x_w = np.concatenate([arrays["s_flat"], a_w], axis=1)

    q_m, cache_m = critic_fwd(params.critic_m, x_m)
    q_w, cache_w = critic_fwd(params.critic_w, x_w)
    loss_m = float(np.mean((q_m - y_m) ** 2))
    loss_w = float(np.mean((q_w - y_w) ** 2))
    _, grads_m = critic_bwd(params.critic_m, 2.0 * (q_m - y_m) / b, cache_m)
    _, grads_w = critic_bwd(params.critic_w, 2.0 * (q_w - y_w) / b, cache_w)
    return loss_m, loss_w, grads_m, grads_w


def critic_update(
    params: PolicyParams,
    batch: list[Transition],
    w: RewardWeights,
    cfg: TrainConfig,
    opt: _Optimizer | None = None,
    arrays: dict | None = None,
) -> tuple[float, float]:
    """One regression step per critic; returns the pre-step MSE losses."""
    loss_m, loss_w, grads_m, grads_w = critic_losses_and_grads(
        params, batch, w, cfg, arrays
    )
    if not (np.isfinite(loss_m) and np.isfinite(loss_w)):
        raise TrainingFault(f"non-finite critic loss (m={loss_m}, w={loss_w})")

    opt = opt or _Optimizer(cfg.optimizer)
    if cfg.hierarchy:
        if not check_finite(grads_m):
            raise TrainingFault("non-finite manager critic gradient")
        clip_grads((grads_m,), cfg.grad_clip)
        opt.step(params.critic_m, grads_m, cfg.lr_critic, "critic_m")
    if not check_finite(grads_w):
        raise TrainingFault("non-finite worker critic gradient")
    clip_grads((grads_w,), cfg.grad_clip)
    opt.step(params.critic_w, grads_w, cfg.lr_critic, "critic_w")
    return loss_m, loss_w


def actor_gradients(
    params: PolicyParams,
    batch: list[Transition],
    w: RewardWeights,
    cfg: TrainConfig,
    arrays: dict | None = None,
):
    """Deterministic policy gradients for both actors (pre-clip).

    Each actor ascends its own critic's value at a = mu(s); the worker
    path stops gradients at the manager's goal. Returns the per-group
    gradient dicts and the head norms.
    """
    if arrays is None:
        arrays = _batch_arrays(batch, w, cfg)
    b = len(batch)
    goals, raw, cache = actor_forward(
        params.stack,
        params.manager,
        params.worker_uav,
        params.worker_carrier,
        params.arch,
        arrays["feats"],
        cfg.hierarchy,
    )
    shifted = (raw + 1.0) / 2.0

    # worker objective: maximize Q_w(s, scores)
    a_w = _featurize_worker_action(shifted, arrays["valid"])
    x_w = np.concatenate([arrays["s_flat"], a_w], axis=1)
    _, cache_w = critic_fwd(params.critic_w, x_w)
    dx_w, _ = critic_bwd(params.critic_w, np.full((b, 1), -1.0 / b), cache_w)
    d_state = params.arch.state_dim
    n, m = params.arch.n_max, params.arch.m
    d_scores = dx_w[:, d_state : d_state + n * m].reshape(b, n, m)
    draw = d_scores * arrays["valid"] * 0.5  # chain through the (raw+1)/2 shift

    # manager objective: maximize Q_m(s, goals)
    if cfg.hierarchy:
        a_m = _featurize_manager_action(goals, arrays["slot_valid"])
        x_m = np.concatenate([arrays["s_flat"], a_m], axis=1)
        _, cache_m = critic_fwd(params.critic_m, x_m)
        dx_m, _ = critic_bwd(params.critic_m, np.full((b, 1), -1.0 / b), cache_m)
        dgoals = dx_m[:, d_state:].reshape(b, n, 2) * arrays["slot_valid"][:, :, None]
    else:
        dgoals = np.zeros((b, n, 2))

    g_stack, g_m, g_wu, g_wc = actor_backward(
        params.stack,
        params.manager,
        params.worker_uav,
        params.worker_carrier,
        params.arch,
        dgoals,
        draw,
        cache,
    )
    gnorm_m = grad_norm(g_m)
    gnorm_w = grad_norm(g_wu, g_wc)
    return (g_stack, g_m, g_wu, g_wc), gnorm_m, gnorm_w


def actor_update(
    params: PolicyParams,
    batch: list[Transition],
    w: RewardWeights,
    cfg: TrainConfig,
    opt: _Optimizer | None = None,
    arrays: dict | None = None,
) -> tuple[float, float]:
    """Apply one deterministic-policy-gradient step to both actors."""
    (g_stack, g_m, g_wu, g_wc), gnorm_m, gnorm_w = actor_gradients(
        params, batch, w, cfg, arrays
    )
    for g in (g_stack, g_m, g_wu, g_wc):
        if not check_finite(g):
            raise TrainingFault("non-finite actor gradient")
    clip_grads((g_stack, g_m, g_wu, g_wc), cfg.grad_clip)
    opt = opt or _Optimizer(cfg.optimizer)
    opt.step(params.stack, g_stack, cfg.lr_actor, "stack")
    if cfg.hierarchy:
        opt.step(params.manager, g_m, cfg.lr_actor, "manager")
    opt.step(params.worker_uav, g_wu, cfg.lr_actor, "worker_uav")
    opt.step(params.worker_carrier, g_wc, cfg.lr_actor, "worker_carrier")
    return gnorm_m, gnorm_w


def soft_update(params: PolicyParams, tau: float) -> None:
    """theta_target <- tau * theta_online + (1 - tau) * theta_target."""
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    from .neural import _GROUPS

    for g in _GROUPS:
        online = dict(getattr(params, g).tensors())
        for name, arr in getattr(params, f"t_{g}").tensors():
            arr *= 1.0 - tau
            arr += tau * online[name]


# ----------------------------------------------------------------------
# Training loop
# ----------------------------------------------------------------------


@dataclass
class TrainResult:
    params: PolicyParams
    curves: list[dict]
    checkpoint_path: Path | None


def _slot_arrays(gs: GlobalState, mask, scores, goal_map, arch):
    """Project full-book scores/goals onto the fixed state slots."""
    n, m = arch.n_max, arch.m
    goals = np.full((n, 2), 0.5)
    slot_scores = np.full((n, m), -np.inf)
    row_of = {oid: i for i, oid in enumerate(mask.order_ids)}
    for slot, oid in enumerate(gs.slot_order_ids):
        r = row_of[oid]
        feasible = mask.entries[r]
        slot_scores[slot, feasible] = scores.values[r, feasible]
        if goal_map is not None and oid in goal_map:
            goals[slot] = goal_map[oid]
    return goals, slot_scores


def _slot_mask(gs: GlobalState, mask, arch) -> np.ndarray:
    n, m = arch.n_max, arch.m
    out = np.zeros((n, m), dtype=bool)
    row_of = {oid: i for i, oid in enumerate(mask.order_ids)}
    for slot, oid in enumerate(gs.slot_order_ids):
        out[slot] = mask.entries[row_of[oid]]
    return out


def train(
    scenario: ScenarioConfig,
    cfg: TrainConfig,
    weights: RewardWeights,
    seed: int,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Alternate seeded rollouts with DDPG update sweeps.

    Single-rollout mode: fully deterministic given (seed, configs); equal
    seeds reproduce identical curves and checkpoints bit for bit. Emits
    one learning-curve JSONL row per episode and periodic checkpoints.
    """
    arch = scenario.arch()
    params = PolicyParams.init(
        np.random.default_rng(np.random.SeedSequence([seed, 100])), arch
    )
    buffer = ReplayBuffer(cfg.buffer_capacity)
    buffer_rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    opt = _Optimizer(cfg.optimizer)
    em = scenario.energy_model()
    caps = (arch.n_max, arch.n_u, arch.n_c)

    out = Path(out_dir) if out_dir is not None else None
    curves_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        curves_file = open(out / "curves.jsonl", "w", newline="\n")

    curves: list[dict] = []
    policy = HrlPolicy(params, noise_std=cfg.noise_start, hierarchy=cfg.hierarchy)
    steps_seen = 0

    def _checkpoint(name: str) -> Path | None:
        if out is None:
            return None
        path = out / name
        save_checkpoint(params, path)
        return path

    try:
        for ep in range(cfg.episodes):
            frac = ep / max(cfg.episodes - 1, 1)
            epsilon = cfg.noise_start + (cfg.noise_end - cfg.noise_start) * frac
            policy.noise_std = epsilon
            ep_world_seed = int(
                np.random.SeedSequence([seed, 11, ep]).generate_state(1)[0]
            )
            state = scenario.build_world(ep_world_seed)
            policy.reset(np.random.default_rng(np.random.SeedSequence([seed, 13, ep])))
            runner = EpisodeRunner(state, em, policy)

            losses_m, losses_w, gnorms_m, gnorms_w = [], [], [], []
            pending = None
            while not runner.done:
                t = state.clock
                report, decision, mask = runner.step()
                gs_t = policy.last_gs
                slot_valid_now = _slot_mask(gs_t, mask, arch)
                if pending is not None:
                    pending["gs_next"] = gs_t
                    pending["mask_next"] = slot_valid_now
                    pending["done"] = False
                    buffer.push(Transition(**pending))
                goals_arr, scores_arr = _slot_arrays(
                    gs_t, mask, decision.scores, decision.goals, arch
                )
                if cfg.shaping:
                    r_ex = extrinsic_reward(
                        report, state.counters.cum_matched, t, weights, state.t_max
                    )
                else:
                    r_ex = weights.lambda_d * report.n_delivered
                r_in = 0.0
                if cfg.hierarchy and cfg.intrinsic and decision.goals is not None:
                    r_in = intrinsic_reward(decision.goals, decision.assignment, weights)
                pending = {
                    "gs": gs_t,
                    "goals": goals_arr,
                    "scores": scores_arr,
                    "r_ex": r_ex,
                    "r_in": r_in,
                }
                steps_seen += 1

                if steps_seen >= cfg.warmup and steps_seen % cfg.update_every == 0:
                    batch = buffer.sample(cfg.batch_size, buffer_rng)
                    if batch is not None:
                        arrays = _batch_arrays(batch, weights, cfg)
                        lm, lw = critic_update(params, batch, weights, cfg, opt, arrays)
                        gm, gw = actor_update(params, batch, weights, cfg, opt, arrays)
                        soft_update(params, cfg.tau)
                        losses_m.append(lm)
                        losses_w.append(lw)
                        gnorms_m.append(gm)
                        gnorms_w.append(gw)

            if pending is not None:
                pending["gs_next"] = encode_state(state, caps)
                pending["mask_next"] = np.zeros((arch.n_max, arch.m), dtype=bool)
                pending["done"] = True
                buffer.push(Transition(**pending))

            metrics = runner.finish()
            row = {
                "episode": ep,
                "pn": metrics.pn,
                "dn": metrics.dn,
                "loss_m": float(np.mean(losses_m)) if losses_m else 0.0,
                "loss_w": float(np.mean(losses_w)) if losses_w else 0.0,
                "grad_m": float(np.mean(gnorms_m)) if gnorms_m else 0.0,
                "grad_w": float(np.mean(gnorms_w)) if gnorms_w else 0.0,
                "epsilon": epsilon,
            }
            curves.append(row)
            if curves_file is not None:
                curves_file.write(json.dumps(row, separators=(",", ":")) + "\n")
                curves_file.flush()
            if cfg.checkpoint_every and (ep + 1) % cfg.checkpoint_every == 0:
                _checkpoint(f"checkpoint_ep{ep + 1}.bin")
    except TrainingFault:
        _checkpoint("checkpoint_fault.bin")
        raise
    finally:
        if curves_file is not None:
            curves_file.close()

    path = _checkpoint("checkpoint.bin")
    return TrainResult(params=params, curves=curves, checkpoint_path=path)
