"""Dispatch policy networks with hand-derived backprop.

Everything here is explicit numpy: parameters are plain 2-D float64
arrays, forward passes cache what their backward passes need, and every
gradient is derived by hand for this fixed architecture (no autograd).

The stack: three parallel permutation-invariant set encoders (one
masked self-attention block each, no positional information) for UAVs,
carriers and orders, plus a linear projection of the system statistics.
Pooled fleet embeddings fuse with each order's embedding into a manager
context (goal distribution over the two transport modes) and
mode-specific worker contexts (per order-vehicle pair scores squashed
into (-1, 1), shifted to (0, 1) for matching). Two critics regress
Q-values from the flat state vector and flattened action featurizations.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .assignment import ScoreMatrix
from .feasibility import FeasibilityMask
from .mdp import CARRIER_FEATS, ORDER_FEATS, SYS_FEATS, UAV_FEATS, GlobalState

CHECKPOINT_MAGIC = b"HRL4AG01"
_CLIP = 1e-9  # keeps noisy raw scores strictly inside (-1, 1)


@dataclass(frozen=True)
class ArchConfig:
    """Shape parameters of the policy stack."""

    n_max: int
    n_u: int
    n_c: int
    hidden: int = 256
    heads: int = 4

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError("hidden size must be divisible by head count")
        if self.hidden % 2 != 0:
            raise ValueError("hidden size must be even")

    @property
    def ff(self) -> int:
        return 2 * self.hidden

    @property
    def proj(self) -> int:  # phi / psi output width
        return self.hidden // 2

    @property
    def score_hidden(self) -> int:
        return self.hidden // 2

    @property
    def m(self) -> int:
        return self.n_u + self.n_c

    @property
    def state_dim(self) -> int:
        return (
            self.n_max * ORDER_FEATS
            + self.n_u * UAV_FEATS
            + self.n_c * CARRIER_FEATS
            + SYS_FEATS
        )

    @property
    def critic_m_in(self) -> int:
        return self.state_dim + 2 * self.n_max

    @property
    def critic_w_in(self) -> int:
        return self.state_dim + 2 * self.n_max * self.m


# ----------------------------------------------------------------------
# Parameter containers
# ----------------------------------------------------------------------


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, int]) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class _TensorGroup:
    """Mixin: iterate (name, array) pairs in field declaration order."""

    def tensors(self):
        for f in fields(self):
            yield f.name, getattr(self, f.name)

    def copy(self):
        return type(self)(**{f.name: getattr(self, f.name).copy() for f in fields(self)})


@dataclass
class SetEncoderParams(_TensorGroup):
    w_in: np.ndarray
    b_in: np.ndarray
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    w_f1: np.ndarray
    b_f1: np.ndarray
    w_f2: np.ndarray
    b_f2: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, h: int, ff: int):
        return cls(
            w_in=_uniform(rng, d_in, (d_in, h)),
            b_in=_uniform(rng, d_in, (1, h)),
            wq=_uniform(rng, h, (h, h)),
            bq=_uniform(rng, h, (1, h)),
            wk=_uniform(rng, h, (h, h)),
            bk=_uniform(rng, h, (1, h)),
            wv=_uniform(rng, h, (h, h)),
            bv=_uniform(rng, h, (1, h)),
            wo=_uniform(rng, h, (h, h)),
            bo=_uniform(rng, h, (1, h)),
            ln1_g=np.ones((1, h)),
            ln1_b=np.zeros((1, h)),
            w_f1=_uniform(rng, h, (h, ff)),
            b_f1=_uniform(rng, h, (1, ff)),
            w_f2=_uniform(rng, ff, (ff, h)),
            b_f2=_uniform(rng, ff, (1, h)),
            ln2_g=np.ones((1, h)),
            ln2_b=np.zeros((1, h)),
        )


@dataclass
class EncoderStack(_TensorGroup):
    """The three entity encoders plus the system-statistics projection."""

    uav: SetEncoderParams
    carrier: SetEncoderParams
    order: SetEncoderParams
    w_g: np.ndarray
    b_g: np.ndarray

    def tensors(self):
        for prefix in ("uav", "carrier", "order"):
            for name, arr in getattr(self, prefix).tensors():
                yield f"{prefix}.{name}", arr
        yield "w_g", self.w_g
        yield "b_g", self.b_g

    def copy(self):
        return EncoderStack(
            uav=self.uav.copy(),
            carrier=self.carrier.copy(),
            order=self.order.copy(),
            w_g=self.w_g.copy(),
            b_g=self.b_g.copy(),
        )

    @classmethod
    def init(cls, rng: np.random.Generator, arch: ArchConfig):
        h = arch.hidden
        return cls(
            uav=SetEncoderParams.init(rng, UAV_FEATS, h, arch.ff),
            carrier=SetEncoderParams.init(rng, CARRIER_FEATS, h, arch.ff),
            order=SetEncoderParams.init(rng, ORDER_FEATS, h, arch.ff),
            w_g=_uniform(rng, SYS_FEATS, (SYS_FEATS, h)),
            b_g=_uniform(rng, SYS_FEATS, (1, h)),
        )


@dataclass
class ManagerParams(_TensorGroup):
    ln_g: np.ndarray
    ln_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, arch: ArchConfig):
        z = 4 * arch.hidden
        return cls(
            ln_g=np.ones((1, z)),
            ln_b=np.zeros((1, z)),
            w1=_uniform(rng, z, (z, arch.hidden)),
            b1=_uniform(rng, z, (1, arch.hidden)),
            w2=_uniform(rng, arch.hidden, (arch.hidden, 2)),
            b2=_uniform(rng, arch.hidden, (1, 2)),
        )


@dataclass
class WorkerParams(_TensorGroup):
    w_phi: np.ndarray  # rows [0, hidden) act on the vehicle embedding,
    b_phi: np.ndarray  # rows [hidden, 4*hidden) on the mode context
    w_psi: np.ndarray
    b_psi: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, arch: ArchConfig):
        h, p, s = arch.hidden, arch.proj, arch.score_hidden
        return cls(
            w_phi=_uniform(rng, 4 * h, (4 * h, p)),
            b_phi=_uniform(rng, 4 * h, (1, p)),
            w_psi=_uniform(rng, 2, (2, p)),
            b_psi=_uniform(rng, 2, (1, p)),
            w1=_uniform(rng, 2 * p, (2 * p, s)),
            b1=_uniform(rng, 2 * p, (1, s)),
            w2=_uniform(rng, s, (s, 1)),
            b2=_uniform(rng, s, (1, 1)),
        )


@dataclass
class CriticParams(_TensorGroup):
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, h: int):
        return cls(
            w1=_uniform(rng, d_in, (d_in, h)),
            b1=_uniform(rng, d_in, (1, h)),
            w2=_uniform(rng, h, (h, 1)),
            b2=_uniform(rng, h, (1, 1)),
        )


_GROUPS = (
    "stack",
    "manager",
    "worker_uav",
    "worker_carrier",
    "critic_m",
    "critic_w",
)


@dataclass
class PolicyParams:
    """Online and target copies of every learnable tensor."""

    arch: ArchConfig
    stack: EncoderStack
    manager: ManagerParams
    worker_uav: WorkerParams
    worker_carrier: WorkerParams
    critic_m: CriticParams
    critic_w: CriticParams
    t_stack: EncoderStack
    t_manager: ManagerParams
    t_worker_uav: WorkerParams
    t_worker_carrier: WorkerParams
    t_critic_m: CriticParams
    t_critic_w: CriticParams

    @classmethod
    def init(cls, rng: np.random.Generator, arch: ArchConfig) -> "PolicyParams":
        stack = EncoderStack.init(rng, arch)
        manager = ManagerParams.init(rng, arch)
        wu = WorkerParams.init(rng, arch)
        wc = WorkerParams.init(rng, arch)
        cm = CriticParams.init(rng, arch.critic_m_in, arch.hidden)
        cw = CriticParams.init(rng, arch.critic_w_in, arch.hidden)
        return cls(
            arch=arch,
            stack=stack,
            manager=manager,
            worker_uav=wu,
            worker_carrier=wc,
            critic_m=cm,
            critic_w=cw,
            t_stack=stack.copy(),
            t_manager=manager.copy(),
            t_worker_uav=wu.copy(),
            t_worker_carrier=wc.copy(),
            t_critic_m=cm.copy(),
            t_critic_w=cw.copy(),
        )

    def tensors(self):
        """(name, array) for every tensor, online groups then targets."""
        for g in _GROUPS:
            for name, arr in getattr(self, g).tensors():
                yield f"{g}.{name}", arr
        for g in _GROUPS:
            for name, arr in getattr(self, f"t_{g}").tensors():
                yield f"t_{g}.{name}", arr


# ----------------------------------------------------------------------
# Layer primitives (forward + hand-derived backward)
# ----------------------------------------------------------------------


def _linear_bwd(dout: np.ndarray, x: np.ndarray, w: np.ndarray):
    dx = dout @ w.T
    d2 = dout.reshape(-1, dout.shape[-1])
    dw = x.reshape(-1, x.shape[-1]).T @ d2
    db = d2.sum(axis=0, keepdims=True)
    return dx, dw, db


def _layernorm_fwd(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _layernorm_bwd(dout: np.ndarray, cache):
    xhat, inv, g = cache
    dg = (dout * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0, keepdims=True)
    db = dout.reshape(-1, dout.shape[-1]).sum(axis=0, keepdims=True)
    dxhat = dout * g
    dx = inv * (
        dxhat
        - dxhat.mean(-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(-1, keepdims=True)
    )
    return dx, dg, db


def _masked_softmax(scores: np.ndarray, key_valid: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with invalid keys excluded.

    Rows whose keys are all invalid come out as all-zero (their queries
    are padding and get discarded downstream anyway).
    """
    masked = np.where(key_valid, scores, -np.inf)
    mx = masked.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(masked - mx)
    denom = e.sum(axis=-1, keepdims=True)
    return e / np.maximum(denom, 1e-300)


def _softmax_bwd(dout: np.ndarray, a: np.ndarray) -> np.ndarray:
    return a * (dout - (dout * a).sum(axis=-1, keepdims=True))


def encoder_fwd(p: SetEncoderParams, x: np.ndarray, valid: np.ndarray, heads: int):
    """One masked self-attention block over a set of entities.

    x: (B, n, d_in), valid: (B, n) bool. Returns (B, n, h) embeddings with
    invalid rows zeroed, plus the backward cache.
    """
    b, n, _ = x.shape
    h = p.w_in.shape[1]
    if n == 0:
        return np.zeros((b, 0, h)), None
    dk = h // heads
    h0 = x @ p.w_in + p.b_in
    q = h0 @ p.wq + p.bq
    k = h0 @ p.wk + p.bk
    v = h0 @ p.wv + p.bv
    qh = q.reshape(b, n, heads, dk).transpose(0, 2, 1, 3)
    kh = k.reshape(b, n, heads, dk).transpose(0, 2, 1, 3)
    vh = v.reshape(b, n, heads, dk).transpose(0, 2, 1, 3)
    scores = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(dk)
    a = _masked_softmax(scores, valid[:, None, None, :])
    attn_h = a @ vh  # (B, heads, n, dk)
    attn = attn_h.transpose(0, 2, 1, 3).reshape(b, n, h)
    proj = attn @ p.wo + p.bo
    r1 = h0 + proj
    h1, ln1c = _layernorm_fwd(r1, p.ln1_g, p.ln1_b)
    z_f1 = h1 @ p.w_f1 + p.b_f1
    f1 = np.maximum(z_f1, 0.0)
    f2 = f1 @ p.w_f2 + p.b_f2
    r2 = h1 + f2
    h2, ln2c = _layernorm_fwd(r2, p.ln2_g, p.ln2_b)
    out = h2 * valid[:, :, None]
    cache = (x, valid, h0, qh, kh, vh, a, attn, h1, ln1c, z_f1, f1, ln2c, heads)
    return out, cache


def encoder_bwd(p: SetEncoderParams, dout: np.ndarray, cache) -> dict[str, np.ndarray]:
    """Gradients of every encoder tensor given d(out)."""
    if cache is None:
        return {name: np.zeros_like(arr) for name, arr in p.tensors()}
    (x, valid, h0, qh, kh, vh, a, attn, h1, ln1c, z_f1, f1, ln2c, heads) = cache
    b, n, h = h0.shape
    dk = h // heads

    dh2 = dout * valid[:, :, None]
    dr2, dln2_g, dln2_b = _layernorm_bwd(dh2, ln2c)
    dh1 = dr2.copy()
    df2 = dr2
    df1, dw_f2, db_f2 = _linear_bwd(df2, f1, p.w_f2)
    dz_f1 = df1 * (z_f1 > 0)
    dh1_ff, dw_f1, db_f1 = _linear_bwd(dz_f1, h1, p.w_f1)
    dh1 += dh1_ff
    dr1, dln1_g, dln1_b = _layernorm_bwd(dh1, ln1c)
    dh0 = dr1.copy()
    dproj = dr1
    dattn, dwo, dbo = _linear_bwd(dproj, attn, p.wo)
    dattn_h = dattn.reshape(b, n, heads, dk).transpose(0, 2, 1, 3)
    da = dattn_h @ vh.transpose(0, 1, 3, 2)
    dvh = a.transpose(0, 1, 3, 2) @ dattn_h
    ds = _softmax_bwd(da, a)
    dqh = ds @ kh / np.sqrt(dk)
    dkh = ds.transpose(0, 1, 3, 2) @ qh / np.sqrt(dk)
    dq = dqh.transpose(0, 2, 1, 3).reshape(b, n, h)
    dk_ = dkh.transpose(0, 2, 1, 3).reshape(b, n, h)
    dv = dvh.transpose(0, 2, 1, 3).reshape(b, n, h)
    dh0_q, dwq, dbq = _linear_bwd(dq, h0, p.wq)
    dh0_k, dwk, dbk = _linear_bwd(dk_, h0, p.wk)
    dh0_v, dwv, dbv = _linear_bwd(dv, h0, p.wv)
    dh0 += dh0_q + dh0_k + dh0_v
    _, dw_in, db_in = _linear_bwd(dh0, x, p.w_in)
    return {
        "w_in": dw_in,
        "b_in": db_in,
        "wq": dwq,
        "bq": dbq,
        "wk": dwk,
        "bk": dbk,
        "wv": dwv,
        "bv": dbv,
        "wo": dwo,
        "bo": dbo,
        "ln1_g": dln1_g,
        "ln1_b": dln1_b,
        "w_f1": dw_f1,
        "b_f1": db_f1,
        "w_f2": dw_f2,
        "b_f2": db_f2,
        "ln2_g": dln2_g,
        "ln2_b": dln2_b,
    }


def _masked_mean(x: np.ndarray, valid: np.ndarray):
    """(B, n, h), (B, n) -> (B, h); all-invalid sets pool to zero."""
    cnt = np.maximum(valid.sum(axis=1), 1)
    pooled = (x * valid[:, :, None]).sum(axis=1) / cnt[:, None]
    return pooled, cnt


def _masked_mean_bwd(dpooled: np.ndarray, valid: np.ndarray, cnt: np.ndarray):
    return dpooled[:, None, :] * valid[:, :, None] / cnt[:, None, None]


# ----------------------------------------------------------------------
# Actor stack: encoders -> fusion -> manager goals + worker scores
# ----------------------------------------------------------------------


def batch_features(states: list[GlobalState]) -> dict[str, np.ndarray]:
    """Stack GlobalStates into batched feature arrays for the actor stack."""
    order_x = np.stack([g.order_seg for g in states])
    order_valid = np.stack([g.valid_order_flags for g in states])
    uav_x = np.stack([g.uav_seg for g in states])
    car_x = np.stack([g.carrier_seg for g in states])
    sys_x = np.stack([g.sys_seg for g in states])
    n_u = uav_x.shape[1]
    n_c = car_x.shape[1]
    uav_valid = np.zeros((len(states), n_u), dtype=bool)
    car_valid = np.zeros((len(states), n_c), dtype=bool)
    for i, g in enumerate(states):
        uav_valid[i, : len(g.uav_ids)] = True
        car_valid[i, : len(g.carrier_ids)] = True
    return {
        "order_x": order_x,
        "order_valid": order_valid,
        "uav_x": uav_x,
        "uav_valid": uav_valid,
        "car_x": car_x,
        "car_valid": car_valid,
        "sys_x": sys_x,
    }


def _worker_fwd(p: WorkerParams, emb: np.ndarray, ctx: np.ndarray, goals: np.ndarray, h: int):
    """Pair scores for one mode.

    emb: (B, m, h) vehicle embeddings; ctx: (B, N, 3h) mode context per
    order; goals: (B, N, 2). Returns raw scores (B, N, m) in (-1, 1).
    """
    b, m, _ = emb.shape
    n = ctx.shape[1]
    w_v = p.w_phi[:h]
    w_c = p.w_phi[h:]
    av = emb @ w_v  # (B, m, p)
    ac = ctx @ w_c  # (B, N, p)
    pair_pre = av[:, None, :, :] + ac[:, :, None, :] + p.b_phi  # (B, N, m, p)
    psi = goals @ p.w_psi + p.b_psi  # (B, N, p)
    q_pre = np.concatenate(
        [pair_pre, np.broadcast_to(psi[:, :, None, :], pair_pre.shape)], axis=-1
    )
    q = np.maximum(q_pre, 0.0)
    z1 = q @ p.w1 + p.b1
    s1 = np.maximum(z1, 0.0)
    z2 = s1 @ p.w2 + p.b2
    raw = np.tanh(z2[..., 0])  # (B, N, m)
    cache = (emb, ctx, goals, q_pre, q, z1, s1, raw)
    return raw, cache


def _worker_bwd(p: WorkerParams, draw: np.ndarray, cache, h: int):
    """Gradients for one worker; the goal input is treated as constant."""
    emb, ctx, goals, q_pre, q, z1, s1, raw = cache
    pdim = p.w_phi.shape[1]
    dz2 = (draw * (1.0 - raw * raw))[..., None]
    ds1, dw2, db2 = _linear_bwd(dz2, s1, p.w2)
    dz1 = ds1 * (z1 > 0)
    dq, dw1, db1 = _linear_bwd(dz1, q, p.w1)
    dq_pre = dq * (q_pre > 0)
    dpair = dq_pre[..., :pdim]
    dpsi = dq_pre[..., pdim:].sum(axis=2)  # (B, N, p)
    _, dw_psi, db_psi = _linear_bwd(dpsi, goals, p.w_psi)
    db_phi = dpair.reshape(-1, pdim).sum(axis=0, keepdims=True)
    dav = dpair.sum(axis=1)  # (B, m, p)
    dac = dpair.sum(axis=2)  # (B, N, p)
    demb, dw_v, _ = _linear_bwd(dav, emb, p.w_phi[:h])
    dctx, dw_c, _ = _linear_bwd(dac, ctx, p.w_phi[h:])
    dw_phi = np.concatenate([dw_v, dw_c], axis=0)
    grads = {
        "w_phi": dw_phi,
        "b_phi": db_phi,
        "w_psi": dw_psi,
        "b_psi": db_psi,
        "w1": dw1,
        "b1": db1,
        "w2": dw2,
        "b2": db2,
    }
    return demb, dctx, grads


def _manager_fwd(p: ManagerParams, z: np.ndarray):
    ln, lnc = _layernorm_fwd(z, p.ln_g, p.ln_b)
    z1 = ln @ p.w1 + p.b1
    a1 = np.maximum(z1, 0.0)
    logits = a1 @ p.w2 + p.b2
    mx = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - mx)
    goals = e / e.sum(axis=-1, keepdims=True)
    cache = (z, lnc, ln, z1, a1, goals)
    return goals, cache


def _manager_bwd(p: ManagerParams, dgoals: np.ndarray, cache):
    z, lnc, ln, z1, a1, goals = cache
    dlogits = _softmax_bwd(dgoals, goals)
    da1, dw2, db2 = _linear_bwd(dlogits, a1, p.w2)
    dz1 = da1 * (z1 > 0)
    dln, dw1, db1 = _linear_bwd(dz1, ln, p.w1)
    dz, dln_g, dln_b = _layernorm_bwd(dln, lnc)
    grads = {
        "ln_g": dln_g,
        "ln_b": dln_b,
        "w1": dw1,
        "b1": db1,
        "w2": dw2,
        "b2": db2,
    }
    return dz, grads


def actor_forward(
    stack: EncoderStack,
    manager: ManagerParams,
    worker_u: WorkerParams,
    worker_c: WorkerParams,
    arch: ArchConfig,
    feats: dict[str, np.ndarray],
    hierarchy: bool = True,
    worker_goals: np.ndarray | None = None,
):
    """Full actor stack on a batch of encoded states.

    Returns (goals (B,N,2), raw scores (B,N,M) in (-1,1), cache).
    With hierarchy disabled the manager is bypassed and every goal is the
    fixed uniform distribution. worker_goals, when given, replaces the
    goal tensor the workers condition on (the workers treat the goal as a
    constant anyway, so this realizes that stop-gradient exactly).
    """
    h = arch.hidden
    u_emb, u_cache = encoder_fwd(stack.uav, feats["uav_x"], feats["uav_valid"], arch.heads)
    c_emb, c_cache = encoder_fwd(stack.carrier, feats["car_x"], feats["car_valid"], arch.heads)
    o_emb, o_cache = encoder_fwd(stack.order, feats["order_x"], feats["order_valid"], arch.heads)
    g_emb = feats["sys_x"] @ stack.w_g + stack.b_g  # (B, h)

    pooled_u, cnt_u = _masked_mean(u_emb, feats["uav_valid"])
    pooled_c, cnt_c = _masked_mean(c_emb, feats["car_valid"])

    b, n = feats["order_valid"].shape
    pu = np.broadcast_to(pooled_u[:, None, :], (b, n, h))
    pc = np.broadcast_to(pooled_c[:, None, :], (b, n, h))
    ge = np.broadcast_to(g_emb[:, None, :], (b, n, h))
    z = np.concatenate([pu, pc, o_emb, ge], axis=-1)  # (B, N, 4h)
    u_ctx = np.concatenate([pu, o_emb, ge], axis=-1)  # (B, N, 3h)
    c_ctx = np.concatenate([pc, o_emb, ge], axis=-1)

    if hierarchy:
        goals, m_cache = _manager_fwd(manager, z)
    else:
        goals, m_cache = np.full((b, n, 2), 0.5), None

    gate = goals if worker_goals is None else worker_goals
    raw_u, wu_cache = _worker_fwd(worker_u, u_emb, u_ctx, gate, h)
    raw_c, wc_cache = _worker_fwd(worker_c, c_emb, c_ctx, gate, h)
    raw = np.concatenate([raw_u, raw_c], axis=-1)  # (B, N, M)

    cache = {
        "u_cache": u_cache,
        "c_cache": c_cache,
        "o_cache": o_cache,
        "m_cache": m_cache,
        "wu_cache": wu_cache,
        "wc_cache": wc_cache,
        "feats": feats,
        "u_emb": u_emb,
        "c_emb": c_emb,
        "cnt_u": cnt_u,
        "cnt_c": cnt_c,
        "hierarchy": hierarchy,
    }
    return goals, raw, cache


def actor_backward(
    stack: EncoderStack,
    manager: ManagerParams,
    worker_u: WorkerParams,
    worker_c: WorkerParams,
    arch: ArchConfig,
    dgoals: np.ndarray,
    draw: np.ndarray,
    cache,
):
    """Backward through the whole actor stack.

    dgoals flows through the manager head only; the workers' use of the
    goal is a stop-gradient, so worker objectives never train the manager.
    Returns per-group gradient dicts: (stack, manager, worker_u, worker_c)
    where the encoder gradients accumulate both heads' contributions.
    """
    h = arch.hidden
    feats = cache["feats"]
    n_u = feats["uav_x"].shape[1]
    draw_u = draw[..., :n_u]
    draw_c = draw[..., n_u:]

    demb_u, du_ctx, g_wu = _worker_bwd(worker_u, draw_u, cache["wu_cache"], h)
    demb_c, dc_ctx, g_wc = _worker_bwd(worker_c, draw_c, cache["wc_cache"], h)

    if cache["hierarchy"]:
        dz, g_m = _manager_bwd(manager, dgoals, cache["m_cache"])
    else:
        dz = np.zeros(dgoals.shape[:2] + (4 * h,))
        g_m = {name: np.zeros_like(arr) for name, arr in manager.tensors()}

    # Un-concatenate the fused contexts back onto their sources.
    dpooled_u = dz[..., :h].sum(axis=1) + du_ctx[..., :h].sum(axis=1)
    dpooled_c = dz[..., h : 2 * h].sum(axis=1) + dc_ctx[..., :h].sum(axis=1)
    do_emb = dz[..., 2 * h : 3 * h] + du_ctx[..., h : 2 * h] + dc_ctx[..., h : 2 * h]
    dg = dz[..., 3 * h :].sum(axis=1) + du_ctx[..., 2 * h :].sum(axis=1) + dc_ctx[
        ..., 2 * h :
    ].sum(axis=1)

    du_emb = demb_u + _masked_mean_bwd(dpooled_u, feats["uav_valid"], cache["cnt_u"])
    dc_emb = demb_c + _masked_mean_bwd(dpooled_c, feats["car_valid"], cache["cnt_c"])

    g_enc_u = encoder_bwd(stack.uav, du_emb, cache["u_cache"])
    g_enc_c = encoder_bwd(stack.carrier, dc_emb, cache["c_cache"])
    g_enc_o = encoder_bwd(stack.order, do_emb, cache["o_cache"])
    dw_g = np.einsum("bi,bj->ij", feats["sys_x"], dg)
    db_g = dg.sum(axis=0, keepdims=True)

    g_stack = {f"uav.{k}": v for k, v in g_enc_u.items()}
    g_stack.update({f"carrier.{k}": v for k, v in g_enc_c.items()})
    g_stack.update({f"order.{k}": v for k, v in g_enc_o.items()})
    g_stack["w_g"] = dw_g
    g_stack["b_g"] = db_g
    return g_stack, g_m, g_wu, g_wc


# ----------------------------------------------------------------------
# Critics
# ----------------------------------------------------------------------


def critic_fwd(p: CriticParams, x: np.ndarray):
    z1 = x @ p.w1 + p.b1
    a1 = np.maximum(z1, 0.0)
    q = a1 @ p.w2 + p.b2  # (B, 1)
    return q, (x, z1, a1)


def critic_bwd(p: CriticParams, dq: np.ndarray, cache):
    x, z1, a1 = cache
    da1, dw2, db2 = _linear_bwd(dq, a1, p.w2)
    dz1 = da1 * (z1 > 0)
    dx, dw1, db1 = _linear_bwd(dz1, x, p.w1)
    grads = {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}
    return dx, grads


# ----------------------------------------------------------------------
# Gradient utilities
# ----------------------------------------------------------------------


def grad_norm(*grad_dicts: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grad_dicts:
        for arr in g.values():
            total += float((arr * arr).sum())
    return float(np.sqrt(total))


def clip_grads(grad_dicts: tuple[dict[str, np.ndarray], ...], max_norm: float) -> float:
    """Scale gradients in place so their joint norm is at most max_norm."""
    norm = grad_norm(*grad_dicts)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for g in grad_dicts:
            for arr in g.values():
                arr *= scale
    return norm


def sgd_step(group, grads: dict[str, np.ndarray], lr: float) -> None:
    for name, arr in group.tensors():
        arr -= lr * grads[name]


def check_finite(grads: dict[str, np.ndarray]) -> bool:
    return all(np.isfinite(arr).all() for arr in grads.values())


# ----------------------------------------------------------------------
# Inference-time scoring against a feasibility mask
# ----------------------------------------------------------------------


def score_all(
    params: PolicyParams,
    gs: GlobalState,
    mask: FeasibilityMask,
    noise_std: float = 0.0,
    rng: np.random.Generator | None = None,
    hierarchy: bool = True,
    use_target: bool = False,
) -> tuple[ScoreMatrix, dict[int, np.ndarray]]:
    """Score every feasible pair for one state; masked entries stay -inf.

    Gaussian exploration noise (stddev noise_std) perturbs the raw scores
    before the shift into (0, 1); evaluation uses noise_std 0. Orders
    beyond the slot capacity keep sentinel rows and wait for a later epoch.
    """
    arch = params.arch
    if gs.uav_ids != mask.uav_ids or gs.carrier_ids != mask.carrier_ids:
        raise ValueError("state and mask disagree on fleet indexing")
    if noise_std > 0 and rng is None:
        raise ValueError("exploration noise requires a generator")

    stack = params.t_stack if use_target else params.stack
    manager = params.t_manager if use_target else params.manager
    wu = params.t_worker_uav if use_target else params.worker_uav
    wc = params.t_worker_carrier if use_target else params.worker_carrier

    feats = batch_features([gs])
    goals, raw, _ = actor_forward(stack, manager, wu, wc, arch, feats, hierarchy)
    raw = raw[0]  # (N, M)
    goals = goals[0]  # (N, 2)
    if noise_std > 0:
        raw = raw + rng.normal(0.0, noise_std, size=raw.shape)
    raw = np.clip(raw, -1.0 + _CLIP, 1.0 - _CLIP)
    shifted = (raw + 1.0) / 2.0

    scores = ScoreMatrix.masked_like(mask)
    goal_map: dict[int, np.ndarray] = {}
    row_of = {oid: i for i, oid in enumerate(mask.order_ids)}
    for slot, oid in enumerate(gs.slot_order_ids):
        r = row_of[oid]
        feasible = mask.entries[r]
        scores.values[r, feasible] = shifted[slot, feasible]
        goal_map[oid] = goals[slot].copy()
    return scores, goal_map


# ----------------------------------------------------------------------
# Checkpoint I/O: magic, little-endian shape table, float32 data
# ----------------------------------------------------------------------


def save_checkpoint(params: PolicyParams, path: str | Path) -> None:
    entries = list(params.tensors())
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(entries)))
        for _, arr in entries:
            if arr.ndim != 2:
                raise ValueError("checkpoint tensors must be 2-D")
            f.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        for _, arr in entries:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path, arch: ArchConfig) -> PolicyParams:
    params = PolicyParams.init(np.random.default_rng(0), arch)
    entries = list(params.tensors())
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (count,) = struct.unpack("<I", f.read(4))
        if count != len(entries):
            raise ValueError(
                f"checkpoint holds {count} tensors, architecture needs {len(entries)}"
            )
        shapes = []
        for _ in range(count):
            shapes.append(struct.unpack("<II", f.read(8)))
        for (name, arr), shape in zip(entries, shapes):
            if arr.shape != shape:
                raise ValueError(
                    f"tensor {name}: checkpoint shape {shape} != expected {arr.shape}"
                )
        for name, arr in entries:
            raw = f.read(arr.size * 4)
            data = np.frombuffer(raw, dtype="<f4").astype(np.float64)
            arr[:] = data.reshape(arr.shape)
    return params
