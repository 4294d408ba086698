"""Dispatch policies: everything that turns a masked state into pairs.

All policies share one surface: propose(state, mask) -> DispatchDecision.
The heuristic baselines (distance-greedy, exact matcher, uniform random)
need no learning machinery; the learned policy wraps the network stack
and produces both scores and per-order mode goals.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .assignment import (
    Assignment,
    ScoreMatrix,
    exact_match,
    greedy_distance_policy,
    greedy_match,
)
from .feasibility import FeasibilityMask
from .mdp import encode_state
from .neural import PolicyParams, score_all
from .world import WorldState


@dataclass
class DispatchDecision:
    assignment: Assignment
    scores: ScoreMatrix | None = None
    goals: dict[int, np.ndarray] | None = None


class DispatchPolicy(Protocol):
    name: str

    def reset(self, rng: np.random.Generator) -> None: ...

    def propose(self, state: WorldState, mask: FeasibilityMask) -> DispatchDecision: ...


class GreedyDistancePolicy:
    """Smallest total distance first (approach leg plus order leg)."""

    name = "greedy"

    def reset(self, rng: np.random.Generator) -> None:
        pass

    def propose(self, state: WorldState, mask: FeasibilityMask) -> DispatchDecision:
        scores = greedy_distance_policy(state, mask)
        return DispatchDecision(greedy_match(scores, mask), scores=scores)


class ExactMatchPolicy:
    """Per-step optimal: maximum-cardinality matching under the mask."""

    name = "exact"

    def reset(self, rng: np.random.Generator) -> None:
        pass

    def propose(self, state: WorldState, mask: FeasibilityMask) -> DispatchDecision:
        return DispatchDecision(exact_match(mask))


class RandomPolicy:
    """Uniform scores over feasible pairs; a floor for comparisons."""

    name = "random"

    def __init__(self):
        self._rng = np.random.default_rng(0)

    def reset(self, rng: np.random.Generator) -> None:
        self._rng = rng

    def propose(self, state: WorldState, mask: FeasibilityMask) -> DispatchDecision:
        scores = ScoreMatrix.masked_like(mask)
        feas = mask.entries
        draws = self._rng.random(feas.shape)
        scores.values[feas] = draws[feas]
        return DispatchDecision(greedy_match(scores, mask), scores=scores)


class HrlPolicy:
    """Learned hierarchical policy: manager goals gate worker pair scores.

    Orders beyond the state-slot capacity stay unscored and are excluded
    from this epoch's matching; exploration noise perturbs scores during
    training rollouts and is zero at evaluation.
    """

    name = "hrl4ag"

    def __init__(self, params: PolicyParams, noise_std: float = 0.0, hierarchy: bool = True):
        self.params = params
        self.noise_std = noise_std
        self.hierarchy = hierarchy
        self._rng = np.random.default_rng(0)
        self.last_gs = None  # encoding used for the most recent proposal

    def reset(self, rng: np.random.Generator) -> None:
        self._rng = rng

    def propose(self, state: WorldState, mask: FeasibilityMask) -> DispatchDecision:
        arch = self.params.arch
        gs = encode_state(state, (arch.n_max, arch.n_u, arch.n_c))
        self.last_gs = gs
        scores, goals = score_all(
            self.params,
            gs,
            mask,
            noise_std=self.noise_std,
            rng=self._rng,
            hierarchy=self.hierarchy,
        )
        assignment = greedy_match(scores, _scored_submask(mask, scores))
        return DispatchDecision(assignment, scores=scores, goals=goals)


def _scored_submask(mask: FeasibilityMask, scores: ScoreMatrix) -> FeasibilityMask:
    """Restrict the mask to pairs the policy actually scored this epoch."""
    entries = mask.entries & np.isfinite(scores.values)
    return FeasibilityMask(
        list(mask.order_ids), list(mask.uav_ids), list(mask.carrier_ids), entries
    )


def make_policy(name: str, **kwargs) -> DispatchPolicy:
    if name == "greedy":
        return GreedyDistancePolicy()
    if name == "exact":
        return ExactMatchPolicy()
    if name == "random":
        return RandomPolicy()
    raise ValueError(f"unknown policy {name!r}")
