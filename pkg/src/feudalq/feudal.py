"""Construction of the coupled high- and low-level MDPs from a flat MDP.

The high level picks a goal from a finite goal space every ``epoch_length``
low-level steps; the low level acts every step on an augmented state
(base state, active goal, within-epoch clock).  This module builds that
augmented problem and composes the exact dynamics and rewards each level
experiences under fixed policies of the other level, plus Monte Carlo
estimators used to cross-validate the exact compositions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .mdp import FlatMDP, RngStream, mdp_from_dict, mdp_to_dict

ENUMERATION_CAP = 10**7


class InstanceTooLargeError(ValueError):
    """Exact composition refused; use the Monte Carlo estimators instead."""


class LowState(NamedTuple):
    """Augmented low-level state: (base state, goal index, epoch clock)."""

    base_state: int
    goal: int
    clock: int


def next_decision_state(s_de: int, period: int) -> int:
    """Advance the within-epoch clock: increments, wrapping to 0 at period-1.

    Raises:
        ValueError: If ``s_de`` is outside {0, ..., period-1}.
    """
    if period < 1:
        raise ValueError(f"epoch length must be >= 1, got {period}")
    if not (0 <= s_de < period):
        raise ValueError(f"clock value {s_de} out of range [0, {period})")
    return s_de + 1 if s_de != period - 1 else 0


@dataclass(frozen=True)
class FeudalProblem:
    """A flat MDP paired with a goal space, epoch length, and low reward.

    Attributes:
        flat: The underlying environment.
        goal_space: State ids acting as goals (high-level actions).
        epoch_length: Low-level steps between high-level decisions (T >= 1).
        gamma_high: High-level discount, applied per low-level step.
        gamma_low: Low-level discount.
        low_reward: Designer-chosen reward table, shape (S_low, A).
        low_reward_bound: Bound on |low_reward|.
        low_reward_mode: How ``low_reward`` was built (for serialization).
        extrinsic_coeff: Extrinsic mix-in weight for the indicator modes.
    """

    flat: FlatMDP
    goal_space: np.ndarray
    epoch_length: int
    gamma_high: float
    gamma_low: float
    low_reward: np.ndarray
    low_reward_bound: float
    low_reward_mode: str = "indicator"
    extrinsic_coeff: float = 0.0

    def __post_init__(self) -> None:
        gs = np.ascontiguousarray(np.asarray(self.goal_space, dtype=np.int64))
        lr = np.ascontiguousarray(np.asarray(self.low_reward, dtype=np.float64))
        object.__setattr__(self, "goal_space", gs)
        object.__setattr__(self, "low_reward", lr)
        gs.flags.writeable = False
        lr.flags.writeable = False
        if not (0.0 < self.gamma_high < 1.0 and 0.0 < self.gamma_low < 1.0):
            raise ValueError("discount factors must lie in (0, 1)")
        if self.epoch_length < 1:
            raise ValueError("epoch_length must be >= 1")
        if np.max(np.abs(lr)) > self.low_reward_bound + 1e-12:
            raise ValueError("low_reward exceeds its stored bound")

    @property
    def num_goals(self) -> int:
        return int(self.goal_space.shape[0])

    @property
    def num_low_states(self) -> int:
        return self.flat.num_states * self.num_goals * self.epoch_length

    def low_index(self, base_state: int, goal: int, clock: int) -> int:
        """Flat index of the augmented state (base_state, goal, clock)."""
        return (base_state * self.num_goals + goal) * self.epoch_length + clock

    def low_state(self, index: int) -> LowState:
        index, clock = divmod(index, self.epoch_length)
        base, goal = divmod(index, self.num_goals)
        return LowState(base, goal, clock)


def _indicator_low_reward(
    flat: FlatMDP, goal_space: np.ndarray, epoch_length: int, extrinsic_coeff: float
) -> np.ndarray:
    S, A = flat.num_states, flat.num_actions
    G, T = goal_space.shape[0], epoch_length
    table = np.zeros((S * G * T, A))
    for s in range(S):
        for g in range(G):
            base = (s * G + g) * T
            row = extrinsic_coeff * flat.reward[s]
            if s == goal_space[g]:
                row = row + 1.0
            table[base : base + T, :] = row
    return table


def build_feudal_problem(
    flat: FlatMDP,
    epoch_length: int,
    gamma_low: float,
    gamma_high: float | None = None,
    goal_space: np.ndarray | list[int] | None = None,
    low_reward_mode: str = "indicator",
    extrinsic_coeff: float = 0.0,
    low_reward_table: np.ndarray | None = None,
) -> FeudalProblem:
    """Assemble a :class:`FeudalProblem` from a flat MDP.

    The goal space defaults to the whole state space.  The default low
    reward is the goal indicator 1[s == goal] plus ``extrinsic_coeff`` times
    the extrinsic reward; ``low_reward_mode="table"`` accepts an arbitrary
    bounded table instead.  ``gamma_high`` defaults to the flat discount so
    the experienced high-level value matches the flat one.
    """
    if goal_space is None:
        goal_space = np.arange(flat.num_states, dtype=np.int64)
    goal_space = np.asarray(goal_space, dtype=np.int64)
    if goal_space.size == 0:
        raise ValueError("goal space must be non-empty")
    if np.any(goal_space < 0) or np.any(goal_space >= flat.num_states):
        raise ValueError("goal space entries must be valid state ids")
    if gamma_high is None:
        gamma_high = flat.discount

    if low_reward_mode in ("indicator", "indicator_plus_extrinsic"):
        coeff = extrinsic_coeff if low_reward_mode == "indicator_plus_extrinsic" else 0.0
        extrinsic_coeff = coeff
        table = _indicator_low_reward(flat, goal_space, epoch_length, coeff)
    elif low_reward_mode == "table":
        if low_reward_table is None:
            raise ValueError("low_reward_mode='table' requires low_reward_table")
        table = np.asarray(low_reward_table, dtype=np.float64)
        expected = (flat.num_states * goal_space.shape[0] * epoch_length, flat.num_actions)
        if table.shape != expected:
            raise ValueError(f"low_reward_table shape {table.shape} != {expected}")
    else:
        raise ValueError(f"unknown low_reward_mode {low_reward_mode!r}")

    bound = float(np.max(np.abs(table))) if table.size else 0.0
    return FeudalProblem(
        flat=flat,
        goal_space=goal_space,
        epoch_length=epoch_length,
        gamma_high=float(gamma_high),
        gamma_low=float(gamma_low),
        low_reward=table,
        low_reward_bound=max(bound, 1e-300),
        low_reward_mode=low_reward_mode,
        extrinsic_coeff=float(extrinsic_coeff),
    )


def _check_enumeration_size(problem: FeudalProblem, max_terms: int) -> None:
    S, A, T = problem.flat.num_states, problem.flat.num_actions, problem.epoch_length
    terms = (S ** max(T - 1, 0)) * (A**T)
    if terms > max_terms:
        raise InstanceTooLargeError(
            f"exact composition needs {terms} trajectory terms per entry "
            f"(cap {max_terms}); use the Monte Carlo estimators"
        )


def _policy_step_matrices(
    problem: FeudalProblem, low_policy: np.ndarray, goal: int
) -> list[np.ndarray]:
    """Per-clock one-step matrices K_d[s, s'] = sum_a pi(a|s,goal,d) P(s'|s,a)."""
    S = problem.flat.num_states
    T = problem.epoch_length
    P = problem.flat.transition
    mats = []
    for d in range(T):
        idx = [problem.low_index(s, goal, d) for s in range(S)]
        pi = low_policy[idx]  # (S, A)
        mats.append(np.einsum("sa,sat->st", pi, P))
    return mats


def compose_high_dynamics(
    problem: FeudalProblem,
    low_policy: np.ndarray,
    max_terms: int = ENUMERATION_CAP,
) -> np.ndarray:
    """Exact epoch-level dynamics experienced by the high level.

    For each (state, goal) the returned tensor gives the distribution of the
    base state reached after one full epoch of ``epoch_length`` low-level
    steps under ``low_policy`` with the goal held fixed.  The sum over all
    intermediate states and actions is evaluated as a product of per-clock
    one-step matrices (an exact law-of-total-probability factorization).

    Args:
        problem: The feudal problem.
        low_policy: Distribution table over actions, shape (S_low, A).
        max_terms: Refusal cap on the nominal per-entry enumeration size.

    Returns:
        Tensor of shape (S, num_goals, S) with rows summing to 1.

    Raises:
        InstanceTooLargeError: If the nominal enumeration exceeds the cap.
    """
    _check_enumeration_size(problem, max_terms)
    S, G = problem.flat.num_states, problem.num_goals
    out = np.zeros((S, G, S))
    for g in range(G):
        mats = _policy_step_matrices(problem, low_policy, g)
        prod = mats[0]
        for m in mats[1:]:
            prod = prod @ m
        out[:, g, :] = prod
    return out


def compose_high_reward(
    problem: FeudalProblem,
    low_policy: np.ndarray,
    max_terms: int = ENUMERATION_CAP,
) -> np.ndarray:
    """Exact expected epoch reward table for the high level, shape (S, G).

    Entry (s, g) is the expectation of the per-step discounted sum of
    extrinsic rewards over one epoch started at s with goal g fixed.
    """
    _check_enumeration_size(problem, max_terms)
    S, G = problem.flat.num_states, problem.num_goals
    T = problem.epoch_length
    r = problem.flat.reward
    out = np.zeros((S, G))
    for g in range(G):
        mats = _policy_step_matrices(problem, low_policy, g)
        occupancy = np.eye(S)  # row i = state distribution started from i
        for d in range(T):
            idx = [problem.low_index(s, g, d) for s in range(S)]
            pi = low_policy[idx]
            step_reward = np.sum(pi * r, axis=1)  # (S,)
            out[:, g] += (problem.gamma_high**d) * (occupancy @ step_reward)
            if d < T - 1:
                occupancy = occupancy @ mats[d]
    return out


def high_reward(
    problem: FeudalProblem,
    low_policy: np.ndarray,
    s_h: int,
    omega: int,
    max_terms: int = ENUMERATION_CAP,
) -> float:
    """Exact expected epoch reward for one (state, goal) pair."""
    return float(compose_high_reward(problem, low_policy, max_terms)[s_h, omega])


def compose_low_dynamics(
    problem: FeudalProblem, high_policy: np.ndarray
) -> np.ndarray:
    """Exact dynamics of the augmented low-level state.

    Off-epoch (clock != T-1) the goal is frozen and only the base state and
    clock move; at clock == T-1 the next goal is resampled from
    ``high_policy`` conditioned on the current base state, so entries with a
    goal switch off-epoch are exactly zero.

    Args:
        problem: The feudal problem.
        high_policy: Distribution table over goal indices, shape (S, G).

    Returns:
        Tensor of shape (S_low, A, S_low) with rows summing to 1.
    """
    S, G, T = problem.flat.num_states, problem.num_goals, problem.epoch_length
    A = problem.flat.num_actions
    n = problem.num_low_states
    P = problem.flat.transition
    out = np.zeros((n, A, n))
    for s in range(S):
        for g in range(G):
            for d in range(T):
                i = problem.low_index(s, g, d)
                d_next = next_decision_state(d, T)
                for a in range(A):
                    if d != T - 1:
                        for s2 in range(S):
                            p = P[s, a, s2]
                            if p:
                                out[i, a, problem.low_index(s2, g, d_next)] = p
                    else:
                        for g2 in range(G):
                            w = high_policy[s, g2]
                            if not w:
                                continue
                            for s2 in range(S):
                                p = P[s, a, s2]
                                if p:
                                    out[i, a, problem.low_index(s2, g2, d_next)] = p * w
    return out


def sample_epoch_batch(
    problem: FeudalProblem,
    low_policy: np.ndarray,
    s_h: int,
    goal: int,
    n: int,
    rng: RngStream,
) -> tuple[np.ndarray, np.ndarray]:
    """Simulate ``n`` independent epochs from (s_h, goal) under ``low_policy``.

    Returns:
        (end_states, reward_sums): the base state after ``epoch_length``
        steps and the per-step discounted sum of extrinsic rewards, per
        rollout.
    """
    S = problem.flat.num_states
    T = problem.epoch_length
    P_cum = np.cumsum(problem.flat.transition, axis=2)
    states = np.full(n, s_h, dtype=np.int64)
    sums = np.zeros(n)
    for d in range(T):
        idx = states * (problem.num_goals * T) + goal * T + d
        pi_rows = low_policy[idx]  # (n, A)
        pi_cum = np.cumsum(pi_rows, axis=1)
        u = rng.uniforms(n) * pi_cum[:, -1]
        actions = np.minimum(
            (pi_cum <= u[:, None]).sum(axis=1), problem.flat.num_actions - 1
        )
        sums += (problem.gamma_high**d) * problem.flat.reward[states, actions]
        rows = P_cum[states, actions]  # (n, S)
        u2 = rng.uniforms(n) * rows[:, -1]
        states = np.minimum((rows <= u2[:, None]).sum(axis=1), S - 1).astype(np.int64)
    return states, sums


def estimate_high_dynamics_mc(
    problem: FeudalProblem,
    low_policy: np.ndarray,
    s_h: int,
    goal: int,
    n: int,
    rng: RngStream,
) -> np.ndarray:
    """Monte Carlo estimate of one epoch-dynamics row, shape (S,)."""
    ends, _ = sample_epoch_batch(problem, low_policy, s_h, goal, n, rng)
    return np.bincount(ends, minlength=problem.flat.num_states) / float(n)


def estimate_high_reward_mc(
    problem: FeudalProblem,
    low_policy: np.ndarray,
    s_h: int,
    goal: int,
    n: int,
    rng: RngStream,
) -> tuple[float, float]:
    """Monte Carlo estimate of an epoch-reward entry: (mean, sample stdev)."""
    _, sums = sample_epoch_batch(problem, low_policy, s_h, goal, n, rng)
    return float(np.mean(sums)), float(np.std(sums, ddof=1))


def feudal_to_dict(problem: FeudalProblem) -> dict:
    doc = mdp_to_dict(problem.flat)
    doc["goal_space"] = problem.goal_space.tolist()
    doc["epoch_length"] = problem.epoch_length
    doc["gamma_high"] = problem.gamma_high
    doc["gamma_low"] = problem.gamma_low
    doc["low_reward_mode"] = problem.low_reward_mode
    if problem.low_reward_mode == "table":
        doc["low_reward"] = problem.low_reward.tolist()
    else:
        doc["extrinsic_coeff"] = problem.extrinsic_coeff
    return doc


def feudal_from_dict(doc: dict) -> FeudalProblem:
    flat = mdp_from_dict(doc)
    mode = doc.get("low_reward_mode", "indicator")
    return build_feudal_problem(
        flat,
        epoch_length=int(doc["epoch_length"]),
        gamma_low=float(doc["gamma_low"]),
        gamma_high=float(doc["gamma_high"]),
        goal_space=doc["goal_space"],
        low_reward_mode=mode,
        extrinsic_coeff=float(doc.get("extrinsic_coeff", 0.0)),
        low_reward_table=(
            np.asarray(doc["low_reward"], dtype=np.float64) if mode == "table" else None
        ),
    )


def save_feudal(problem: FeudalProblem, path: str | Path) -> None:
    Path(path).write_text(json.dumps(feudal_to_dict(problem)))


def load_feudal(path: str | Path) -> FeudalProblem:
    return feudal_from_dict(json.loads(Path(path).read_text()))
