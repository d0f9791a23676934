"""Game-theoretic certification of learned table pairs.

Treats the two levels as players best-responding to each other: a pair of
tables is certified as a Nash point when each table is the optimal Bellman
fixed point given the greedy policy of the other, and as a Stackelberg
point (high level leading) when its high-level value dominates that of
every enumerable alternative the follower would rationally react to.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass

import numpy as np

from .feudal import FeudalProblem
from .oracle import (
    MeanFieldContext,
    PolicyExtraction,
    high_bellman_apply,
    high_policy_evaluation,
    low_bellman_apply,
    solve_low_fixed_point,
)
from .policies import greedy_policy
from .qlearning import QTablePair

# Exhaustive pure-policy enumeration is only attempted up to this count.
MAX_PURE_POLICIES = 10**6

_SCOPE_NOTE = (
    "Stackelberg domination is checked against the greedy-realizable "
    "candidates generated by pure high-level policies; rational-reaction "
    "pairs outside that family are not enumerable."
)


@dataclass(frozen=True)
class ReactionCertificate:
    """Best-response residuals of a table pair and the membership flags."""

    residual_high: float
    residual_low: float
    tolerance: float
    in_high_set: bool
    in_low_set: bool


def reaction_membership(
    pair: QTablePair, problem: FeudalProblem, tol: float
) -> ReactionCertificate:
    """Check whether each table is a Bellman fixed point given its partner.

    The partner policy is the greedy extraction of the partner table.  A
    residual below ``tol`` flags membership in the corresponding
    rational-reaction set.
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    context = MeanFieldContext(problem, PolicyExtraction("greedy"))
    low_policy = greedy_policy(pair.low)
    high_policy = greedy_policy(pair.high)
    residual_high = float(
        np.max(np.abs(pair.high - high_bellman_apply(pair.high, context, low_policy)))
    )
    residual_low = float(
        np.max(np.abs(pair.low - low_bellman_apply(pair.low, context, high_policy)))
    )
    return ReactionCertificate(
        residual_high=residual_high,
        residual_low=residual_low,
        tolerance=tol,
        in_high_set=residual_high < tol,
        in_low_set=residual_low < tol,
    )


@dataclass(frozen=True)
class NashCertificate:
    is_nash: bool
    reaction: ReactionCertificate


def verify_nash(pair: QTablePair, problem: FeudalProblem, tol: float) -> NashCertificate:
    """A pair is Nash iff it sits in both rational-reaction sets."""
    reaction = reaction_membership(pair, problem, tol)
    return NashCertificate(
        is_nash=reaction.in_high_set and reaction.in_low_set, reaction=reaction
    )


@dataclass(frozen=True)
class StackelbergCandidate:
    """A follower-rational pair generated by one pure high-level policy.

    ``q_low`` is the low level's optimal response to ``pi_high``; ``q_high``
    is the leader's value under ``pi_high`` against that response (policy
    evaluation, no maximization).
    """

    pi_high: np.ndarray  # goal index per base state
    q_high: np.ndarray
    q_low: np.ndarray

    def low_set_residual(self, problem: FeudalProblem) -> float:
        """Bellman residual of q_low under this candidate's own policy."""
        context = MeanFieldContext(problem, PolicyExtraction("greedy"))
        policy = np.zeros((problem.flat.num_states, problem.num_goals))
        policy[np.arange(problem.flat.num_states), self.pi_high] = 1.0
        return float(
            np.max(np.abs(self.q_low - low_bellman_apply(self.q_low, context, policy)))
        )


def enumerate_pure_high_candidates(
    problem: FeudalProblem, tol: float = 1e-10, max_policies: int = MAX_PURE_POLICIES
) -> list[StackelbergCandidate]:
    """Build the follower-rational candidate for every pure high policy.

    Feasible only while num_goals**num_states stays below ``max_policies``;
    larger instances get Nash-only certification.
    """
    S, G = problem.flat.num_states, problem.num_goals
    count = G**S
    if count > max_policies:
        raise ValueError(
            f"{count} pure high-level policies exceed the enumeration cap "
            f"{max_policies}; only Nash certification is available"
        )
    context = MeanFieldContext(problem, PolicyExtraction("greedy"))
    out = []
    for assignment in itertools.product(range(G), repeat=S):
        pi_high = np.array(assignment, dtype=np.int64)
        policy = np.zeros((S, G))
        policy[np.arange(S), pi_high] = 1.0
        q_low = solve_low_fixed_point(context, policy, tol=tol)
        q_high = high_policy_evaluation(context, pi_high, greedy_policy(q_low), tol=tol)
        out.append(StackelbergCandidate(pi_high=pi_high, q_high=q_high, q_low=q_low))
    return out


@dataclass(frozen=True)
class StackelbergCertificate:
    is_stackelberg: bool
    pair_in_low_set: bool
    candidates_checked: int
    max_shortfall: float  # worst entrywise amount by which a candidate wins
    witness_policy: np.ndarray | None
    tolerance: float
    note: str = _SCOPE_NOTE


def verify_stackelberg(
    pair: QTablePair,
    problem: FeudalProblem,
    candidates: list[StackelbergCandidate],
    tol: float,
) -> StackelbergCertificate:
    """Check the pair's high-level value dominates every candidate's.

    Entrywise domination up to ``tol`` is required.  Every candidate must
    itself be follower-rational (checked against its own generating
    policy); a candidate that is not is a caller error.

    Raises:
        ValueError: If some candidate is not in the low-level reaction set.
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    reaction = reaction_membership(pair, problem, tol)
    is_stackelberg = reaction.in_low_set
    max_shortfall = 0.0
    witness = None
    for cand in candidates:
        residual = cand.low_set_residual(problem)
        if residual >= tol:
            raise ValueError(
                f"candidate for policy {cand.pi_high.tolist()} is not in the "
                f"low-level reaction set (residual {residual:g} >= {tol:g})"
            )
        shortfall = float(np.max(cand.q_high - pair.high))
        if shortfall > max_shortfall:
            max_shortfall = shortfall
            if shortfall > tol:
                witness = cand.pi_high
    if witness is not None:
        is_stackelberg = False
    return StackelbergCertificate(
        is_stackelberg=is_stackelberg,
        pair_in_low_set=reaction.in_low_set,
        candidates_checked=len(candidates),
        max_shortfall=max_shortfall,
        witness_policy=witness,
        tolerance=tol,
    )


def certificate_to_json(cert: object) -> str:
    """Serialize any certificate dataclass to a JSON report."""

    def default(value):
        if isinstance(value, np.ndarray):
            return value.tolist()
        if isinstance(value, (np.integer, np.floating, np.bool_)):
            return value.item()
        raise TypeError(f"cannot serialize {type(value)!r}")

    return json.dumps(asdict(cert), default=default, indent=2)
