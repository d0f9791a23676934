"""Finite MDP representation, validation, and seeded trajectory sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

ROW_SUM_TOL = 1e-12


class RngStream:
    """Deterministic uniform-draw stream owned by exactly one run.

    All randomness in the package flows through instances of this class so
    that a run is a pure function of its seed.  Draws are served from an
    internal buffer refilled in fixed-size chunks, which keeps single-draw
    cost low in tight training loops without changing the draw sequence.
    """

    def __init__(self, seed: int, chunk: int = 4096) -> None:
        self.seed = int(seed)
        self.draws = 0
        self._chunk = int(chunk)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))
        self._buf = np.empty(0, dtype=np.float64)
        self._pos = 0

    def uniform(self) -> float:
        """Next uniform draw in [0, 1)."""
        if self._pos >= self._buf.shape[0]:
            self._buf = self._gen.random(self._chunk)
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        self.draws += 1
        return float(u)

    def uniforms(self, n: int) -> np.ndarray:
        """Next ``n`` uniform draws in [0, 1) as an array."""
        n = int(n)
        out = np.empty(n, dtype=np.float64)
        got = 0
        while got < n:
            if self._pos >= self._buf.shape[0]:
                self._buf = self._gen.random(max(self._chunk, n - got))
                self._pos = 0
            take = min(n - got, self._buf.shape[0] - self._pos)
            out[got : got + take] = self._buf[self._pos : self._pos + take]
            self._pos += take
            got += take
        self.draws += n
        return out

    def randint(self, n: int) -> int:
        """Uniform integer in {0, ..., n-1}, consuming one uniform draw."""
        return min(int(self.uniform() * n), n - 1)

    def child(self, index: int) -> "RngStream":
        """Independent stream derived deterministically from (seed, index).

        Used for parallel batches that must merge deterministically.
        """
        ss = np.random.SeedSequence(entropy=[self.seed, int(index)])
        return RngStream(int(ss.generate_state(1, dtype=np.uint64)[0]))


@dataclass(frozen=True)
class FlatMDP:
    """Finite MDP with dense dynamics.

    Attributes:
        num_states: Size of the state space.
        num_actions: Size of the action space.
        transition: Row-stochastic tensor, shape (S, A, S).
        reward: Deterministic reward table, shape (S, A).
        discount: Discount factor in (0, 1).
        reward_bound: Bound on |reward|; defaults to the observed maximum.

    Instances are immutable after construction (arrays are frozen) and safe
    to share read-only across threads.
    """

    num_states: int
    num_actions: int
    transition: np.ndarray
    reward: np.ndarray
    discount: float
    reward_bound: float = field(default=-1.0)

    def __post_init__(self) -> None:
        t = np.ascontiguousarray(np.asarray(self.transition, dtype=np.float64))
        r = np.ascontiguousarray(np.asarray(self.reward, dtype=np.float64))
        object.__setattr__(self, "transition", t)
        object.__setattr__(self, "reward", r)
        if self.reward_bound < 0.0:
            bound = float(np.max(np.abs(r))) if r.size else 0.0
            object.__setattr__(self, "reward_bound", bound)
        t.flags.writeable = False
        r.flags.writeable = False


class Transition(NamedTuple):
    state: int
    action: int
    reward: float
    next_state: int


@dataclass
class ValidationReport:
    """Accumulated invariant violations; empty means the MDP is valid."""

    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems

    def __bool__(self) -> bool:
        return self.ok


def validate_flat_mdp(mdp: FlatMDP) -> ValidationReport:
    """Check stochasticity of every transition row and boundedness of rewards.

    Returns a report listing each violated invariant; the report is empty iff
    all rows are stochastic within ``ROW_SUM_TOL``, all probabilities lie in
    [0, 1], and all rewards are finite and within the stored bound.
    """
    report = ValidationReport()
    S, A = mdp.num_states, mdp.num_actions
    if S < 1:
        report.problems.append(f"num_states must be >= 1, got {S}")
    if A < 1:
        report.problems.append(f"num_actions must be >= 1, got {A}")
    if mdp.transition.shape != (S, A, S):
        report.problems.append(
            f"transition shape {mdp.transition.shape} != {(S, A, S)}"
        )
        return report
    if mdp.reward.shape != (S, A):
        report.problems.append(f"reward shape {mdp.reward.shape} != {(S, A)}")
        return report
    if not (0.0 < mdp.discount < 1.0):
        report.problems.append(f"discount {mdp.discount} not in (0, 1)")

    sums = mdp.transition.sum(axis=2)
    for s in range(S):
        for a in range(A):
            row = mdp.transition[s, a]
            if np.any(row < 0.0) or np.any(row > 1.0):
                report.problems.append(
                    f"transition row (s={s}, a={a}) has entries outside [0, 1]"
                )
            deficit = 1.0 - sums[s, a]
            if abs(deficit) > ROW_SUM_TOL:
                report.problems.append(
                    f"transition row (s={s}, a={a}) sums to {sums[s, a]:.15g} "
                    f"(deficit {deficit:.15g})"
                )

    if not np.all(np.isfinite(mdp.reward)):
        bad = np.argwhere(~np.isfinite(mdp.reward))
        for s, a in bad:
            report.problems.append(f"reward (s={s}, a={a}) is not finite")
    else:
        over = np.abs(mdp.reward) > mdp.reward_bound + 1e-12
        for s, a in np.argwhere(over):
            report.problems.append(
                f"reward (s={s}, a={a}) = {mdp.reward[s, a]:g} exceeds bound "
                f"{mdp.reward_bound:g}"
            )
    return report


def sample_transition(mdp: FlatMDP, s: int, a: int, rng: RngStream) -> Transition:
    """Sample one transition from state ``s`` under action ``a``.

    The next state is drawn by inverse CDF over the transition row in
    ascending state-index order, so duplicate cumulative values (zero-mass
    states) are skipped deterministically.

    Raises:
        IndexError: If ``s`` or ``a`` is out of range.
    """
    if not (0 <= s < mdp.num_states):
        raise IndexError(f"state id {s} out of range [0, {mdp.num_states})")
    if not (0 <= a < mdp.num_actions):
        raise IndexError(f"action id {a} out of range [0, {mdp.num_actions})")
    row = mdp.transition[s, a]
    cum = np.cumsum(row)
    u = rng.uniform() * cum[-1]
    nxt = int(np.searchsorted(cum, u, side="right"))
    nxt = min(nxt, mdp.num_states - 1)
    return Transition(s, a, float(mdp.reward[s, a]), nxt)


def renormalize_rows(mdp: FlatMDP) -> FlatMDP:
    """Return a copy with each transition row rescaled to sum exactly to 1.

    Renormalization never happens implicitly on load; callers opt in.
    """
    sums = mdp.transition.sum(axis=2, keepdims=True)
    if np.any(sums <= 0.0):
        raise ValueError("cannot renormalize a row with non-positive total mass")
    return FlatMDP(
        num_states=mdp.num_states,
        num_actions=mdp.num_actions,
        transition=mdp.transition / sums,
        reward=mdp.reward,
        discount=mdp.discount,
        reward_bound=mdp.reward_bound,
    )


def mdp_to_dict(mdp: FlatMDP) -> dict:
    return {
        "num_states": mdp.num_states,
        "num_actions": mdp.num_actions,
        "transition": mdp.transition.tolist(),
        "reward": mdp.reward.tolist(),
        "discount": mdp.discount,
        "reward_bound": mdp.reward_bound,
    }


def mdp_from_dict(doc: dict) -> FlatMDP:
    return FlatMDP(
        num_states=int(doc["num_states"]),
        num_actions=int(doc["num_actions"]),
        transition=np.asarray(doc["transition"], dtype=np.float64),
        reward=np.asarray(doc["reward"], dtype=np.float64),
        discount=float(doc["discount"]),
        reward_bound=float(doc.get("reward_bound", -1.0)),
    )


def save_mdp(mdp: FlatMDP, path: str | Path) -> None:
    Path(path).write_text(json.dumps(mdp_to_dict(mdp)))


def load_mdp(path: str | Path) -> FlatMDP:
    return mdp_from_dict(json.loads(Path(path).read_text()))
