"""Policy extraction: Boltzmann exploration, GLIE schedules, greedy limits."""

from __future__ import annotations

from dataclasses import dataclass, field
from math import log

import numpy as np


def boltzmann_probs(q_row: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax of ``q_row / temperature``, overflow-safe.

    Raises:
        ValueError: If temperature <= 0 or the row has non-finite entries.
    """
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(q_row, dtype=np.float64) / temperature
    if not np.all(np.isfinite(z)):
        raise ValueError("q_row must be finite")
    z = z - np.max(z)
    w = np.exp(z)
    return w / w.sum()


def greedy_action(q_row: np.ndarray) -> int:
    """Index of the maximum entry; ties broken by lowest index."""
    return int(np.argmax(q_row))


def boltzmann_policy(q_table: np.ndarray, temperature: float) -> np.ndarray:
    """Row-wise Boltzmann distribution table."""
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(q_table, dtype=np.float64) / temperature
    z = z - z.max(axis=1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=1, keepdims=True)


def greedy_policy(q_table: np.ndarray) -> np.ndarray:
    """Row-wise one-hot table at the lowest-index argmax.

    This is the scaling limit of the Boltzmann extraction and the policy
    family the convergence statements are about.
    """
    q = np.asarray(q_table)
    out = np.zeros_like(q, dtype=np.float64)
    out[np.arange(q.shape[0]), np.argmax(q, axis=1)] = 1.0
    return out


@dataclass(frozen=True)
class BoltzmannSchedule:
    """Temperature schedule tau(n) for Boltzmann exploration.

    ``kind="log"`` gives tau0 / ln(n + 2), the greedy-in-the-limit form with
    provably infinite exploration; ``kind="exp"`` gives tau0 * decay**n,
    which anneals much faster but is not provably GLIE and is meant for
    finite-run experiments.  A positive ``floor`` clamps the temperature
    from below (explicitly a non-GLIE debugging mode).
    """

    kind: str = "log"
    tau0: float = 1.0
    decay: float = 0.999
    floor: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("log", "exp"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.tau0 <= 0.0:
            raise ValueError("tau0 must be positive")
        if self.kind == "exp" and not (0.0 < self.decay < 1.0):
            raise ValueError("exp decay must lie in (0, 1)")
        if self.floor < 0.0:
            raise ValueError("floor must be >= 0")


def glie_temperature(schedule: BoltzmannSchedule, n: int) -> float:
    """Temperature at iteration ``n``; positive and non-increasing in n."""
    if n < 0:
        raise ValueError("iteration must be >= 0")
    if schedule.kind == "log":
        tau = schedule.tau0 / log(n + 2.0)
    else:
        tau = schedule.tau0 * schedule.decay**n
    return max(tau, schedule.floor, 1e-12)


@dataclass
class VisitCounter:
    """Monotone (state, action) visit counts for exploration diagnostics."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, num_states: int, num_actions: int) -> "VisitCounter":
        return cls(np.zeros((num_states, num_actions), dtype=np.int64))

    def record(self, state: int, action: int) -> None:
        self.counts[state, action] += 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def minimum(self) -> int:
        return int(self.counts.min())


def scaling_probe(
    q_tables: list[np.ndarray],
    temperature: float,
    scales: tuple[float, ...] = (1.0, 10.0, 100.0, 1000.0),
) -> dict[float, float]:
    """Numerical compact-convergence diagnostic for the Boltzmann extraction.

    For each scale c, measures the max-norm distance between the policy
    extracted from c * Q and the greedy (scaling-limit) policy, taking the
    worst case over the supplied grid of tables.  A sequence decreasing to 0
    is the expected signature; there is no runtime guarantee to enforce.
    """
    gaps: dict[float, float] = {}
    for c in scales:
        worst = 0.0
        for q in q_tables:
            scaled = boltzmann_policy(c * np.asarray(q), temperature)
            worst = max(worst, float(np.max(np.abs(scaled - greedy_policy(q)))))
        gaps[float(c)] = worst
    return gaps
