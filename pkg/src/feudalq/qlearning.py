"""Coupled feudal Q-learning on on-policy trajectories, plus a flat baseline.

Two tables are learned simultaneously from one stream of experience: the
low-level table is updated every step with its own (faster) step size, the
high-level table once per epoch with a slower step size, so the high level
sees an effectively converged low level.  The trainers are written against
plain Python lists in the hot loop; tables cross the API boundary as numpy
arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import exp, log
from typing import Sequence

import numpy as np

from .feudal import FeudalProblem
from .mdp import FlatMDP, RngStream
from .policies import BoltzmannSchedule, glie_temperature


class StabilityViolationError(RuntimeError):
    """An iterate escaped its analytic bound; the update scheme is broken."""


@dataclass
class QTablePair:
    """The pair of learned tables: high (S, G) and low (S_low, A)."""

    high: np.ndarray
    low: np.ndarray

    @classmethod
    def zeros(cls, problem: FeudalProblem, fill: float = 0.0) -> "QTablePair":
        high = np.full((problem.flat.num_states, problem.num_goals), fill, dtype=np.float64)
        low = np.full((problem.num_low_states, problem.flat.num_actions), fill, dtype=np.float64)
        return cls(high=high, low=low)

    def copy(self) -> "QTablePair":
        return QTablePair(high=self.high.copy(), low=self.low.copy())


@dataclass(frozen=True)
class StepSizeSchedule:
    """Polynomial two-timescale step sizes.

    alpha(n) = (n + offset)**(-fast_exponent) drives the low level and
    beta(n) = (n + offset)**(-slow_exponent) the high level.  Exponents in
    (0.5, 1] give divergent sums with summable squares, and
    slow_exponent > fast_exponent makes the ratio beta/alpha vanish, which
    is what separates the two timescales.
    """

    fast_exponent: float = 0.6
    slow_exponent: float = 0.9
    offset: int = 1

    def __post_init__(self) -> None:
        if not (0.5 < self.fast_exponent <= 1.0):
            raise ValueError("fast_exponent must lie in (0.5, 1]")
        if not (0.5 < self.slow_exponent <= 1.0):
            raise ValueError("slow_exponent must lie in (0.5, 1]")
        if not (self.slow_exponent > self.fast_exponent):
            raise ValueError("slow_exponent must exceed fast_exponent")
        if self.offset < 1:
            raise ValueError("offset must be >= 1")


def step_sizes(schedule: StepSizeSchedule, n: int) -> tuple[float, float]:
    """(alpha(n), beta(n)) for iteration n >= 0; both lie in (0, 1]."""
    base = float(n + schedule.offset)
    return base**-schedule.fast_exponent, base**-schedule.slow_exponent


@dataclass(frozen=True)
class TrainingConfig:
    """Run-length, seeding, schedules, and exploration options.

    ``start_state=None`` draws the reset state uniformly per episode.
    ``uniform_start_goal`` additionally draws each episode's first goal
    uniformly (an exploring-starts device for convergence studies; all
    within-episode goal re-selection stays on-policy Boltzmann).
    """

    episodes: int
    steps_per_episode: int
    seed: int
    schedule: StepSizeSchedule = StepSizeSchedule()
    policy_high: BoltzmannSchedule = BoltzmannSchedule()
    policy_low: BoltzmannSchedule = BoltzmannSchedule()
    initial_q: float = 0.0
    start_state: int | None = None
    uniform_start_goal: bool = False
    bound_check_every: int = 10_000

    def __post_init__(self) -> None:
        if self.episodes < 0 or self.steps_per_episode < 1:
            raise ValueError("episode and step counts must be positive")


@dataclass(frozen=True)
class EpisodeLog:
    """Per-episode record feeding the CSV output."""

    seed: int
    episode: int
    cum_reward: float
    low_steps: int
    high_decisions: int
    tau_high: float
    tau_low: float


def discounted_window_sum(window: Sequence[float], gamma: float) -> float:
    """sum_k gamma**k * window[k], accumulated in index order."""
    total = 0.0
    g = 1.0
    for r in window:
        total += g * r
        g *= gamma
    return total


def low_q_update(
    low: np.ndarray,
    s_l: int,
    a: int,
    r_l: float,
    s_l_next: int,
    alpha: float,
    gamma_low: float,
) -> np.ndarray:
    """One temporal-difference step on the low table (in place).

    Moves entry (s_l, a) toward r_l + gamma_low * max_a' Q(s_l_next, a') by
    a fraction alpha; every other entry is untouched.
    """
    target = r_l + gamma_low * float(low[s_l_next].max())
    low[s_l, a] += alpha * (target - low[s_l, a])
    return low


def high_q_update(
    high: np.ndarray,
    s_h: int,
    omega: int,
    reward_window: Sequence[float],
    s_h_next: int,
    beta: float,
    gamma_high: float,
    epoch_length: int,
) -> np.ndarray:
    """One epoch-level update on the high table (in place).

    The target is the discounted sum of the epoch's extrinsic rewards plus
    gamma_high**epoch_length times the best continuation at the epoch's end
    state.

    Raises:
        ValueError: If the window does not hold exactly ``epoch_length``
            rewards (partial epochs are never used as targets).
    """
    if len(reward_window) != epoch_length:
        raise ValueError(
            f"reward window has {len(reward_window)} entries, expected {epoch_length}"
        )
    target = discounted_window_sum(reward_window, gamma_high) + (
        gamma_high**epoch_length
    ) * float(high[s_h_next].max())
    high[s_h, omega] += beta * (target - high[s_h, omega])
    return high


def low_value_bound(problem: FeudalProblem) -> float:
    """Analytic bound on the optimal low-level values."""
    return problem.low_reward_bound / (1.0 - problem.gamma_low)


def high_value_bound(problem: FeudalProblem) -> float:
    """Analytic bound on the optimal high-level values (generous)."""
    return problem.epoch_length * problem.flat.reward_bound / (1.0 - problem.gamma_high)


def _sample_softmax(row: list[float], tau: float, u: float) -> int:
    m = max(row)
    inv = 1.0 / tau
    ws = [exp((q - m) * inv) for q in row]
    target = u * sum(ws)
    acc = 0.0
    for i, w in enumerate(ws):
        acc += w
        if target < acc:
            return i
    return len(ws) - 1


def _temperature(schedule: BoltzmannSchedule, n: int) -> float:
    if schedule.kind == "log":
        tau = schedule.tau0 / log(n + 2.0)
    else:
        tau = schedule.tau0 * schedule.decay**n
    floor = schedule.floor
    if tau < floor:
        tau = floor
    return tau if tau > 1e-12 else 1e-12


def _cum_rows(transition: np.ndarray) -> list[list[list[float]]]:
    return np.cumsum(transition, axis=2).tolist()


def train_feudal(
    problem: FeudalProblem,
    config: TrainingConfig,
    rng: RngStream | None = None,
    initial: QTablePair | None = None,
) -> tuple[QTablePair, list[EpisodeLog]]:
    """Run the coupled two-table learning loop.

    Every step the low level samples an action from the Boltzmann policy of
    its current table and applies its update.  At each epoch boundary the
    next epoch's goal is resampled from the Boltzmann policy of the high
    table conditioned on the boundary state (the same kernel the composed
    low-level dynamics use), and the high table is updated once with the
    buffered epoch reward window.  Update counters advance per update
    applied, separately per level.  Iterates are checked against their
    analytic bounds every ``bound_check_every`` low steps.

    Returns:
        The trained table pair and one log record per episode.
    """
    from bisect import bisect_right

    if rng is None:
        rng = RngStream(config.seed)
    S = problem.flat.num_states
    A = problem.flat.num_actions
    G = problem.num_goals
    T = problem.epoch_length
    gamma_h = problem.gamma_high
    gamma_l = problem.gamma_low
    gTh = gamma_h**T

    pair = initial.copy() if initial is not None else QTablePair.zeros(problem, config.initial_q)
    q_high: list[list[float]] = pair.high.tolist()
    q_low: list[list[float]] = pair.low.tolist()
    p_cum = _cum_rows(problem.flat.transition)
    rewards: list[list[float]] = problem.flat.reward.tolist()
    low_rewards: list[list[float]] = problem.low_reward.tolist()

    bound_low = low_value_bound(problem) + float(np.max(np.abs(pair.low)))
    bound_high = high_value_bound(problem) + float(np.max(np.abs(pair.high)))

    a_exp = -config.schedule.fast_exponent
    b_exp = -config.schedule.slow_exponent
    offset = config.schedule.offset
    sched_h = config.policy_high
    sched_l = config.policy_low
    check_every = config.bound_check_every

    n_low = 0
    n_high = 0
    global_step = 0
    logs: list[EpisodeLog] = []

    for episode in range(config.episodes):
        s = config.start_state if config.start_state is not None else rng.randint(S)
        d = 0
        tau_h = _temperature(sched_h, n_high)
        if config.uniform_start_goal:
            g = rng.randint(G)
        else:
            g = _sample_softmax(q_high[s], tau_h, rng.uniform())
        s_h_start = s
        window: list[float] = []
        epochs_started = 1
        cum_reward = 0.0
        tau_l = _temperature(sched_l, n_low)

        for k in range(config.steps_per_episode):
            li = (s * G + g) * T + d
            tau_l = _temperature(sched_l, n_low)
            a = _sample_softmax(q_low[li], tau_l, rng.uniform())

            cum = p_cum[s][a]
            s2 = bisect_right(cum, rng.uniform() * cum[-1])
            if s2 >= S:
                s2 = S - 1
            r = rewards[s][a]
            cum_reward += r
            window.append(r)
            r_l = low_rewards[li][a]

            if d == T - 1:
                # The resampling kernel of the augmented dynamics conditions
                # on the boundary state, with the policy in force during the
                # step (pre-update table).
                tau_h = _temperature(sched_h, n_high)
                g2 = _sample_softmax(q_high[s], tau_h, rng.uniform())

                target = 0.0
                gpow = 1.0
                for rr in window:
                    target += gpow * rr
                    gpow *= gamma_h
                target += gTh * max(q_high[s2])
                row = q_high[s_h_start]
                beta = float(n_high + offset) ** b_exp
                row[g] += beta * (target - row[g])
                n_high += 1

                next_li = (s2 * G + g2) * T
                window = []
                s_h_start = s2
                if k + 1 < config.steps_per_episode:
                    epochs_started += 1
            else:
                g2 = g
                next_li = (s2 * G + g) * T + d + 1

            alpha = float(n_low + offset) ** a_exp
            row = q_low[li]
            target = r_l + gamma_l * max(q_low[next_li])
            row[a] += alpha * (target - row[a])
            n_low += 1

            s = s2
            g = g2
            d = d + 1 if d != T - 1 else 0
            global_step += 1
            if global_step % check_every == 0:
                _check_bounds(q_low, q_high, bound_low, bound_high, global_step)

        logs.append(
            EpisodeLog(
                seed=config.seed,
                episode=episode,
                cum_reward=cum_reward,
                low_steps=config.steps_per_episode,
                high_decisions=epochs_started,
                tau_high=tau_h,
                tau_low=tau_l,
            )
        )

    return QTablePair(high=np.array(q_high), low=np.array(q_low)), logs


def _check_bounds(
    q_low: list[list[float]],
    q_high: list[list[float]],
    bound_low: float,
    bound_high: float,
    step: int,
) -> None:
    worst_low = max(max(abs(v) for v in row) for row in q_low)
    worst_high = max(max(abs(v) for v in row) for row in q_high)
    if worst_low > bound_low + 1e-9:
        raise StabilityViolationError(
            f"low table reached {worst_low:g} > bound {bound_low:g} at step {step}"
        )
    if worst_high > bound_high + 1e-9:
        raise StabilityViolationError(
            f"high table reached {worst_high:g} > bound {bound_high:g} at step {step}"
        )


def train_flat_watkins(
    mdp: FlatMDP,
    config: TrainingConfig,
    rng: RngStream | None = None,
    initial: np.ndarray | None = None,
) -> tuple[np.ndarray, list[EpisodeLog]]:
    """Single-table baseline: Boltzmann exploration, fast step sizes."""
    from bisect import bisect_right

    if rng is None:
        rng = RngStream(config.seed)
    S, A = mdp.num_states, mdp.num_actions
    gamma = mdp.discount
    q: list[list[float]] = (
        np.asarray(initial, dtype=np.float64).tolist()
        if initial is not None
        else np.full((S, A), config.initial_q).tolist()
    )
    p_cum = _cum_rows(mdp.transition)
    rewards: list[list[float]] = mdp.reward.tolist()

    bound = mdp.reward_bound / (1.0 - gamma) + (
        float(np.max(np.abs(initial))) if initial is not None else abs(config.initial_q)
    )
    a_exp = -config.schedule.fast_exponent
    offset = config.schedule.offset
    sched = config.policy_low
    check_every = config.bound_check_every

    n = 0
    logs: list[EpisodeLog] = []
    for episode in range(config.episodes):
        s = config.start_state if config.start_state is not None else rng.randint(S)
        cum_reward = 0.0
        tau = _temperature(sched, n)
        for _ in range(config.steps_per_episode):
            tau = _temperature(sched, n)
            a = _sample_softmax(q[s], tau, rng.uniform())
            cum = p_cum[s][a]
            s2 = bisect_right(cum, rng.uniform() * cum[-1])
            if s2 >= S:
                s2 = S - 1
            r = rewards[s][a]
            cum_reward += r
            alpha = float(n + offset) ** a_exp
            row = q[s]
            target = r + gamma * max(q[s2])
            row[a] += alpha * (target - row[a])
            n += 1
            s = s2
            if n % check_every == 0:
                worst = max(max(abs(v) for v in rr) for rr in q)
                if worst > bound + 1e-9:
                    raise StabilityViolationError(
                        f"flat table reached {worst:g} > bound {bound:g} at step {n}"
                    )
        logs.append(
            EpisodeLog(
                seed=config.seed,
                episode=episode,
                cum_reward=cum_reward,
                low_steps=config.steps_per_episode,
                high_decisions=0,
                tau_high=0.0,
                tau_low=tau,
            )
        )
    return np.array(q), logs
