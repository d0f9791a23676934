"""Exact reference computations for the coupled system.

Contains the optimal Bellman operators of both levels under frozen partner
policies, fixed-point solvers, an alternating best-response solver for the
coupled pair, forward-Euler integration of the two-timescale mean-field
ODEs, Monte Carlo checks that the sampling noise is centred with bounded
second moment, and numerical probes of the Lipschitz and scaled-field
properties that underpin stability.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .feudal import FeudalProblem, compose_high_dynamics, compose_high_reward, compose_low_dynamics, sample_epoch_batch
from .mdp import FlatMDP, RngStream
from .policies import boltzmann_policy, greedy_policy

MAX_FIXED_POINT_ITERATIONS = 10**6


class FixedPointDivergenceError(RuntimeError):
    """Fixed-point iteration failed to reach tolerance within the cap."""


class PolicyCycleError(RuntimeError):
    """Best-response iteration revisited a policy pair without converging."""

    def __init__(self, message: str, cycle: list) -> None:
        super().__init__(message)
        self.cycle = cycle


class OdeInstabilityError(RuntimeError):
    """An integrated trajectory escaped ten times its analytic bound."""


@dataclass(frozen=True)
class PolicyExtraction:
    """Map from Q-tables to stochastic policies.

    ``greedy`` is the scaling/annealing limit used by the coupled solver;
    ``boltzmann`` (fixed temperature) is the smooth on-policy family.
    """

    kind: str = "greedy"
    temperature: float = 1.0

    def extract(self, q_table: np.ndarray) -> np.ndarray:
        if self.kind == "greedy":
            return greedy_policy(q_table)
        if self.kind == "boltzmann":
            return boltzmann_policy(q_table, self.temperature)
        raise ValueError(f"unknown extraction kind {self.kind!r}")


class MeanFieldContext:
    """Composition cache around a feudal problem for one extraction rule.

    Compositions of the level dynamics are memoized by the policy table
    bytes, so repeated evaluations under a greedy extraction (piecewise
    constant in the tables) cost one composition per distinct policy.
    The ``high_policy`` / ``low_policy`` slots hold the current policies for
    the plain Bellman-operator entry points.
    """

    def __init__(
        self,
        problem: FeudalProblem,
        extraction: PolicyExtraction = PolicyExtraction("greedy"),
    ) -> None:
        self.problem = problem
        self.extraction = extraction
        self.high_policy: np.ndarray | None = None
        self.low_policy: np.ndarray | None = None
        self._low_dyn: dict[bytes, np.ndarray] = {}
        self._high_terms: dict[bytes, tuple[np.ndarray, np.ndarray]] = {}

    def set_policies(
        self,
        high_policy: np.ndarray | None = None,
        low_policy: np.ndarray | None = None,
    ) -> None:
        if high_policy is not None:
            self.high_policy = np.asarray(high_policy, dtype=np.float64)
        if low_policy is not None:
            self.low_policy = np.asarray(low_policy, dtype=np.float64)

    def set_tables(self, q_high: np.ndarray | None = None, q_low: np.ndarray | None = None) -> None:
        if q_high is not None:
            self.high_policy = self.extraction.extract(q_high)
        if q_low is not None:
            self.low_policy = self.extraction.extract(q_low)

    def low_dynamics_for(self, high_policy: np.ndarray) -> np.ndarray:
        key = high_policy.tobytes()
        hit = self._low_dyn.get(key)
        if hit is None:
            hit = compose_low_dynamics(self.problem, high_policy)
            self._low_dyn[key] = hit
        return hit

    def high_terms_for(self, low_policy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        key = low_policy.tobytes()
        hit = self._high_terms.get(key)
        if hit is None:
            hit = (
                compose_high_dynamics(self.problem, low_policy),
                compose_high_reward(self.problem, low_policy),
            )
            self._high_terms[key] = hit
        return hit


def low_bellman_apply(
    q_low: np.ndarray, context: MeanFieldContext, high_policy: np.ndarray | None = None
) -> np.ndarray:
    """Optimal low-level Bellman operator under the context's high policy."""
    if high_policy is None:
        high_policy = context.high_policy
    if high_policy is None:
        raise ValueError("context has no high policy set")
    p_low = context.low_dynamics_for(high_policy)
    vmax = q_low.max(axis=1)
    return context.problem.low_reward + context.problem.gamma_low * (p_low @ vmax)


def high_bellman_apply(
    q_high: np.ndarray, context: MeanFieldContext, low_policy: np.ndarray | None = None
) -> np.ndarray:
    """Optimal high-level Bellman operator under the context's low policy.

    The continuation is discounted by gamma_high**epoch_length: one
    high-level step spans a whole epoch of low-level steps.
    """
    if low_policy is None:
        low_policy = context.low_policy
    if low_policy is None:
        raise ValueError("context has no low policy set")
    p_high, r_high = context.high_terms_for(low_policy)
    vmax = q_high.max(axis=1)
    gT = context.problem.gamma_high**context.problem.epoch_length
    return r_high + gT * (p_high @ vmax)


def solve_fixed_point(
    operator: Callable[[np.ndarray], np.ndarray],
    modulus: float,
    init: np.ndarray,
    tol: float,
    max_iterations: int = MAX_FIXED_POINT_ITERATIONS,
) -> np.ndarray:
    """Iterate a max-norm contraction to its fixed point.

    Stops once the step size guarantees ``|Q - operator(Q)| < tol`` via the
    contraction bound, so the returned table's Bellman residual is below
    ``tol``.

    Raises:
        FixedPointDivergenceError: If the iteration cap is exceeded.
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    stop = tol * (1.0 - modulus) / modulus if modulus > 0.0 else np.inf
    q = np.asarray(init, dtype=np.float64)
    for _ in range(max_iterations):
        nxt = operator(q)
        if np.max(np.abs(nxt - q)) < stop:
            return nxt
        q = nxt
    raise FixedPointDivergenceError(
        f"no fixed point within {max_iterations} iterations (tol {tol})"
    )


def solve_low_fixed_point(
    context: MeanFieldContext,
    high_policy: np.ndarray,
    init: np.ndarray | None = None,
    tol: float = 1e-10,
) -> np.ndarray:
    problem = context.problem
    if init is None:
        init = np.zeros((problem.num_low_states, problem.flat.num_actions))
    return solve_fixed_point(
        lambda q: low_bellman_apply(q, context, high_policy),
        problem.gamma_low,
        init,
        tol,
    )


def solve_high_fixed_point(
    context: MeanFieldContext,
    low_policy: np.ndarray,
    init: np.ndarray | None = None,
    tol: float = 1e-10,
) -> np.ndarray:
    problem = context.problem
    if init is None:
        init = np.zeros((problem.flat.num_states, problem.num_goals))
    return solve_fixed_point(
        lambda q: high_bellman_apply(q, context, low_policy),
        problem.gamma_high**problem.epoch_length,
        init,
        tol,
    )


def _one_hot(indices: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((indices.shape[0], width))
    out[np.arange(indices.shape[0]), indices] = 1.0
    return out


def _stable_argmax(q: np.ndarray, previous: np.ndarray, margin: float) -> np.ndarray:
    """Row argmax that keeps the previous choice when it ties the maximum.

    Structurally equivalent actions (e.g. two goals inducing identical low
    behaviour) leave fixed-point values equal up to solver noise; without
    hysteresis the argmax flaps between them and best response appears to
    cycle.  Any tied choice satisfies the greedy condition, so keeping the
    incumbent is sound.
    """
    best = q.max(axis=1)
    rows = np.arange(q.shape[0])
    keep = q[rows, previous] >= best - margin
    return np.where(keep, previous, np.argmax(q, axis=1))


def tie_mixture_policy(q_table: np.ndarray, margin: float) -> np.ndarray:
    """Uniform distribution over the maximizers of each row (within margin).

    This is the pointwise limit of the Boltzmann extraction as the
    temperature vanishes: exactly tied entries share the mass equally
    instead of collapsing to the lowest index.
    """
    q = np.asarray(q_table)
    mask = q >= q.max(axis=1, keepdims=True) - margin
    return mask / mask.sum(axis=1, keepdims=True)


@dataclass
class CoupledSolution:
    """Jointly optimal tables with the limit policies they induce.

    ``pi_high`` / ``pi_low`` are the lowest-index maximizers;
    ``policy_high`` / ``policy_low`` are the distribution tables actually
    used by the solver (one-hot unless a tie margin was given).
    """

    q_high: np.ndarray
    q_low: np.ndarray
    pi_high: np.ndarray  # goal index per base state
    pi_low: np.ndarray  # action per augmented low state
    policy_high: np.ndarray
    policy_low: np.ndarray
    residual_high: float
    residual_low: float
    sweeps: int


def solve_coupled(
    problem: FeudalProblem,
    tol: float = 1e-9,
    max_sweeps: int = 10_000,
    tie_margin: float | None = None,
) -> CoupledSolution:
    """Alternating best response on the coupled Bellman system.

    Each sweep freezes the limit low policy, solves the high level to its
    fixed point, re-extracts the limit high policy, and solves the low
    level.  Convergence is both policies surviving a full sweep unchanged;
    a revisited policy pair without convergence is reported as a cycle
    rather than iterated forever.

    With ``tie_margin=None`` the extraction is the deterministic greedy
    rule (lowest index, with hysteresis so that exactly tied alternatives
    do not flap on solver noise).  A positive ``tie_margin`` instead
    spreads each choice uniformly over maximizers within the margin, which
    is the vanishing-temperature limit of Boltzmann exploration and the
    correct comparison target for annealed learners on instances with
    structurally tied alternatives.

    Raises:
        PolicyCycleError: If best response cycles (no fixed point in the
            extraction family).
    """
    context = MeanFieldContext(problem, PolicyExtraction("greedy"))
    S, G = problem.flat.num_states, problem.num_goals
    n_low, A = problem.num_low_states, problem.flat.num_actions
    q_high = np.zeros((S, G))
    q_low = np.zeros((n_low, A))
    pi_low = np.argmax(q_low, axis=1)
    pi_high = np.argmax(q_high, axis=1)
    low_policy = _one_hot(pi_low, A)
    high_policy = _one_hot(pi_high, G)
    seen: dict[bytes, int] = {}
    history: list[tuple[np.ndarray, np.ndarray]] = []

    hysteresis = 100.0 * tol
    for sweep in range(1, max_sweeps + 1):
        q_high = solve_high_fixed_point(context, low_policy, init=q_high, tol=tol)
        if tie_margin is None:
            new_pi_high = _stable_argmax(q_high, pi_high, hysteresis)
            new_high_policy = _one_hot(new_pi_high, G)
        else:
            new_high_policy = tie_mixture_policy(q_high, tie_margin)
        q_low = solve_low_fixed_point(context, new_high_policy, init=q_low, tol=tol)
        if tie_margin is None:
            new_pi_low = _stable_argmax(q_low, pi_low, hysteresis)
            new_low_policy = _one_hot(new_pi_low, A)
        else:
            new_pi_low = np.argmax(q_low, axis=1)
            new_low_policy = tie_mixture_policy(q_low, tie_margin)
            new_pi_high = np.argmax(q_high, axis=1)

        if np.array_equal(new_high_policy, high_policy) and np.array_equal(
            new_low_policy, low_policy
        ):
            residual_high = float(
                np.max(np.abs(q_high - high_bellman_apply(q_high, context, low_policy)))
            )
            residual_low = float(
                np.max(np.abs(q_low - low_bellman_apply(q_low, context, high_policy)))
            )
            return CoupledSolution(
                q_high=q_high,
                q_low=q_low,
                pi_high=new_pi_high,
                pi_low=new_pi_low,
                policy_high=new_high_policy,
                policy_low=new_low_policy,
                residual_high=residual_high,
                residual_low=residual_low,
                sweeps=sweep,
            )

        key = new_high_policy.tobytes() + new_low_policy.tobytes()
        if key in seen:
            cycle = history[seen[key] :]
            raise PolicyCycleError(
                f"no pure fixed point found: policy pair revisited after "
                f"{sweep} sweeps (cycle length {len(cycle)})",
                cycle=[(h.copy(), l.copy()) for h, l in cycle],
            )
        seen[key] = len(history)
        history.append((new_pi_high, new_pi_low))
        pi_high, pi_low = new_pi_high, new_pi_low
        high_policy, low_policy = new_high_policy, new_low_policy

    raise FixedPointDivergenceError(f"best response did not settle in {max_sweeps} sweeps")


def low_mean_field(
    q_low: np.ndarray, q_high: np.ndarray, context: MeanFieldContext
) -> np.ndarray:
    """Expected update direction of the low table (its Bellman error)."""
    high_policy = context.extraction.extract(q_high)
    return low_bellman_apply(q_low, context, high_policy) - q_low


def high_mean_field(
    q_low: np.ndarray, q_high: np.ndarray, context: MeanFieldContext
) -> np.ndarray:
    """Expected update direction of the high table (its Bellman error)."""
    low_policy = context.extraction.extract(q_low)
    return high_bellman_apply(q_high, context, low_policy) - q_high


@dataclass(frozen=True)
class OdeConfig:
    """Forward-Euler settings for the singularly perturbed pair."""

    step: float = 0.01
    horizon: float = 200.0
    epsilon: float = 0.01
    record_every: int = 100

    def __post_init__(self) -> None:
        if self.step <= 0.0 or self.horizon <= self.step:
            raise ValueError("need 0 < step < horizon")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")


def integrate_mean_field_odes(
    context: MeanFieldContext,
    x0: np.ndarray,
    y0: np.ndarray,
    ode: OdeConfig,
    freeze_slow: bool = False,
) -> list[tuple[float, np.ndarray, np.ndarray]]:
    """Euler-integrate the fast/slow pair dx = h/eps, dy = g.

    Policies are re-extracted from the current tables at every step (cached
    by policy fingerprint).  With ``freeze_slow`` the slow table is held
    fixed, which integrates the fast dynamics alone.

    Returns:
        Samples ``(t, x, y)`` every ``record_every`` steps, including the
        initial and final points.

    Raises:
        OdeInstabilityError: If either table exceeds ten times its analytic
            bound (plus the initial norm).
    """
    from .qlearning import high_value_bound, low_value_bound

    problem = context.problem
    x = np.array(x0, dtype=np.float64)
    y = np.array(y0, dtype=np.float64)
    guard_low = 10.0 * (low_value_bound(problem) + np.max(np.abs(x)) + 1.0)
    guard_high = 10.0 * (high_value_bound(problem) + np.max(np.abs(y)) + 1.0)
    n_steps = int(round(ode.horizon / ode.step))
    out = [(0.0, x.copy(), y.copy())]
    for i in range(1, n_steps + 1):
        hx = low_mean_field(x, y, context)
        gy = None if freeze_slow else high_mean_field(x, y, context)
        x = x + (ode.step / ode.epsilon) * hx
        if gy is not None:
            y = y + ode.step * gy
        if np.max(np.abs(x)) > guard_low or np.max(np.abs(y)) > guard_high:
            raise OdeInstabilityError(f"trajectory escaped its bound at step {i}")
        if i % ode.record_every == 0 or i == n_steps:
            out.append((i * ode.step, x.copy(), y.copy()))
    return out


@dataclass(frozen=True)
class MartingaleEstimate:
    mean: float
    stderr: float
    second_moment: float
    samples: int


def martingale_mean_estimate(
    context: MeanFieldContext,
    q_low: np.ndarray,
    q_high: np.ndarray,
    state: int,
    action_or_goal: int,
    level: str,
    samples: int,
    rng: RngStream,
) -> MartingaleEstimate:
    """Monte Carlo estimate of the sampling-noise term at one coordinate.

    For the low level the noise is the sampled best continuation minus its
    exact expectation under the composed augmented dynamics; for the high
    level it additionally includes the sampled epoch reward sum minus the
    exact epoch reward.  Both are zero-mean by construction; the estimate
    quantifies how visibly so at finite sample size.

    Args:
        state: A low-state index (level="low") or base state (level="high").
        action_or_goal: Action index (low) or goal index (high).
        samples: Number of draws (>= 100).
    """
    if samples < 100:
        raise ValueError("need at least 100 samples")
    problem = context.problem
    if level == "low":
        high_policy = context.extraction.extract(q_high)
        p_low = context.low_dynamics_for(high_policy)
        row = p_low[state, action_or_goal]
        vmax = q_low.max(axis=1)
        expected = float(row @ vmax)
        cum = np.cumsum(row)
        u = rng.uniforms(samples) * cum[-1]
        draws = np.minimum((cum <= u[:, None]).sum(axis=1), row.shape[0] - 1)
        values = problem.gamma_low * (vmax[draws] - expected)
    elif level == "high":
        low_policy = context.extraction.extract(q_low)
        p_high, r_high = context.high_terms_for(low_policy)
        ends, sums = sample_epoch_batch(
            problem, low_policy, state, action_or_goal, samples, rng
        )
        vmax = q_high.max(axis=1)
        gT = problem.gamma_high**problem.epoch_length
        expected = float(p_high[state, action_or_goal] @ vmax)
        values = gT * (vmax[ends] - expected) + (sums - r_high[state, action_or_goal])
    else:
        raise ValueError(f"level must be 'low' or 'high', got {level!r}")

    mean = float(np.mean(values))
    stderr = float(np.std(values, ddof=1) / np.sqrt(samples))
    return MartingaleEstimate(
        mean=mean,
        stderr=stderr,
        second_moment=float(np.mean(values**2)),
        samples=samples,
    )


def noise_second_moment_ratio(
    estimate: MartingaleEstimate, q_low: np.ndarray, q_high: np.ndarray
) -> float:
    """Second moment over (1 + |x|_2^2 + |y|_2^2); its max over coordinates
    is an empirical fit of the noise-growth constant."""
    scale = 1.0 + float(np.sum(q_low**2)) + float(np.sum(q_high**2))
    return estimate.second_moment / scale


def scaled_field_gap(
    context: MeanFieldContext,
    c: float,
    grid: list[tuple[np.ndarray, np.ndarray]],
    level: str = "low",
    include_reward: bool = True,
) -> float:
    """Sup over the grid of the distance between the c-scaled field and its
    scaling limit.

    The c-scaled field evaluates the policy on the c-scaled partner table
    and divides the reward term by c; the limit field drops the reward and
    uses the greedy (scaling-limit) policy.  ``include_reward=False``
    isolates the policy-convergence contribution.
    """
    if c < 1.0:
        raise ValueError("scale must be >= 1")
    problem = context.problem
    worst = 0.0
    for q_low, q_high in grid:
        if level == "low":
            scaled_policy = context.extraction.extract(c * q_high)
            limit_policy = greedy_policy(q_high)
            vmax = q_low.max(axis=1)
            field_c = problem.gamma_low * (context.low_dynamics_for(scaled_policy) @ vmax) - q_low
            if include_reward:
                field_c = field_c + problem.low_reward / c
            field_inf = (
                problem.gamma_low * (context.low_dynamics_for(limit_policy) @ vmax) - q_low
            )
        elif level == "high":
            scaled_policy = context.extraction.extract(c * q_low)
            limit_policy = greedy_policy(q_low)
            vmax = q_high.max(axis=1)
            gT = problem.gamma_high**problem.epoch_length
            p_c, r_c = context.high_terms_for(scaled_policy)
            p_inf, _ = context.high_terms_for(limit_policy)
            field_c = gT * (p_c @ vmax) - q_high
            if include_reward:
                field_c = field_c + r_c / c
            field_inf = gT * (p_inf @ vmax) - q_high
        else:
            raise ValueError(f"level must be 'low' or 'high', got {level!r}")
        worst = max(worst, float(np.max(np.abs(field_c - field_inf))))
    return worst


def estimate_lipschitz(
    field: str,
    context: MeanFieldContext,
    pairs: list[tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]],
    fixed_policies: tuple[np.ndarray, np.ndarray] | None = None,
) -> float:
    """Empirical lower bound on the Lipschitz constant of a mean field.

    Evaluates max over input pairs of |f(p1) - f(p2)| / |p1 - p2| in the
    joint max norm.  ``fixed_policies=(high_policy, low_policy)`` freezes
    the compositions, isolating the field's dependence on the tables alone.
    Identical inputs are skipped.
    """
    if len(pairs) < 2:
        raise ValueError("need at least 2 input pairs")

    def evaluate(q_low: np.ndarray, q_high: np.ndarray) -> np.ndarray:
        if fixed_policies is not None:
            high_policy, low_policy = fixed_policies
            if field == "low":
                return low_bellman_apply(q_low, context, high_policy) - q_low
            return high_bellman_apply(q_high, context, low_policy) - q_high
        if field == "low":
            return low_mean_field(q_low, q_high, context)
        if field == "high":
            return high_mean_field(q_low, q_high, context)
        raise ValueError(f"field must be 'low' or 'high', got {field!r}")

    worst = 0.0
    for (x1, y1), (x2, y2) in pairs:
        denom = max(float(np.max(np.abs(x1 - x2))), float(np.max(np.abs(y1 - y2))))
        if denom == 0.0:
            continue
        num = float(np.max(np.abs(evaluate(x1, y1) - evaluate(x2, y2))))
        worst = max(worst, num / denom)
    return worst


def flat_optimal_q(mdp: FlatMDP, tol: float = 1e-10) -> np.ndarray:
    """Optimal flat Q-table by value iteration (independent baseline)."""
    P, r, gamma = mdp.transition, mdp.reward, mdp.discount

    def apply(q: np.ndarray) -> np.ndarray:
        return r + gamma * (P @ q.max(axis=1))

    return solve_fixed_point(apply, gamma, np.zeros_like(r), tol)


def high_policy_evaluation(
    context: MeanFieldContext,
    pi_high: np.ndarray,
    low_policy: np.ndarray,
    tol: float = 1e-10,
) -> np.ndarray:
    """Value table of a deterministic high-level policy (no maximization).

    Solves Q(s, w) = r(s, w) + gamma**T * sum_s' P(s'|s, w) Q(s', pi(s'))
    under the epoch dynamics composed for ``low_policy``.
    """
    problem = context.problem
    p_high, r_high = context.high_terms_for(low_policy)
    gT = problem.gamma_high**problem.epoch_length
    idx = np.arange(problem.flat.num_states)

    def apply(q: np.ndarray) -> np.ndarray:
        return r_high + gT * (p_high @ q[idx, pi_high])

    return solve_fixed_point(apply, gT, np.zeros_like(r_high), tol)
