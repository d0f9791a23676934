"""Concrete environments: the Four Rooms gridworld and seeded random MDPs."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from math import log

import numpy as np

from .feudal import FeudalProblem, build_feudal_problem
from .mdp import FlatMDP, RngStream

# Orientation encoding: 0=N, 1=E, 2=S, 3=W; action encoding:
# 0=turn counterclockwise, 1=turn clockwise, 2=move forward.
_DELTAS = ((-1, 0), (0, 1), (1, 0), (0, -1))
_ORIENT_CHARS = "^>v<"
TURN_LEFT, TURN_RIGHT, FORWARD = 0, 1, 2


@dataclass(frozen=True)
class FourRoomsConfig:
    """Layout parameters for the four-room gridworld.

    Four ``room_size`` x ``room_size`` rooms sit in a 2x2 arrangement inside
    an outer wall, separated by one-cell wall lines with one doorway per
    line segment (centered by default).  The agent turns in place or moves
    forward; moving into a wall leaves the state unchanged.  Entering the
    goal cell pays ``goal_reward`` and the next transition teleports the
    agent back to its start pose, so the reward can recur within an episode.
    """

    room_size: int = 5
    start_cell: tuple[int, int] = (1, 1)
    start_orientation: int = 1
    goal_cell: tuple[int, int] = (1, 5)
    goal_reward: float = 1.0
    discount: float = 0.9
    doorways: tuple[tuple[int, int], ...] | None = None
    subgoal_cells: tuple[tuple[int, int], ...] | None = None


class LayoutError(ValueError):
    """Invalid Four Rooms layout."""


def _default_doorways(room_size: int) -> tuple[tuple[int, int], ...]:
    mid = room_size + 1
    lo = (1 + room_size) // 2  # center of the near span
    hi = (mid + 1 + 2 * room_size + 1) // 2  # center of the far span
    return ((mid, lo), (mid, hi), (lo, mid), (hi, mid))


@dataclass(frozen=True)
class FourRoomsInstance:
    """A built Four Rooms MDP plus the layout metadata tests rely on."""

    config: FourRoomsConfig
    mdp: FlatMDP
    grid_size: int
    walls: np.ndarray  # (N, N) bool
    cells: tuple[tuple[int, int], ...]  # walkable cells, row-major
    start_state: int
    doorways: tuple[tuple[int, int], ...]
    subgoal_cells: tuple[tuple[int, int], ...]
    goal_space: np.ndarray  # canonical state ids, one per subgoal cell

    @property
    def cell_index(self) -> dict[tuple[int, int], int]:
        return {c: i for i, c in enumerate(self.cells)}

    def state_id(self, cell: tuple[int, int], orientation: int) -> int:
        return self.cell_index[cell] * 4 + orientation

    def state_cell(self, state: int) -> tuple[int, int]:
        return self.cells[state // 4]

    def ascii_layout(self) -> str:
        """Layout as text: '#' wall, '.' floor, 'G' goal, ^>v< start pose."""
        rows = []
        for i in range(self.grid_size):
            row = []
            for j in range(self.grid_size):
                if self.walls[i, j]:
                    row.append("#")
                elif (i, j) == self.config.goal_cell:
                    row.append("G")
                elif (i, j) == self.config.start_cell:
                    row.append(_ORIENT_CHARS[self.config.start_orientation])
                else:
                    row.append(".")
            rows.append("".join(row))
        return "\n".join(rows)

    def shortest_steps_to_goal(self, from_state: int | None = None) -> int:
        """Minimum number of actions from a state to enter the goal cell."""
        if from_state is None:
            from_state = self.start_state
        goal = self.config.goal_cell
        if self.state_cell(from_state) == goal:
            return 0
        dist = {from_state: 0}
        queue = deque([from_state])
        next_of = np.argmax(self.mdp.transition, axis=2)
        while queue:
            s = queue.popleft()
            for a in range(3):
                s2 = int(next_of[s, a])
                if s2 in dist:
                    continue
                dist[s2] = dist[s] + 1
                if self.state_cell(s2) == goal:
                    return dist[s2]
                queue.append(s2)
        raise LayoutError("goal unreachable from the given state")

    def max_cumulative_reward(self, steps: int) -> float:
        """Best achievable undiscounted episode reward in ``steps`` actions.

        The first goal entry costs the shortest-path distance d; every
        further entry costs d+1 (one teleport step plus the path), so the
        optimum is 1 + floor((steps - d) / (d + 1)).
        """
        d = self.shortest_steps_to_goal()
        if steps < d or d == 0:
            return 0.0
        return float((1 + (steps - d) // (d + 1)) * self.config.goal_reward)

    def unreachable_states(self) -> list[int]:
        """States from which the goal cell cannot be entered."""
        bad = []
        for s in range(self.mdp.num_states):
            try:
                self.shortest_steps_to_goal(s)
            except LayoutError:
                bad.append(s)
        return bad

    def tile_low_reward(
        self, epoch_length: int, extrinsic_coeff: float = 0.0
    ) -> np.ndarray:
        """Goal-indicator low reward matching subgoal tiles regardless of
        orientation (1 when standing on the active subgoal's cell)."""
        S = self.mdp.num_states
        G = self.goal_space.shape[0]
        A = self.mdp.num_actions
        table = np.zeros((S * G * epoch_length, A))
        for s in range(S):
            cell = self.state_cell(s)
            for g, sub in enumerate(self.subgoal_cells):
                base = (s * G + g) * epoch_length
                row = extrinsic_coeff * self.mdp.reward[s]
                if cell == sub:
                    row = row + 1.0
                table[base : base + epoch_length, :] = row
        return table

    def feudal_problem(
        self,
        epoch_length: int = 3,
        gamma_low: float = 0.9,
        gamma_high: float | None = None,
        extrinsic_coeff: float = 0.0,
    ) -> FeudalProblem:
        """Feudal problem over the subgoal tiles with the tile indicator."""
        return build_feudal_problem(
            self.mdp,
            epoch_length=epoch_length,
            gamma_low=gamma_low,
            gamma_high=gamma_high,
            goal_space=self.goal_space,
            low_reward_mode="table",
            low_reward_table=self.tile_low_reward(epoch_length, extrinsic_coeff),
        )


def build_four_rooms(config: FourRoomsConfig = FourRoomsConfig()) -> FourRoomsInstance:
    """Construct the deterministic Four Rooms MDP from a layout config.

    Raises:
        LayoutError: If the layout parameters are inconsistent (even room
            size, blocked start/goal, coinciding start and goal, doorways
            not on wall lines).
    """
    rs = config.room_size
    if rs < 3 or rs % 2 == 0:
        raise LayoutError(f"room_size must be an odd integer >= 3, got {rs}")
    n = 2 * rs + 3
    mid = rs + 1
    walls = np.zeros((n, n), dtype=bool)
    walls[0, :] = walls[-1, :] = True
    walls[:, 0] = walls[:, -1] = True
    walls[mid, :] = True
    walls[:, mid] = True
    doorways = config.doorways if config.doorways is not None else _default_doorways(rs)
    for r, c in doorways:
        if not walls[r, c] or r in (0, n - 1) or c in (0, n - 1):
            raise LayoutError(f"doorway {(r, c)} is not on an interior wall line")
        walls[r, c] = False

    if walls[config.start_cell]:
        raise LayoutError(f"start cell {config.start_cell} is a wall")
    if walls[config.goal_cell]:
        raise LayoutError(f"goal cell {config.goal_cell} is a wall")
    if config.start_cell == config.goal_cell:
        raise LayoutError("start and goal cells must differ")
    if config.start_orientation not in (0, 1, 2, 3):
        raise LayoutError("start orientation must be in {0, 1, 2, 3}")

    cells = tuple(
        (i, j) for i in range(n) for j in range(n) if not walls[i, j]
    )
    index = {c: i for i, c in enumerate(cells)}
    S = len(cells) * 4
    A = 3
    start_state = index[config.start_cell] * 4 + config.start_orientation
    goal = config.goal_cell

    transition = np.zeros((S, A, S))
    reward = np.zeros((S, A))
    for ci, cell in enumerate(cells):
        for o in range(4):
            s = ci * 4 + o
            if cell == goal:
                for a in range(A):
                    transition[s, a, start_state] = 1.0
                continue
            for a in range(A):
                if a == TURN_LEFT:
                    s2 = ci * 4 + (o - 1) % 4
                elif a == TURN_RIGHT:
                    s2 = ci * 4 + (o + 1) % 4
                else:
                    di, dj = _DELTAS[o]
                    nxt = (cell[0] + di, cell[1] + dj)
                    s2 = (index[nxt] * 4 + o) if not walls[nxt] else s
                transition[s, a, s2] = 1.0
                if cells[s2 // 4] == goal:
                    reward[s, a] = config.goal_reward

    subgoals = (
        config.subgoal_cells
        if config.subgoal_cells is not None
        else tuple(sorted(set(doorways) | {goal}))
    )
    for cell in subgoals:
        if walls[cell]:
            raise LayoutError(f"subgoal cell {cell} is a wall")
    goal_space = np.array([index[c] * 4 for c in subgoals], dtype=np.int64)

    mdp = FlatMDP(
        num_states=S,
        num_actions=A,
        transition=transition,
        reward=reward,
        discount=config.discount,
    )
    return FourRoomsInstance(
        config=config,
        mdp=mdp,
        grid_size=n,
        walls=walls,
        cells=cells,
        start_state=start_state,
        doorways=tuple(doorways),
        subgoal_cells=subgoals,
        goal_space=goal_space,
    )


def random_mdp(
    num_states: int,
    num_actions: int,
    reward_scale: float = 1.0,
    sparsity: float = 0.0,
    seed: int = 0,
    discount: float = 0.9,
) -> FlatMDP:
    """Seeded dense random MDP for property tests.

    Transition rows are normalized positive draws (exponential weights,
    equivalent to a flat Dirichlet); ``sparsity`` zeroes that fraction of
    each row (always keeping at least one entry) before renormalizing.
    Rewards are uniform in [-reward_scale, reward_scale].
    """
    if num_states < 1 or num_actions < 1:
        raise ValueError("sizes must be >= 1")
    if not (0.0 <= sparsity < 1.0):
        raise ValueError("sparsity must lie in [0, 1)")
    rng = RngStream(seed)
    S, A = num_states, num_actions
    transition = np.zeros((S, A, S))
    keep = max(1, int(round((1.0 - sparsity) * S)))
    for s in range(S):
        for a in range(A):
            weights = np.array([-log(1.0 - rng.uniform()) for _ in range(S)])
            if keep < S:
                order = np.argsort(rng.uniforms(S), kind="stable")
                weights[order[keep:]] = 0.0
            transition[s, a] = weights / weights.sum()
    reward = (2.0 * rng.uniforms(S * A).reshape(S, A) - 1.0) * reward_scale
    return FlatMDP(
        num_states=S,
        num_actions=A,
        transition=transition,
        reward=reward,
        discount=discount,
    )


def flip_mdp(discount: float = 0.9) -> FlatMDP:
    """Two-state environment with stay/swap actions; reward 1 in state 1.

    The smallest instance on which every coupled quantity is interesting:
    deterministic dynamics, nontrivial optimal policy, small enough for
    exhaustive enumeration.
    """
    transition = np.zeros((2, 2, 2))
    transition[0, 0, 0] = 1.0
    transition[1, 0, 1] = 1.0
    transition[0, 1, 1] = 1.0
    transition[1, 1, 0] = 1.0
    reward = np.array([[0.0, 0.0], [1.0, 1.0]])
    return FlatMDP(
        num_states=2, num_actions=2, transition=transition, reward=reward, discount=discount
    )


def flip_feudal(
    epoch_length: int = 2, gamma: float = 0.9, discount: float = 0.9
) -> FeudalProblem:
    """Canonical tiny feudal instance: flip MDP, goals = states, indicator."""
    return build_feudal_problem(
        flip_mdp(discount),
        epoch_length=epoch_length,
        gamma_low=gamma,
        gamma_high=gamma,
        low_reward_mode="indicator",
    )


def random_feudal_problem(
    num_states: int = 4,
    num_actions: int = 2,
    epoch_length: int = 2,
    gamma: float = 0.9,
    seed: int = 0,
    reward_scale: float = 1.0,
    sparsity: float = 0.0,
) -> FeudalProblem:
    """Seeded random feudal instance with goals = states and the indicator
    low reward; the stock instance family for property checks."""
    flat = random_mdp(
        num_states, num_actions, reward_scale=reward_scale, sparsity=sparsity,
        seed=seed, discount=gamma,
    )
    return build_feudal_problem(
        flat, epoch_length=epoch_length, gamma_low=gamma, gamma_high=gamma,
        low_reward_mode="indicator",
    )


def random_navigation_mdp(
    num_states: int = 4,
    seed: int = 0,
    discount: float = 0.9,
    noise_range: tuple[float, float] = (0.05, 0.15),
) -> FlatMDP:
    """Seeded random two-action navigation MDP.

    Each action follows its own fixed-point-free permutation of the states
    (the two maps disagree at every state, so actions always offer a real
    choice of direction), blended with a uniform slip probability drawn
    from ``noise_range``.  Rewards are 1 on a random nonempty strict subset
    of states, identically for both actions.  The structure keeps goal
    navigation meaningful at short epoch lengths, unlike flat Dirichlet
    transitions under which most action choices are value-indifferent.
    """
    if num_states < 3:
        raise ValueError("need at least 3 states for two disagreeing derangements")
    rng = RngStream(seed)
    S = num_states

    def derangement() -> np.ndarray:
        while True:
            perm = np.argsort(rng.uniforms(S))
            if not np.any(perm == np.arange(S)):
                return perm

    move_a = derangement()
    while True:
        move_b = derangement()
        if not np.any(move_b == move_a):
            break
    noise = noise_range[0] + (noise_range[1] - noise_range[0]) * rng.uniform()
    transition = np.zeros((S, 2, S))
    for s in range(S):
        transition[s, 0, move_a[s]] = 1.0
        transition[s, 1, move_b[s]] = 1.0
    transition = (1.0 - noise) * transition + noise / S

    num_rewarded = 1 + rng.randint(max(1, S // 2))
    rewarded = np.argsort(rng.uniforms(S))[:num_rewarded]
    reward = np.zeros((S, 2))
    reward[rewarded, :] = 1.0
    return FlatMDP(
        num_states=S, num_actions=2, transition=transition, reward=reward,
        discount=discount,
    )


def random_navigation_feudal_problem(
    num_states: int = 4,
    epoch_length: int = 2,
    gamma: float = 0.9,
    seed: int = 0,
) -> FeudalProblem:
    """Seeded random navigation instance with goals = states, indicator low
    reward; the instance family for trainer-vs-oracle convergence runs."""
    flat = random_navigation_mdp(num_states, seed=seed, discount=gamma)
    return build_feudal_problem(
        flat, epoch_length=epoch_length, gamma_low=gamma, gamma_high=gamma,
        low_reward_mode="indicator",
    )
