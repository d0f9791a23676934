"""Tabular feudal Q-learning with exact oracles and equilibrium certification."""

from .envs import FourRoomsConfig, build_four_rooms, flip_feudal, flip_mdp, random_feudal_problem, random_mdp
from .feudal import (
    FeudalProblem,
    LowState,
    build_feudal_problem,
    compose_high_dynamics,
    compose_high_reward,
    compose_low_dynamics,
    high_reward,
    next_decision_state,
)
from .harness import ExperimentConfig, episodes_to_threshold, moving_average, run_experiment
from .mdp import FlatMDP, RngStream, Transition, sample_transition, validate_flat_mdp
from .oracle import (
    CoupledSolution,
    MeanFieldContext,
    OdeConfig,
    PolicyExtraction,
    flat_optimal_q,
    high_bellman_apply,
    integrate_mean_field_odes,
    low_bellman_apply,
    martingale_mean_estimate,
    solve_coupled,
    solve_fixed_point,
)
from .policies import BoltzmannSchedule, boltzmann_probs, glie_temperature, greedy_action
from .qlearning import (
    EpisodeLog,
    QTablePair,
    StepSizeSchedule,
    TrainingConfig,
    high_q_update,
    low_q_update,
    step_sizes,
    train_feudal,
    train_flat_watkins,
)
from .equilibrium import (
    NashCertificate,
    ReactionCertificate,
    StackelbergCandidate,
    enumerate_pure_high_candidates,
    reaction_membership,
    verify_nash,
    verify_stackelberg,
)

__version__ = "0.1.0"
