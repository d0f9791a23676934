"""Config-driven experiment runner, reporting, and verification batteries."""

from __future__ import annotations

import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .envs import (
    FourRoomsConfig,
    FourRoomsInstance,
    build_four_rooms,
    flip_feudal,
    flip_mdp,
    random_feudal_problem,
    random_mdp,
)
from .feudal import FeudalProblem, build_feudal_problem
from .mdp import FlatMDP, RngStream, load_mdp
from .oracle import (
    MeanFieldContext,
    OdeConfig,
    PolicyExtraction,
    high_bellman_apply,
    integrate_mean_field_odes,
    low_bellman_apply,
    martingale_mean_estimate,
    noise_second_moment_ratio,
    scaled_field_gap,
    solve_coupled,
    solve_low_fixed_point,
)
from .policies import BoltzmannSchedule, greedy_policy
from .qlearning import (
    EpisodeLog,
    QTablePair,
    StepSizeSchedule,
    TrainingConfig,
    high_value_bound,
    low_value_bound,
    train_feudal,
    train_flat_watkins,
)

CSV_FIELDS = ("seed", "episode", "cum_reward", "low_steps", "high_decisions", "tau_high", "tau_low")


def moving_average(series, window: int) -> np.ndarray:
    """Trailing moving average; windows at the head shrink to the prefix."""
    if window < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        return np.empty(0)
    out = np.empty_like(x)
    head = min(window - 1, x.size)
    for i in range(head):
        out[i] = x[: i + 1].mean()
    if x.size >= window:
        out[window - 1 :] = np.lib.stride_tricks.sliding_window_view(x, window).mean(axis=1)
    return out


def episodes_to_threshold(
    logs: list[EpisodeLog], threshold: float, patience: int, window: int = 50
) -> int | None:
    """First episode index at which the smoothed reward starts holding at or
    above ``threshold`` for ``patience`` consecutive episodes; None if never."""
    if patience < 1:
        raise ValueError("patience must be >= 1")
    if not logs:
        return None
    smoothed = moving_average([log.cum_reward for log in logs], window)
    ok = smoothed >= threshold
    run = 0
    for i, flag in enumerate(ok):
        run = run + 1 if flag else 0
        if run >= patience:
            return i - patience + 1
    return None


def logs_to_csv(logs: list[EpisodeLog], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for log in logs:
            writer.writerow(
                [
                    log.seed,
                    log.episode,
                    repr(log.cum_reward),
                    log.low_steps,
                    log.high_decisions,
                    repr(log.tau_high),
                    repr(log.tau_low),
                ]
            )


def logs_from_csv(path: str | Path) -> list[EpisodeLog]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out.append(
                EpisodeLog(
                    seed=int(row["seed"]),
                    episode=int(row["episode"]),
                    cum_reward=float(row["cum_reward"]),
                    low_steps=int(row["low_steps"]),
                    high_decisions=int(row["high_decisions"]),
                    tau_high=float(row["tau_high"]),
                    tau_low=float(row["tau_low"]),
                )
            )
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one training experiment needs, loadable from JSON/TOML.

    ``environment`` picks the instance ("four_rooms", "flip", "random",
    "mdp_json" with their parameters); ``agent`` is "feudal" or "flat".
    ``continual`` holds a second-phase goal relocation for Four Rooms; the
    second phase warm-starts from the first phase's tables and both phases
    share the agent spec.
    """

    environment: dict
    agent: str
    training: TrainingConfig
    output_dir: str
    epoch_length: int = 3
    gamma_low: float = 0.9
    gamma_high: float | None = None
    extrinsic_coeff: float = 0.0
    smoothing_window: int = 50
    threshold: float | None = None
    patience: int = 100
    warm_start: str | None = None
    continual: dict | None = None
    oracle_check: bool = False
    oracle_rel_tol: float = 0.05

    def __post_init__(self) -> None:
        if self.agent not in ("feudal", "flat"):
            raise ValueError(f"agent must be 'feudal' or 'flat', got {self.agent!r}")


def _schedule_from_dict(doc: dict | None) -> BoltzmannSchedule:
    return BoltzmannSchedule(**doc) if doc else BoltzmannSchedule()


def _training_from_dict(doc: dict) -> TrainingConfig:
    step_doc = doc.get("step_sizes")
    return TrainingConfig(
        episodes=int(doc["episodes"]),
        steps_per_episode=int(doc["steps_per_episode"]),
        seed=int(doc.get("seed", 0)),
        schedule=StepSizeSchedule(**step_doc) if step_doc else StepSizeSchedule(),
        policy_high=_schedule_from_dict(doc.get("policy_high")),
        policy_low=_schedule_from_dict(doc.get("policy_low")),
        initial_q=float(doc.get("initial_q", 0.0)),
        start_state=doc.get("start_state"),
        bound_check_every=int(doc.get("bound_check_every", 10_000)),
    )


def experiment_config_from_dict(doc: dict, output_dir: str | None = None) -> ExperimentConfig:
    return ExperimentConfig(
        environment=dict(doc["environment"]),
        agent=doc["agent"],
        training=_training_from_dict(doc["training"]),
        output_dir=output_dir or doc.get("output_dir", "out"),
        epoch_length=int(doc.get("epoch_length", 3)),
        gamma_low=float(doc.get("gamma_low", 0.9)),
        gamma_high=(None if doc.get("gamma_high") is None else float(doc["gamma_high"])),
        extrinsic_coeff=float(doc.get("extrinsic_coeff", 0.0)),
        smoothing_window=int(doc.get("smoothing_window", 50)),
        threshold=(None if doc.get("threshold") is None else float(doc["threshold"])),
        patience=int(doc.get("patience", 100)),
        warm_start=doc.get("warm_start"),
        continual=doc.get("continual"),
        oracle_check=bool(doc.get("oracle_check", False)),
        oracle_rel_tol=float(doc.get("oracle_rel_tol", 0.05)),
    )


def load_experiment_config(path: str | Path, output_dir: str | None = None) -> ExperimentConfig:
    """Read an experiment config from a .json or .toml file."""
    path = Path(path)
    if path.suffix == ".toml":
        try:
            import tomllib  # py311+
        except ModuleNotFoundError:
            import tomli as tomllib
        doc = tomllib.loads(path.read_text())
    else:
        doc = json.loads(path.read_text())
    return experiment_config_from_dict(doc, output_dir)


def _build_environment(
    config: ExperimentConfig, goal_cell: tuple[int, int] | None = None
) -> tuple[FlatMDP, FeudalProblem | None, FourRoomsInstance | None]:
    """Instantiate (flat MDP, feudal problem if requested, layout if any)."""
    env = dict(config.environment)
    kind = env.pop("kind")
    instance: FourRoomsInstance | None = None
    if kind == "four_rooms":
        if "goal_cell" in env:
            env["goal_cell"] = tuple(env["goal_cell"])
        if "start_cell" in env:
            env["start_cell"] = tuple(env["start_cell"])
        if env.get("subgoal_cells") is not None:
            env["subgoal_cells"] = tuple(tuple(c) for c in env["subgoal_cells"])
        elif config.continual is not None:
            # Both phases must share the goal space for warm starts to fit:
            # doorways plus the goal cells of both phases.
            base = build_four_rooms(FourRoomsConfig(**env))
            both = set(base.doorways)
            both.add(base.config.goal_cell)
            both.add(tuple(config.continual["goal_cell"]))
            env["subgoal_cells"] = tuple(sorted(both))
        if goal_cell is not None:
            env["goal_cell"] = tuple(goal_cell)
        instance = build_four_rooms(FourRoomsConfig(**env))
        mdp = instance.mdp
        problem = (
            instance.feudal_problem(
                epoch_length=config.epoch_length,
                gamma_low=config.gamma_low,
                gamma_high=config.gamma_high,
                extrinsic_coeff=config.extrinsic_coeff,
            )
            if config.agent == "feudal"
            else None
        )
        return mdp, problem, instance

    if kind == "flip":
        mdp = flip_mdp(env.get("discount", 0.9))
    elif kind == "random":
        mdp = random_mdp(**env)
    elif kind == "mdp_json":
        mdp = load_mdp(env["path"])
    else:
        raise ValueError(f"unknown environment kind {kind!r}")
    problem = None
    if config.agent == "feudal":
        problem = build_feudal_problem(
            mdp,
            epoch_length=config.epoch_length,
            gamma_low=config.gamma_low,
            gamma_high=config.gamma_high,
            extrinsic_coeff=config.extrinsic_coeff,
        )
    return mdp, problem, instance


def _tables_to_json(tables: QTablePair | np.ndarray) -> dict:
    if isinstance(tables, QTablePair):
        return {"high": tables.high.tolist(), "low": tables.low.tolist()}
    return {"q": np.asarray(tables).tolist()}


def _tables_from_json(doc: dict) -> QTablePair | np.ndarray:
    if "high" in doc:
        return QTablePair(high=np.asarray(doc["high"]), low=np.asarray(doc["low"]))
    return np.asarray(doc["q"])


@dataclass
class PhaseResult:
    name: str
    logs: list[EpisodeLog]
    tables: QTablePair | np.ndarray
    directory: Path
    summary: dict


@dataclass
class ExperimentResult:
    output_dir: Path
    phases: list[PhaseResult]
    summary: dict


def _run_phase(
    name: str,
    config: ExperimentConfig,
    out_dir: Path,
    goal_cell: tuple[int, int] | None,
    warm_tables: QTablePair | np.ndarray | None,
    rng: RngStream | None,
) -> PhaseResult:
    mdp, problem, instance = _build_environment(config, goal_cell)
    phase_dir = out_dir / name
    phase_dir.mkdir(parents=True, exist_ok=True)
    training = config.training
    if training.start_state is None and instance is not None:
        training = replace(training, start_state=instance.start_state)

    if config.agent == "feudal":
        assert problem is not None
        tables, logs = train_feudal(problem, training, rng=rng, initial=warm_tables)
    else:
        tables, logs = train_flat_watkins(mdp, training, rng=rng, initial=warm_tables)

    logs_to_csv(logs, phase_dir / "episodes.csv")
    smoothed = moving_average([log.cum_reward for log in logs], config.smoothing_window)
    with open(phase_dir / "smoothed.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "smoothed_reward"])
        for i, v in enumerate(smoothed):
            writer.writerow([i, repr(float(v))])
    (phase_dir / "q_tables.json").write_text(json.dumps(_tables_to_json(tables)))

    threshold = config.threshold
    max_reward = None
    if instance is not None:
        max_reward = instance.max_cumulative_reward(training.steps_per_episode)
        if threshold is None:
            threshold = 0.98 * max_reward
    summary: dict = {
        "phase": name,
        "episodes": len(logs),
        "seed": training.seed,
        "max_cumulative_reward": max_reward,
        "threshold": threshold,
        "patience": config.patience,
        "episodes_to_threshold": (
            episodes_to_threshold(logs, threshold, config.patience, config.smoothing_window)
            if threshold is not None
            else None
        ),
        "asymptotic_smoothed_reward": (
            float(np.mean(smoothed[-max(1, len(smoothed) // 10) :])) if len(smoothed) else None
        ),
    }

    if config.oracle_check and config.agent == "feudal" and problem is not None:
        solution = solve_coupled(problem, tol=1e-9)
        assert isinstance(tables, QTablePair)
        rel_high = float(np.max(np.abs(tables.high - solution.q_high))) / max(
            1.0, float(np.max(np.abs(solution.q_high)))
        )
        rel_low = float(np.max(np.abs(tables.low - solution.q_low))) / max(
            1.0, float(np.max(np.abs(solution.q_low)))
        )
        summary["oracle_check"] = {
            "rel_error_high": rel_high,
            "rel_error_low": rel_low,
            "tolerance": config.oracle_rel_tol,
            "passed": rel_high <= config.oracle_rel_tol and rel_low <= config.oracle_rel_tol,
            "oracle_residual_high": solution.residual_high,
            "oracle_residual_low": solution.residual_low,
        }

    return PhaseResult(name=name, logs=logs, tables=tables, directory=phase_dir, summary=summary)


_PLOT_TEMPLATE = """set terminal pngcairo size 960,540
set output 'rewards.png'
set datafile separator ','
set key bottom right
set xlabel 'episode'
set ylabel 'smoothed cumulative reward'
plot {plots}
"""


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Train per phase and write the full output bundle.

    Writes per phase: ``episodes.csv`` (one row per episode), the smoothed
    series, and the final tables as JSON; plus a joint ``summary.json`` and
    a standalone gnuplot script that consumes the CSVs.  In continual mode
    the goal is relocated and phase 2 warm-starts from phase 1's tables,
    continuing the same draw stream (the same agent keeps learning).
    """
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    warm: QTablePair | np.ndarray | None = None
    if config.warm_start is not None:
        warm = _tables_from_json(json.loads(Path(config.warm_start).read_text()))

    rng = RngStream(config.training.seed)
    phases = [_run_phase("phase1", config, out_dir, None, warm, rng)]
    if config.continual is not None:
        phases.append(
            _run_phase(
                "phase2",
                config,
                out_dir,
                tuple(config.continual["goal_cell"]),
                phases[0].tables,
                rng,
            )
        )

    summary = {
        "agent": config.agent,
        "environment": config.environment,
        "phases": [p.summary for p in phases],
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    plots = ", ".join(
        f"'{p.name}/smoothed.csv' every ::1 using 1:2 with lines title '{p.name}'"
        for p in phases
    )
    (out_dir / "plot.gp").write_text(_PLOT_TEMPLATE.format(plots=plots))
    return ExperimentResult(output_dir=out_dir, phases=phases, summary=summary)


def _battery_threads() -> int:
    value = os.environ.get("FEUDALQ_THREADS", "")
    try:
        return max(1, int(value))
    except ValueError:
        return max(1, min(4, os.cpu_count() or 1))


def _random_pair(problem: FeudalProblem, rng: RngStream, scale: float) -> QTablePair:
    low = (
        2.0 * rng.uniforms(problem.num_low_states * problem.flat.num_actions) - 1.0
    ).reshape(problem.num_low_states, problem.flat.num_actions) * scale
    high = (2.0 * rng.uniforms(problem.flat.num_states * problem.num_goals) - 1.0).reshape(
        problem.flat.num_states, problem.num_goals
    ) * scale
    return QTablePair(high=high, low=low)


def _contraction_for_instance(args: tuple[FeudalProblem, int, int]) -> dict:
    problem, seed, pairs = args
    rng = RngStream(seed)
    context = MeanFieldContext(problem, PolicyExtraction("greedy"))
    solution = solve_coupled(problem, tol=1e-9)
    high_policy = greedy_policy(solution.q_high)
    low_policy = greedy_policy(solution.q_low)
    worst_low = 0.0
    worst_high = 0.0
    scale_low = max(1.0, low_value_bound(problem))
    scale_high = max(1.0, high_value_bound(problem))
    for _ in range(pairs):
        a = _random_pair(problem, rng, scale_low)
        b = _random_pair(problem, rng, scale_high)
        d_low = float(np.max(np.abs(a.low - b.low)))
        if d_low > 0:
            t1 = low_bellman_apply(a.low, context, high_policy)
            t2 = low_bellman_apply(b.low, context, high_policy)
            worst_low = max(worst_low, float(np.max(np.abs(t1 - t2))) / d_low)
        d_high = float(np.max(np.abs(a.high - b.high)))
        if d_high > 0:
            t1 = high_bellman_apply(a.high, context, low_policy)
            t2 = high_bellman_apply(b.high, context, low_policy)
            worst_high = max(worst_high, float(np.max(np.abs(t1 - t2))) / d_high)
    return {
        "max_ratio_low": worst_low,
        "modulus_low": problem.gamma_low,
        "max_ratio_high": worst_high,
        "modulus_high": problem.gamma_high**problem.epoch_length,
        "pairs": pairs,
        "ok": worst_low <= problem.gamma_low + 1e-10
        and worst_high <= problem.gamma_high**problem.epoch_length + 1e-10,
    }


def battery_contraction(num_instances: int = 4, pairs: int = 1000, seed: int = 7) -> dict:
    """Empirical contraction moduli of both Bellman operators.

    Instances are verified in parallel (capped by FEUDALQ_THREADS) and
    merged by index.
    """
    problems = [flip_feudal()] + [
        random_feudal_problem(seed=seed + i) for i in range(num_instances - 1)
    ]
    jobs = [(p, seed + 100 + i, pairs) for i, p in enumerate(problems)]
    with ThreadPoolExecutor(max_workers=_battery_threads()) as pool:
        results = list(pool.map(_contraction_for_instance, jobs))
    return {
        "suite": "contraction",
        "instances": results,
        "ok": all(r["ok"] for r in results),
    }


def battery_martingale(samples: int = 100_000, seed: int = 11) -> dict:
    """Zero-mean checks of both levels' sampling noise on the flip instance."""
    problem = flip_feudal()
    solution = solve_coupled(problem, tol=1e-9)
    context = MeanFieldContext(problem, PolicyExtraction("boltzmann", temperature=1.0))
    rng = RngStream(seed)
    coords = []
    ok = True
    worst_ratio = 0.0
    for s in range(problem.flat.num_states):
        for w in range(problem.num_goals):
            est = martingale_mean_estimate(
                context, solution.q_low, solution.q_high, s, w, "high", samples, rng
            )
            passed = abs(est.mean) < 4.0 * est.stderr or (est.stderr == 0.0 and est.mean == 0.0)
            ok = ok and passed
            worst_ratio = max(
                worst_ratio, noise_second_moment_ratio(est, solution.q_low, solution.q_high)
            )
            coords.append(
                {"level": "high", "state": s, "goal": w, "mean": est.mean, "stderr": est.stderr, "ok": passed}
            )
    low_coords = [(i, a) for i in range(problem.num_low_states) for a in range(problem.flat.num_actions)]
    picks = [low_coords[int(rng.uniform() * len(low_coords))] for _ in range(10)]
    for s_l, a in picks:
        est = martingale_mean_estimate(
            context, solution.q_low, solution.q_high, s_l, a, "low", samples, rng
        )
        passed = abs(est.mean) < 4.0 * est.stderr or (est.stderr == 0.0 and est.mean == 0.0)
        ok = ok and passed
        worst_ratio = max(
            worst_ratio, noise_second_moment_ratio(est, solution.q_low, solution.q_high)
        )
        coords.append(
            {"level": "low", "state": s_l, "action": a, "mean": est.mean, "stderr": est.stderr, "ok": passed}
        )
    return {
        "suite": "martingale",
        "samples": samples,
        "second_moment_growth_constant": worst_ratio,
        "coordinates": coords,
        "ok": ok,
    }


def battery_scaled(seed: int = 13, scales: tuple[float, ...] = (1.0, 10.0, 100.0, 1000.0)) -> dict:
    """Scaled-field convergence probe on a fixed 20-point grid."""
    problem = flip_feudal()
    context = MeanFieldContext(problem, PolicyExtraction("boltzmann", temperature=1.0))
    rng = RngStream(seed)
    grid = []
    for _ in range(20):
        pair = _random_pair(problem, rng, 2.0)
        grid.append((pair.low, pair.high))
    report = {"suite": "scaled", "scales": list(scales), "gaps": {}, "ok": True}
    for level in ("low", "high"):
        gaps = [scaled_field_gap(context, c, grid, level=level) for c in scales]
        policy_gaps = [
            scaled_field_gap(context, c, grid, level=level, include_reward=False)
            for c in scales
        ]
        reward_bound = (
            problem.low_reward_bound
            if level == "low"
            else problem.epoch_length * problem.flat.reward_bound
        )
        monotone = all(gaps[i + 1] <= gaps[i] + 1e-12 for i in range(len(gaps) - 1))
        bounded = all(
            gap <= 10.0 * reward_bound / c + pol + 1e-9
            for gap, pol, c in zip(gaps, policy_gaps, scales)
        )
        report["gaps"][level] = {
            "gap": gaps,
            "policy_term": policy_gaps,
            "monotone": monotone,
            "bounded": bounded,
        }
        report["ok"] = report["ok"] and monotone and bounded
    return report


def battery_ode(seed: int = 17, starts: int = 5) -> dict:
    """Two-timescale tracking check: Euler runs end at the coupled solution."""
    problem = flip_feudal()
    solution = solve_coupled(problem, tol=1e-11)
    context = MeanFieldContext(problem, PolicyExtraction("greedy"))
    rng = RngStream(seed)
    ode = OdeConfig(step=0.01, horizon=200.0, epsilon=0.01, record_every=1000)
    runs = []
    ok = True
    for i in range(starts):
        pair = _random_pair(problem, rng, max(1.0, low_value_bound(problem) / 2.0))
        path = integrate_mean_field_odes(context, pair.low, pair.high, ode)
        _, x_end, y_end = path[-1]
        err = max(
            float(np.max(np.abs(x_end - solution.q_low))),
            float(np.max(np.abs(y_end - solution.q_high))),
        )
        runs.append({"start": i, "terminal_error": err, "ok": err < 1e-3})
        ok = ok and err < 1e-3
    # Fast dynamics alone, slow table frozen at the solution.
    fast = integrate_mean_field_odes(
        context,
        _random_pair(problem, rng, 1.0).low,
        solution.q_high,
        OdeConfig(step=0.01, horizon=200.0, epsilon=1.0, record_every=5000),
        freeze_slow=True,
    )
    fixed = solve_low_fixed_point(context, greedy_policy(solution.q_high), tol=1e-12)
    fast_err = float(np.max(np.abs(fast[-1][1] - fixed)))
    ok = ok and fast_err < 1e-4
    return {
        "suite": "ode",
        "runs": runs,
        "fast_ode_error_vs_fixed_point": fast_err,
        "ok": ok,
    }


BATTERIES = {
    "contraction": battery_contraction,
    "martingale": battery_martingale,
    "scaled": battery_scaled,
    "ode": battery_ode,
}


def report_directory(out_dir: str | Path, stream=None) -> dict:
    """Summarize an experiment output directory to a stream (stdout)."""
    stream = stream or sys.stdout
    out_dir = Path(out_dir)
    summary = json.loads((out_dir / "summary.json").read_text())
    print(f"agent: {summary['agent']}", file=stream)
    for phase in summary["phases"]:
        line = (
            f"{phase['phase']}: episodes={phase['episodes']} "
            f"asymptote={phase['asymptotic_smoothed_reward']:.3f}"
            if phase["asymptotic_smoothed_reward"] is not None
            else f"{phase['phase']}: episodes={phase['episodes']}"
        )
        if phase.get("threshold") is not None:
            line += (
                f" threshold={phase['threshold']:.3f}"
                f" episodes_to_threshold={phase['episodes_to_threshold']}"
            )
        if "oracle_check" in phase:
            line += f" oracle_ok={phase['oracle_check']['passed']}"
        print(line, file=stream)
    return summary
