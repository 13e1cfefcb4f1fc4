"""Closed-loop multi-agent simulation, baselines and metrics.

Scenarios place agents and goals by rejection sampling with a clearance
margin; trials run the synchronous decentralized loop (every agent replans
every t_plan seconds from perfectly perceived current states and holds the
returned constant control in between); benchmarks aggregate success /
collision / timeout rates, planning wall times and path lengths over a
scenario matrix.

Collision detection is planner-independent: it only ever consults the
system boundary function on the simulated trajectories.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import ScenarioInfeasibleError
from .planner import PlanConfig, PlanProblem, evaluate_margins, plan_step_batch
from .seeding import derive_seed
from .systems import System


def _apply_control(controls, pending, i, u, wall, step, sim_dt, delayed):
    if delayed:
        pending[i] = (step + int(np.ceil(wall / sim_dt)), u)
    else:
        controls[i] = u

OUTCOME_SUCCESS = "success"
OUTCOME_COLLISION = "collision"
OUTCOME_TIMEOUT = "timeout"


@dataclass
class Scenario:
    kind: str
    m: int
    starts: np.ndarray
    goals: np.ndarray
    workspace: np.ndarray | None
    seed: int


@dataclass
class TrialResult:
    outcome: str
    path_lengths: np.ndarray
    straight_line: np.ndarray
    plan_times: list
    statuses: dict
    min_boundary: float
    sim_time: float
    min_plan_margin: float
    margin_recheck_max_diff: float
    trace: list | None = None


def particle_workspace(m: int) -> np.ndarray:
    """Square side 0.5 per agent, anchored at the origin."""
    side = 0.5 * m
    return np.array([[0.0, side], [0.0, side]])


def _pairwise_min_boundary(system: System, states: np.ndarray) -> float:
    m = len(states)
    idx_i, idx_j = np.triu_indices(m, k=1)
    joint = system.joint_state(states[idx_i], states[idx_j])
    return float(np.min(system.boundary(joint)))


def sample_scenario(
    system: System,
    m: int,
    seed: int,
    clearance: float = 0.05,
    max_attempts: int = 100_000,
) -> Scenario:
    """Rejection-sample pairwise-clear starts, then goals.

    Every placed pair keeps boundary value above `clearance`; the goal set
    obeys the same separation rule. Deterministic per seed.
    """
    if m < 2:
        raise ValueError("need at least two agents")
    if system.kind == "simple_arm" and m != 2:
        raise ValueError("the two-arm system defines exactly two agents")
    rng = np.random.default_rng(seed)
    if system.kind == "particle":
        workspace = particle_workspace(m)
        lo, hi = workspace[:, 0], workspace[:, 1]
    else:
        workspace = None
        lo = system.state_lo[: system.agent_dim]
        hi = system.state_hi[: system.agent_dim]

    attempts = 0

    def place(count):
        nonlocal attempts
        placed = []
        while len(placed) < count:
            attempts += 1
            if attempts > max_attempts:
                raise ScenarioInfeasibleError(
                    f"no clearance-{clearance} placement for m={m} after "
                    f"{max_attempts} draws (workspace too crowded)"
                )
            cand = rng.uniform(lo, hi)
            ok = True
            for prev in placed:
                if system.boundary(system.joint_state(cand, prev)) <= clearance:
                    ok = False
                    break
            if ok:
                placed.append(cand)
        return np.asarray(placed)

    starts = place(m)
    goals = place(m)
    return Scenario(
        kind=system.kind, m=m, starts=starts, goals=goals, workspace=workspace, seed=seed
    )


def naive_planner(system: System, x_agent, goal, gain: float = 4.0):
    """Clipped proportional drive toward the goal; ignores other agents."""
    delta = system.goal_delta(x_agent, goal)
    return np.clip(gain * delta, -system.control_bound, system.control_bound)


def _goal_reached(system: System, x_agent, goal, tol: float) -> bool:
    delta = system.goal_delta(x_agent, goal)
    if system.kind == "simple_arm":
        return bool(np.max(np.abs(delta)) <= tol)
    if system.kind == "air3d":
        return bool(np.linalg.norm(delta[:2]) <= tol)
    return bool(np.linalg.norm(delta) <= tol)


def run_trial(
    system: System,
    scenario: Scenario,
    method: str,
    value_function,
    plan_config: PlanConfig,
    sim_dt: float = 0.02,
    time_limit: float = 30.0,
    seed: int = 0,
    naive_gain: float = 4.0,
    collect_trace: bool = False,
    recheck_margins: bool = False,
    emulate_compute_delay: bool = False,
) -> TrialResult:
    """Synchronous closed-loop run of one scenario with one method.

    Agents that reach their goals hold zero control but remain obstacles.
    Collision is checked every sim step from pairwise boundary values.
    With `emulate_compute_delay` a freshly computed control only takes
    effect after its measured planning wall time (rounded up to sim
    steps); until then the previous control continues.
    """
    if method not in ("nehmo", "naive"):
        raise ValueError(f"unknown method {method!r}")
    replan_every = plan_config.t_plan / sim_dt
    if abs(replan_every - round(replan_every)) > 1e-9 or sim_dt <= 0:
        raise ValueError("sim_dt must divide t_plan")
    replan_every = int(round(replan_every))

    m = scenario.m
    states = scenario.starts.copy()
    controls = np.zeros((m, system.control_dim))
    pending = [None] * m
    reached = np.zeros(m, dtype=bool)
    path_lengths = np.zeros(m)
    straight = np.linalg.norm(
        np.stack([system.goal_delta(scenario.starts[i], scenario.goals[i]) for i in range(m)]),
        axis=-1,
    )
    plan_times: list = []
    statuses: dict = {}
    min_boundary = _pairwise_min_boundary(system, states)
    min_plan_margin = np.inf
    recheck_diff = 0.0
    trace = [] if collect_trace else None
    outcome = OUTCOME_TIMEOUT
    n_steps = int(round(time_limit / sim_dt))
    sim_time = 0.0

    if min_boundary < 0.0:
        outcome = OUTCOME_COLLISION
        n_steps = 0

    for step in range(n_steps):
        if step % replan_every == 0:
            planners = [i for i in range(m) if not reached[i]]
            for i in range(m):
                if reached[i]:
                    controls[i] = 0.0
            if method == "naive":
                for i in planners:
                    t0 = time.perf_counter()
                    u = naive_planner(system, states[i], scenario.goals[i], naive_gain)
                    wall = time.perf_counter() - t0
                    plan_times.append(wall)
                    statuses["naive"] = statuses.get("naive", 0) + 1
                    _apply_control(
                        controls, pending, i, u, wall, step, sim_dt, emulate_compute_delay
                    )
            elif planners:
                problems = [
                    PlanProblem(
                        x_self=states[i],
                        others=np.delete(states, i, axis=0),
                        goal=scenario.goals[i],
                        config=plan_config,
                        value_function=value_function,
                        system=system,
                    )
                    for i in planners
                ]
                plan_seeds = [derive_seed(seed, "plan", i, step) for i in planners]
                results = plan_step_batch(problems, plan_seeds)
                for i, problem, result in zip(planners, problems, results):
                    plan_times.append(result.wall_time)
                    statuses[result.status] = statuses.get(result.status, 0) + 1
                    if result.margins.size:
                        min_plan_margin = min(min_plan_margin, float(result.margins.min()))
                    if recheck_margins and not result.fail_safe:
                        margins2 = evaluate_margins(problem, result.control)
                        if result.margins.size:
                            recheck_diff = max(
                                recheck_diff,
                                float(np.max(np.abs(margins2 - result.margins))),
                            )
                    _apply_control(
                        controls,
                        pending,
                        i,
                        result.control,
                        result.wall_time,
                        step,
                        sim_dt,
                        emulate_compute_delay,
                    )
        if emulate_compute_delay:
            for i in range(m):
                if pending[i] is not None and step >= pending[i][0]:
                    controls[i] = pending[i][1]
                    pending[i] = None

        prev = states.copy()
        states = system.wrap_agent_states(states + sim_dt * system.agent_flow(states, controls))
        deltas = states - prev
        mask = system.agent_periodic_mask
        if np.any(mask):
            deltas[..., mask] = np.mod(deltas[..., mask] + np.pi, 2 * np.pi) - np.pi
        path_lengths += np.linalg.norm(deltas, axis=-1)
        sim_time = (step + 1) * sim_dt

        if collect_trace:
            for i in range(m):
                trace.append(
                    {
                        "t": sim_time,
                        "agent": i,
                        "state": states[i].tolist(),
                        "control": controls[i].tolist(),
                    }
                )

        pair_min = _pairwise_min_boundary(system, states)
        min_boundary = min(min_boundary, pair_min)
        if pair_min < 0.0:
            outcome = OUTCOME_COLLISION
            break
        for i in range(m):
            if not reached[i] and _goal_reached(
                system, states[i], scenario.goals[i], plan_config.goal_tolerance
            ):
                reached[i] = True
                controls[i] = 0.0
                pending[i] = None
        if np.all(reached):
            outcome = OUTCOME_SUCCESS
            break

    return TrialResult(
        outcome=outcome,
        path_lengths=path_lengths,
        straight_line=straight,
        plan_times=plan_times,
        statuses=statuses,
        min_boundary=min_boundary,
        sim_time=sim_time,
        min_plan_margin=float(min_plan_margin),
        margin_recheck_max_diff=float(recheck_diff),
        trace=trace,
    )


def aggregate_metrics(method: str, m: int, trials: list) -> dict:
    """One metrics row: SR/CR/timeout percentages, times, path lengths."""
    n = len(trials)
    outcomes = [t.outcome for t in trials]
    sr = 100.0 * outcomes.count(OUTCOME_SUCCESS) / n
    cr = 100.0 * outcomes.count(OUTCOME_COLLISION) / n
    to = 100.0 * outcomes.count(OUTCOME_TIMEOUT) / n
    times = np.concatenate([t.plan_times for t in trials if t.plan_times]) if any(
        t.plan_times for t in trials
    ) else np.array([0.0])
    succ = [t for t in trials if t.outcome == OUTCOME_SUCCESS]
    if succ:
        pls = np.array([float(np.mean(t.path_lengths)) for t in succ])
        sls = np.array([float(np.mean(t.straight_line)) for t in succ])
        pl_mean, pl_sd = float(pls.mean()), float(pls.std())
        sl_mean = float(sls.mean())
    else:
        pl_mean = pl_sd = sl_mean = float("nan")
    statuses: dict = {}
    for t in trials:
        for k, v in t.statuses.items():
            statuses[k] = statuses.get(k, 0) + v
    total_status = sum(statuses.values()) or 1
    return {
        "method": method,
        "m": m,
        "n_trials": n,
        "sr_pct": sr,
        "cr_pct": cr,
        "timeout_pct": to,
        "time_mean_ms": float(times.mean() * 1e3),
        "time_sd_ms": float(times.std() * 1e3),
        "pl_mean": pl_mean,
        "pl_sd": pl_sd,
        "straight_line_mean": sl_mean,
        "fail_safe_frac": statuses.get("fail_safe", 0) / total_status,
    }


def _run_single(args):
    (system, scenario, method, value_function, plan_config, sim_dt, time_limit, seed,
     collect_trace, recheck) = args
    return run_trial(
        system,
        scenario,
        method,
        value_function,
        plan_config,
        sim_dt=sim_dt,
        time_limit=time_limit,
        seed=seed,
        collect_trace=collect_trace,
        recheck_margins=recheck,
    )


def run_benchmark(
    system: System,
    value_function,
    methods,
    agent_counts,
    n_scenarios: int,
    master_seed: int,
    plan_config: PlanConfig,
    sim_dt: float = 0.02,
    time_limit: float = 30.0,
    clearance: float = 0.05,
    workers: int = 1,
    collect_traces: bool = False,
    recheck_margins: bool = False,
):
    """Scenario x method matrix; returns (metrics rows, trial rows, traces).

    The scenario set for a given agent count is shared across methods and
    fully determined by the master seed; aggregation order is fixed, so a
    single-worker run is reproducible end to end (wall times aside).
    """
    metrics_rows = []
    trial_rows = []
    traces = []
    for m in agent_counts:
        scenarios = [
            sample_scenario(
                system, m, derive_seed(master_seed, "scenario", m, i), clearance=clearance
            )
            for i in range(n_scenarios)
        ]
        for method in methods:
            jobs = [
                (
                    system,
                    scenarios[i],
                    method,
                    value_function,
                    plan_config,
                    sim_dt,
                    time_limit,
                    derive_seed(master_seed, "trial", m, i, method),
                    collect_traces,
                    recheck_margins,
                )
                for i in range(n_scenarios)
            ]
            if workers > 1:
                from concurrent.futures import ProcessPoolExecutor

                with ProcessPoolExecutor(max_workers=workers) as pool:
                    trials = list(pool.map(_run_single, jobs))
            else:
                trials = [_run_single(j) for j in jobs]
            faults = 0
            metrics_rows.append({**aggregate_metrics(method, m, trials), "faults": faults})
            for i, t in enumerate(trials):
                trial_rows.append(
                    {
                        "method": method,
                        "m": m,
                        "scenario": i,
                        "outcome": t.outcome,
                        "pl_mean": float(np.mean(t.path_lengths)),
                        "straight_line": float(np.mean(t.straight_line)),
                        "sim_time": t.sim_time,
                        "min_boundary": t.min_boundary,
                        "time_mean_ms": float(np.mean(t.plan_times) * 1e3)
                        if t.plan_times
                        else 0.0,
                        "min_plan_margin": t.min_plan_margin,
                        "margin_recheck_max_diff": t.margin_recheck_max_diff,
                    }
                )
                if collect_traces and t.trace is not None:
                    for row in t.trace:
                        traces.append({"method": method, "m": m, "scenario": i, **row})
    return metrics_rows, trial_rows, traces
