"""Decentralized one-step trajectory optimizer with a value-margin guard.

Each planning step picks a constant control for the next `t_plan` seconds
that minimizes a quadratic goal-tracking cost subject to, for every other
agent, a safety margin: the learned value of the joint state along the
planned horizon must exceed a buffer epsilon. Other agents are assumed
adversarial; their controls are inferred from the value gradient (the
minimizing side of the game) and re-inferred at every substep as states
evolve. Infeasibility or timeout falls back to pure evasion against the
most threatening agent.

The solver is a multistart projected-gradient descent on an exact-penalty
objective with central-difference gradients over the (at most 2-D) control
box. All evaluations are batched; several agents' independent steps can be
solved in one lockstep batch with results identical to solving them one at
a time.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, asdict

import numpy as np

from .seeding import rng_for
from .systems import System

STATUS_OPTIMAL = "optimal"
STATUS_FEASIBLE = "feasible_suboptimal"
STATUS_FAIL_SAFE = "fail_safe"


@dataclass
class PlanConfig:
    """Hyperparameters of one planning step."""

    t_plan: float = 0.2
    t_safe: float = 0.5
    epsilon: float = 0.12
    dt: float = 0.05
    goal_weight: float = 1.0
    control_weight: float = 0.1
    max_iterations: int = 15
    multistarts: int = 3
    timeout: float | None = None
    goal_tolerance: float = 0.05
    adversary_mode: str = "per_substep"
    # "path" guards the margin at every substep of the horizon; "terminal"
    # only at its end. Terminal-only constraints cannot see a mid-horizon
    # crossing, so "path" is the safe default.
    margin_mode: str = "path"
    penalty_levels: tuple = (1e2, 1e4)
    fd_step: float = 1e-4
    init_step: float = 0.25
    stall_tolerance: float = 1e-8

    def validate(self, system: System) -> None:
        T = system.horizon
        if not (0.0 < self.t_plan < T and 0.0 < self.t_safe < T):
            raise ValueError(f"need 0 < t_plan, t_safe < horizon {T}")
        if self.epsilon < 0.0:
            raise ValueError("epsilon must be >= 0")
        n_sub = self.t_plan / self.dt
        if self.dt <= 0.0 or abs(n_sub - round(n_sub)) > 1e-9:
            raise ValueError("dt must be positive and divide t_plan")
        if self.adversary_mode not in ("per_substep", "fixed"):
            raise ValueError("adversary_mode must be 'per_substep' or 'fixed'")
        if self.margin_mode not in ("path", "terminal"):
            raise ValueError("margin_mode must be 'path' or 'terminal'")
        if self.max_iterations < 1 or self.multistarts < 0:
            raise ValueError("bad optimizer budget")

    @property
    def n_substeps(self) -> int:
        return int(round(self.t_plan / self.dt))

    def effective_timeout(self) -> float:
        # Planning must fit inside the execution horizon it overlaps with.
        return 0.8 * self.t_plan if self.timeout is None else self.timeout

    def to_dict(self) -> dict:
        d = asdict(self)
        d["penalty_levels"] = list(self.penalty_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PlanConfig":
        d = dict(d)
        if "penalty_levels" in d:
            d["penalty_levels"] = tuple(d["penalty_levels"])
        return cls(**d)


@dataclass
class PlanProblem:
    """One agent's planning inputs: own state, perceived others, goal."""

    x_self: np.ndarray
    others: np.ndarray
    goal: np.ndarray
    config: PlanConfig
    value_function: object
    system: System

    def __post_init__(self):
        self.x_self = np.asarray(self.x_self, dtype=float)
        self.goal = np.asarray(self.goal, dtype=float)
        self.others = np.asarray(self.others, dtype=float).reshape(
            -1, self.system.agent_dim
        )


@dataclass
class PlanResult:
    control: np.ndarray
    status: str
    margins: np.ndarray
    cost: float
    wall_time: float = 0.0
    n_rollouts: int = 0

    @property
    def fail_safe(self) -> bool:
        return self.status == STATUS_FAIL_SAFE


def _adversary_batch(vf, system: System, tau: float, joint_flat: np.ndarray):
    """Worst-case other-agent controls from the value gradient."""
    _, _, G = vf.evaluate_batch(tau, joint_flat)
    _, d = system.optimal_controls(joint_flat, G)
    return d


def infer_adversary_control(vf, system: System, tau: float, x_self, x_other):
    """Adversarial control of one other agent at game time tau."""
    joint = system.joint_state(
        np.asarray(x_self, dtype=float), np.asarray(x_other, dtype=float)
    )
    return _adversary_batch(vf, system, tau, joint[None, :])[0]


def _step_agents(system: System, X, U, dt: float):
    return system.wrap_agent_states(X + dt * system.agent_flow(X, U))


def _goal_cost(system: System, X, goal, weight: float):
    delta = system.goal_delta(X, goal)
    return weight * np.sum(delta * delta, axis=-1)


class _RolloutEngine:
    """Batched constant-control rollouts for a group of planning problems.

    Rows are (agent, candidate-control) pairs: `agent` indexes into the
    stacked per-agent states/goals, so one engine serves a whole replan
    cycle.
    """

    def __init__(self, system, vf, cfg: PlanConfig, x_self, others, goals):
        self.system = system
        self.vf = vf
        self.cfg = cfg
        self.x_self = np.asarray(x_self, dtype=float)
        self.others = np.asarray(others, dtype=float)
        self.goals = np.asarray(goals, dtype=float)
        self.tau = system.horizon - cfg.t_plan
        self.t_margin = system.horizon - cfg.t_safe
        self.n_rollouts = 0

    def run(self, U: np.ndarray, agent: np.ndarray):
        """Terminal states, integral cost and margins for controls U (R, c).

        The goal-tracking term uses the trapezoid rule; the control-effort
        term is constant over the horizon. Adversary controls are
        re-inferred each substep (or frozen at the first in 'fixed' mode)
        at game time tau = T - t_plan. Margins are the value at game time
        T - t_safe of the pairwise joint states, minimized over the path
        or taken at the terminal state per `margin_mode`.
        """
        cfg = self.cfg
        system = self.system
        R = len(U)
        k = self.others.shape[1]
        self.n_rollouts += R
        X1 = self.x_self[agent].copy()
        OTH = self.others[agent].copy()
        goal = self.goals[agent]
        acc = 0.5 * _goal_cost(system, X1, goal, cfg.goal_weight)
        margins = np.full((R, k), np.inf)
        path_margins = cfg.margin_mode == "path"
        D = None
        for s in range(cfg.n_substeps):
            if k and (D is None or cfg.adversary_mode == "per_substep"):
                joint = system.joint_state(X1[:, None, :], OTH)
                d_flat = _adversary_batch(
                    self.vf, system, self.tau, joint.reshape(R * k, -1)
                )
                D = d_flat.reshape(R, k, -1)
            X1 = _step_agents(system, X1, U, cfg.dt)
            if k:
                OTH = _step_agents(system, OTH, D, cfg.dt)
            w = 0.5 if s == cfg.n_substeps - 1 else 1.0
            acc += w * _goal_cost(system, X1, goal, cfg.goal_weight)
            if k and (path_margins or s == cfg.n_substeps - 1):
                joint = system.joint_state(X1[:, None, :], OTH).reshape(R * k, -1)
                vals = self.vf.value_batch(self.t_margin, joint).reshape(R, k)
                np.minimum(margins, vals, out=margins)
        cost = cfg.dt * acc + cfg.t_plan * cfg.control_weight * np.sum(U * U, axis=-1)
        if k == 0:
            margins = np.zeros((R, 0))
        return X1, OTH, cost, margins

    def penalty(self, U: np.ndarray, agent: np.ndarray, mu: float):
        """Exact-penalty objective plus the pieces it was built from."""
        _, _, cost, margins = self.run(U, agent)
        if margins.shape[1]:
            viol = np.maximum(0.0, self.cfg.epsilon - margins)
            pen = cost + mu * np.sum(viol * viol, axis=-1)
        else:
            pen = cost
        return pen, cost, margins


def _engine_for(problem: PlanProblem) -> _RolloutEngine:
    return _RolloutEngine(
        problem.system,
        problem.value_function,
        problem.config,
        problem.x_self[None, :],
        problem.others[None, :, :],
        problem.goal[None, :],
    )


def rollout(system, value_function, x_self, u, others, goal, config: PlanConfig):
    """Single-control rollout: (terminal self, terminal others, cost)."""
    problem = PlanProblem(
        x_self=x_self,
        others=others,
        goal=goal,
        config=config,
        value_function=value_function,
        system=system,
    )
    engine = _engine_for(problem)
    X1, OTH, cost, _ = engine.run(
        np.asarray(u, dtype=float)[None, :], np.zeros(1, dtype=int)
    )
    return X1[0], OTH[0], float(cost[0])


def evaluate_margins(problem: PlanProblem, u) -> np.ndarray:
    """Margins the constraint would see for control u (for re-checking)."""
    engine = _engine_for(problem)
    _, _, _, margins = engine.run(
        np.asarray(u, dtype=float)[None, :], np.zeros(1, dtype=int)
    )
    return margins[0]


def goal_pointing_control(system: System, x_self, goal, t_plan: float):
    """Control that would reach the goal within t_plan, clipped to the box."""
    delta = system.goal_delta(x_self, goal)
    return np.clip(delta / t_plan, -system.control_bound, system.control_bound)


def unconstrained_minimizer(system: System, x_self, goal, cfg: PlanConfig):
    """Exact cost minimizer over the box for velocity-controlled agents.

    With x(t) = x + u*t the cost separates per control component, so the
    clipped unconstrained minimizer of
    integral gw*||delta - u*t||^2 dt + t_plan*wu*||u||^2 is the box
    optimum. Returns None when that structure does not apply.
    """
    if not system.velocity_controlled:
        return None
    delta = system.goal_delta(x_self, goal)
    tp = cfg.t_plan
    denom = (2.0 / 3.0) * cfg.goal_weight * tp * tp + 2.0 * cfg.control_weight
    u = delta * (cfg.goal_weight * tp) / denom
    return np.clip(u, -system.control_bound, system.control_bound)


def _fail_safe_batch(vf, system: System, x_self, others, t_safe: float):
    """Pure-evasion controls, one per agent row; ties pick the lowest index."""
    A, k = others.shape[0], others.shape[1]
    if k == 0:
        return np.zeros((A, system.control_dim))
    joint = system.joint_state(x_self[:, None, :], others).reshape(A * k, -1)
    t_margin = system.horizon - t_safe
    V, _, G = vf.evaluate_batch(t_margin, joint)
    worst = np.argmin(V.reshape(A, k), axis=1)
    rows = worst + np.arange(A) * k
    u, _ = system.optimal_controls(joint[rows], G[rows])
    return u


def fail_safe_control(vf, system: System, x_self, others, t_safe: float):
    """Pure evasion against the agent with the lowest safety value."""
    others = np.asarray(others, dtype=float).reshape(-1, system.agent_dim)
    return _fail_safe_batch(
        vf, system, np.asarray(x_self, dtype=float)[None, :], others[None, :, :], t_safe
    )[0]


def solve_opt_batch(problems: list, seeds: list) -> list:
    """Solve several same-shaped planning steps in one lockstep batch.

    All problems must share the system, config and value function, and see
    the same number of other agents. Results equal solving each problem on
    its own with its seed: every update is row-local, an agent's rows
    freeze once its descent stalls, and the penalty weight escalates only
    for agents still lacking a feasible control.
    """
    if not problems:
        return []
    cfg = problems[0].config
    system = problems[0].system
    vf = problems[0].value_function
    cfg.validate(system)
    A = len(problems)
    k = len(problems[0].others)
    for p in problems:
        if p.system is not system or p.config is not cfg or p.value_function is not vf:
            raise ValueError("batched problems must share system/config/value function")
        if len(p.others) != k:
            raise ValueError("batched problems must see the same number of others")
    ub = system.control_bound
    cdim = system.control_dim
    deadline = time.monotonic() + cfg.effective_timeout()

    x_self = np.stack([p.x_self for p in problems])
    others = (
        np.stack([p.others for p in problems])
        if k
        else np.zeros((A, 0, system.agent_dim))
    )
    goals = np.stack([p.goal for p in problems])
    engine = _RolloutEngine(system, vf, cfg, x_self, others, goals)

    best_u = [None] * A
    best_cost = np.full(A, np.inf)
    best_margins = [None] * A

    def consider(cost, margins, controls, agent):
        if margins.shape[1]:
            feasible = np.all(margins > cfg.epsilon, axis=-1)
        else:
            feasible = np.ones(len(controls), dtype=bool)
        for r in np.flatnonzero(feasible):
            a = agent[r]
            if cost[r] < best_cost[a]:
                best_cost[a] = float(cost[r])
                best_u[a] = controls[r].copy()
                best_margins[a] = margins[r].copy()

    # Fast path: when the exact box-constrained cost minimizer is known in
    # closed form and already satisfies every margin, it solves the whole
    # constrained step and no search is needed for that agent.
    fast_done = np.zeros(A, dtype=bool)
    u_exact = None
    if system.velocity_controlled:
        u_exact = np.stack(
            [
                unconstrained_minimizer(system, p.x_self, p.goal, cfg)
                for p in problems
            ]
        )
        _, _, cost0, margins0 = engine.run(u_exact, np.arange(A))
        consider(cost0, margins0, u_exact, np.arange(A))
        if k:
            fast_done = np.all(margins0 > cfg.epsilon, axis=-1)
        else:
            fast_done = np.ones(A, dtype=bool)

    fail_safe_u = _fail_safe_batch(vf, system, x_self, others, cfg.t_safe)

    active = np.flatnonzero(~fast_done)
    timed_out = False
    if len(active):
        starts = [
            np.stack(
                [
                    goal_pointing_control(system, problems[a].x_self, problems[a].goal, cfg.t_plan)
                    for a in active
                ]
            ),
            fail_safe_u[active],
        ]
        if u_exact is not None:
            starts.insert(0, u_exact[active])
        if cfg.multistarts:
            rand = np.stack(
                [
                    rng_for(seeds[a], "multistart").uniform(-ub, ub, size=(cfg.multistarts, cdim))
                    for a in active
                ],
                axis=1,
            )
            starts.extend(rand)
        U = np.clip(np.stack(starts, axis=1).reshape(-1, cdim), -ub, ub)
        B = len(starts)
        agent = np.repeat(active[:, None], B, axis=1).reshape(-1)

        h = cfg.fd_step * ub
        eta = np.full(len(U), cfg.init_step * ub)
        for level, mu in enumerate(cfg.penalty_levels):
            need = np.array([best_u[a] is None for a in active])
            if level > 0 and not np.any(need):
                break
            f_cur, cost, margins = engine.penalty(U, agent, mu)
            consider(cost, margins, U, agent)
            row_active = np.ones(len(U), dtype=bool)
            stall = np.zeros(A, dtype=int)
            for _ in range(cfg.max_iterations):
                if time.monotonic() > deadline:
                    timed_out = True
                    break
                if not np.any(row_active):
                    break
                # Batched central differences over all rows and control dims.
                pert = np.repeat(U[None, :, :], 2 * cdim, axis=0)
                for j in range(cdim):
                    pert[2 * j, :, j] += h
                    pert[2 * j + 1, :, j] -= h
                agent_rep = np.tile(agent, 2 * cdim)
                f_pert, _, _ = engine.penalty(pert.reshape(-1, cdim), agent_rep, mu)
                f_pert = f_pert.reshape(2 * cdim, len(U))
                grad = np.stack(
                    [
                        (f_pert[2 * j] - f_pert[2 * j + 1]) / (2 * h)
                        for j in range(cdim)
                    ],
                    axis=-1,
                )
                cand = np.clip(U - eta[:, None] * grad, -ub, ub)
                f_cand, cost_c, margins_c = engine.penalty(cand, agent, mu)
                consider(cost_c, margins_c, cand, agent)
                improved = (f_cand < f_cur - cfg.stall_tolerance) & row_active
                U = np.where(improved[:, None], cand, U)
                f_cur = np.where(improved, f_cand, f_cur)
                eta = np.where(improved, eta * 1.2, np.where(row_active, eta * 0.5, eta))
                # An agent whose starts all stopped improving twice in a row
                # is converged at this penalty level; freeze its rows.
                imp_agents = np.zeros(A, dtype=bool)
                np.logical_or.at(imp_agents, agent, improved)
                stall = np.where(imp_agents, 0, stall + 1)
                row_active &= stall[agent] < 2
            if timed_out:
                break

    fallback_agents = np.flatnonzero([u is None for u in best_u])
    if len(fallback_agents):
        _, _, cost_fs, margins_fs = engine.run(
            fail_safe_u[fallback_agents], fallback_agents
        )
    results = []
    fb_pos = {a: i for i, a in enumerate(fallback_agents)}
    for a in range(A):
        if best_u[a] is None:
            i = fb_pos[a]
            results.append(
                PlanResult(
                    control=fail_safe_u[a],
                    status=STATUS_FAIL_SAFE,
                    margins=margins_fs[i],
                    cost=float(cost_fs[i]),
                    n_rollouts=engine.n_rollouts,
                )
            )
        else:
            status = STATUS_FEASIBLE if timed_out else STATUS_OPTIMAL
            results.append(
                PlanResult(
                    control=best_u[a],
                    status=status,
                    margins=best_margins[a],
                    cost=float(best_cost[a]),
                    n_rollouts=engine.n_rollouts,
                )
            )
    return results


def solve_opt(problem: PlanProblem, seed: int = 0) -> PlanResult:
    """Multistart projected-gradient solve of one planning step.

    Starts are the closed-form cost minimizer (velocity-controlled
    systems), the goal-pointing control, the fail-safe control and
    `multistarts` random controls. Each start descends the penalty
    objective monotonically (steps are only accepted on improvement); the
    penalty weight escalates only while no feasible control has been
    found. Infeasibility and timeout are statuses, not errors.
    """
    return solve_opt_batch([problem], [seed])[0]


def plan_step(problem: PlanProblem, seed: int = 0) -> PlanResult:
    """solve_opt with wall-time accounting (the reported planning time)."""
    t0 = time.perf_counter()
    result = solve_opt(problem, seed=seed)
    result.wall_time = time.perf_counter() - t0
    return result


def plan_step_batch(problems: list, seeds: list) -> list:
    """Batched plan_step; per-agent wall time is the amortized batch time.

    The agents' optimizations are independent; batching only vectorizes
    the identical math, which is how the decentralized steps would run
    concurrently on separate agents.
    """
    t0 = time.perf_counter()
    results = solve_opt_batch(problems, seeds)
    per_agent = (time.perf_counter() - t0) / max(1, len(problems))
    for r in results:
        r.wall_time = per_agent
    return results
