"""Benchmark two-agent dynamical systems.

Each system bundles the pieces the solver, the value-function trainer and
the planner need: joint dynamics, a collision boundary function l(x) whose
sub-zero level set is the collision set, the closed-form max-min
Hamiltonian over box-bounded controls, the bang-bang optimal controls, and
a state symmetry map (an involution) with the half-space it folds onto.

Conventions:
  * the joint state stacks the planning agent first, so block one of the
    costate drives the evader controls and block two the adversary;
  * angular coordinates live in [-pi, pi) and are wrapped on entry;
  * all operations are pure and vectorized over leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import segment_distance, segment_distance_with_gradients

TWO_PI = 2.0 * np.pi


def wrap_angles(x, mask):
    """Wrap the masked coordinates of x into [-pi, pi).

    In-range values pass through bit-identically (a mod round-trip would
    perturb them by an ulp, which breaks exact symmetry folding).
    """
    x = np.asarray(x, dtype=float)
    if not np.any(mask):
        return x
    out = x.copy()
    w = out[..., mask]
    off = (w < -np.pi) | (w >= np.pi)
    if np.any(off):
        w = w.copy()
        w[off] = np.mod(w[off] + np.pi, TWO_PI) - np.pi
    out[..., mask] = w
    return out


def _xp(a):
    """Array namespace of `a`: torch for tensors, numpy otherwise."""
    if type(a).__module__.split(".")[0] == "torch":
        import torch

        return torch
    return np


def _col(a, i):
    """Component i of a stacked array or of a sequence of components."""
    if isinstance(a, (list, tuple)):
        return a[i]
    return a[..., i]


def _concat_pair(a, b):
    """Stack two agent-state arrays along the last axis, broadcasting."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    lead = np.broadcast_shapes(a.shape[:-1], b.shape[:-1])
    out = np.empty(lead + (a.shape[-1] + b.shape[-1],))
    out[..., : a.shape[-1]] = a
    out[..., a.shape[-1] :] = b
    return out


class System:
    """Base class; subclasses fill in the per-system closed forms."""

    kind: str = ""
    joint_dim: int = 0
    agent_dim: int = 0
    control_dim: int = 0
    # True when the agent state integrates its control directly (single
    # integrator); planners exploit the resulting quadratic cost structure.
    velocity_controlled: bool = False

    control_bound: float
    horizon: float
    state_lo: np.ndarray
    state_hi: np.ndarray
    periodic_mask: np.ndarray
    agent_periodic_mask: np.ndarray
    symmetry_signs: np.ndarray

    # -- dynamics ---------------------------------------------------------

    def flow(self, x, u, d):
        """Joint state derivative g(x, u, d); controls are bound-checked."""
        raise NotImplementedError

    def agent_flow(self, x_agent, u):
        """Single-agent state derivative under its own control."""
        raise NotImplementedError

    def propagate_agent(self, x_agent, u, dt, bounds=None):
        """Explicit Euler step of one agent.

        Angles wrap; if `bounds` (a (dim, 2) array) is given, non-periodic
        coordinates are clamped into it. Returns (state, clamped) where
        `clamped` flags whether any clamp fired.
        """
        if dt <= 0.0:
            raise ValueError("dt must be positive")
        self.check_control(u)
        x = np.asarray(x_agent, dtype=float) + dt * self.agent_flow(x_agent, u)
        x = wrap_angles(x, self.agent_periodic_mask)
        clamped = False
        if bounds is not None:
            bounds = np.asarray(bounds, dtype=float)
            free = ~self.agent_periodic_mask
            lo, hi = bounds[:, 0], bounds[:, 1]
            before = x[..., free]
            after = np.clip(before, lo[free], hi[free])
            clamped = bool(np.any(after != before))
            x = x.copy()
            x[..., free] = after
        return x, clamped

    def joint_state(self, x_self, x_other):
        """Joint state (planning agent first) from two agent states."""
        raise NotImplementedError

    # -- boundary / Hamiltonian -------------------------------------------

    def boundary(self, x):
        """Collision boundary value l(x); negative inside the collision set."""
        raise NotImplementedError

    def boundary_gradient(self, x):
        """Gradient of l; at non-smooth points the active-piece gradient."""
        raise NotImplementedError

    def hamiltonian(self, x, p):
        """Closed-form max_u min_d <p, g(x, u, d)>.

        Accepts numpy arrays or torch tensors for `p` (and `x` where it
        matters), so the same expression serves the grid solver, the
        training loss and the planner.
        """
        raise NotImplementedError

    def optimal_controls(self, x, p):
        """Bang-bang (u*, d*) attaining the Hamiltonian; zero at sign ties."""
        raise NotImplementedError

    def lf_alphas(self):
        """Per-dimension bounds on |dH/dp_i| over the state box."""
        raise NotImplementedError

    # -- symmetry -----------------------------------------------------------

    def symmetry_map(self, x):
        """Involution f with l(f(x)) = l(x) and an invariant Hamiltonian."""
        raise NotImplementedError

    def in_train_region(self, x):
        """Mask of states in the half-space kept for training."""
        raise NotImplementedError

    def validate_symmetry(self, n: int, seed: int, tol: float = 1e-9) -> dict:
        """Numerically check the symmetry premises on random (x, p) pairs.

        Returns max violations of l(x) = l(f(x)) and of Hamiltonian
        invariance under the costate sign map; flags the system if either
        exceeds `tol` (guards against a misconfigured map).
        """
        if n < 1:
            raise ValueError("n must be >= 1")
        rng = np.random.default_rng(seed)
        x = self.sample_states(rng, n)
        p = rng.standard_normal((n, self.joint_dim))
        fx = self.symmetry_map(x)
        bval = np.max(np.abs(self.boundary(x) - self.boundary(fx)))
        fp = p * self.symmetry_signs
        hval = np.max(np.abs(self.hamiltonian(x, p) - self.hamiltonian(fx, fp)))
        return {
            "n": n,
            "max_boundary_violation": float(bval),
            "max_hamiltonian_violation": float(hval),
            "symmetric": bool(bval <= tol and hval <= tol),
        }

    # -- helpers ------------------------------------------------------------

    def wrap(self, x):
        return wrap_angles(x, self.periodic_mask)

    def wrap_agent_states(self, x):
        return wrap_angles(x, self.agent_periodic_mask)

    def sample_states(self, rng: np.random.Generator, n: int, train_only: bool = False):
        lo = self.state_lo.copy()
        hi = self.state_hi
        if train_only:
            lo = np.where(self._train_lo_mask(), 0.0, lo)
        return rng.uniform(lo, hi, size=(n, self.joint_dim))

    def _train_lo_mask(self):
        return np.zeros(self.joint_dim, dtype=bool)

    def check_control(self, u, bound: Optional[float] = None):
        bound = self.control_bound if bound is None else bound
        u = np.asarray(u, dtype=float)
        if np.any(np.abs(u) > bound + 1e-9):
            raise ValueError(
                f"control exceeds bound {bound}: max |u| = {np.max(np.abs(u))}"
            )
        return u

    def goal_delta(self, x_agent, goal):
        """Goal error in the agent state space, wrapped on angular dims."""
        delta = np.asarray(goal, dtype=float) - np.asarray(x_agent, dtype=float)
        mask = self.agent_periodic_mask
        if np.any(mask):
            delta = delta.copy()
            delta[..., mask] = np.mod(delta[..., mask] + np.pi, TWO_PI) - np.pi
        return delta

    @property
    def params(self) -> dict:
        raise NotImplementedError

    def to_config(self) -> dict:
        cfg = {"kind": self.kind}
        cfg.update(self.params)
        return cfg

    def __repr__(self):
        inner = ", ".join(f"{k}={v}" for k, v in self.params.items())
        return f"{type(self).__name__}({inner})"


@dataclass(frozen=True)
class ParticleSystem(System):
    """Two velocity-controlled point agents with circular footprints.

    Joint state (x1, y1, x2, y2); each agent's planar velocity is its
    control, box-bounded by `control_bound`. The boundary function is the
    center distance minus two radii, and the max-min game exactly cancels,
    so l itself solves the safety problem at every time.
    """

    radius: float = 0.1
    control_bound: float = 1.0
    horizon: float = 1.0
    position_bound: float = 1.0

    kind = "particle"
    joint_dim = 4
    agent_dim = 2
    control_dim = 2
    velocity_controlled = True

    def __post_init__(self):
        if min(self.radius, self.control_bound, self.horizon, self.position_bound) <= 0:
            raise ValueError("particle parameters must be positive")

    @property
    def state_lo(self):
        return np.full(4, -self.position_bound)

    @property
    def state_hi(self):
        return np.full(4, self.position_bound)

    @property
    def periodic_mask(self):
        return np.zeros(4, dtype=bool)

    @property
    def agent_periodic_mask(self):
        return np.zeros(2, dtype=bool)

    @property
    def symmetry_signs(self):
        return np.ones(4)

    @property
    def params(self):
        return {
            "radius": self.radius,
            "control_bound": self.control_bound,
            "horizon": self.horizon,
            "position_bound": self.position_bound,
        }

    def flow(self, x, u, d):
        u = self.check_control(u)
        d = self.check_control(d)
        x = np.asarray(x, dtype=float)
        out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (4,)))
        out[..., 0:2] = u
        out[..., 2:4] = d
        return out

    def agent_flow(self, x_agent, u):
        return np.broadcast_to(np.asarray(u, dtype=float), np.shape(x_agent)).copy()

    def joint_state(self, x_self, x_other):
        return _concat_pair(x_self, x_other)

    def boundary(self, x):
        x = np.asarray(x, dtype=float)
        diff = x[..., 0:2] - x[..., 2:4]
        return np.sqrt(np.sum(diff * diff, axis=-1)) - 2.0 * self.radius

    def boundary_gradient(self, x):
        x = np.asarray(x, dtype=float)
        diff = x[..., 0:2] - x[..., 2:4]
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        safe = np.where(dist > 0.0, dist, 1.0)
        n = np.where(dist[..., None] > 0.0, diff / safe[..., None], 0.0)
        return np.concatenate([n, -n], axis=-1)

    def hamiltonian(self, x, p):
        ub = self.control_bound
        return ub * (abs(_col(p, 0)) + abs(_col(p, 1))) - ub * (
            abs(_col(p, 2)) + abs(_col(p, 3))
        )

    def optimal_controls(self, x, p):
        p = np.asarray(p, dtype=float)
        u = self.control_bound * np.sign(p[..., 0:2])
        d = -self.control_bound * np.sign(p[..., 2:4])
        return u, d

    def lf_alphas(self):
        return np.full(4, self.control_bound)

    def symmetry_map(self, x):
        return np.asarray(x, dtype=float).copy()

    def in_train_region(self, x):
        return np.ones(np.shape(x)[:-1], dtype=bool)


@dataclass(frozen=True)
class Air3DSystem(System):
    """Two constant-speed cars with bounded turn rates, in relative frame.

    State (x1, x2, x3): the adversary's position in the evader's body frame
    plus the relative heading. The evader's turn rate u and the adversary's
    d are both bounded by `turn_bound`. Collision is a disc of radius
    `collision_radius` around the origin of the relative frame.
    """

    evader_speed: float = 0.75
    pursuer_speed: float = 0.75
    turn_bound: float = 3.0
    collision_radius: float = 0.25
    horizon: float = 1.0
    position_bound: float = 1.0

    kind = "air3d"
    joint_dim = 3
    agent_dim = 3
    control_dim = 1

    def __post_init__(self):
        if min(
            self.evader_speed,
            self.pursuer_speed,
            self.turn_bound,
            self.collision_radius,
            self.horizon,
            self.position_bound,
        ) <= 0:
            raise ValueError("air3d parameters must be positive")

    @property
    def control_bound(self):
        return self.turn_bound

    @property
    def state_lo(self):
        return np.array([-self.position_bound, -self.position_bound, -np.pi])

    @property
    def state_hi(self):
        return np.array([self.position_bound, self.position_bound, np.pi])

    @property
    def periodic_mask(self):
        return np.array([False, False, True])

    @property
    def agent_periodic_mask(self):
        return np.array([False, False, True])

    @property
    def symmetry_signs(self):
        return np.array([1.0, -1.0, -1.0])

    @property
    def params(self):
        return {
            "evader_speed": self.evader_speed,
            "pursuer_speed": self.pursuer_speed,
            "turn_bound": self.turn_bound,
            "collision_radius": self.collision_radius,
            "horizon": self.horizon,
            "position_bound": self.position_bound,
        }

    def _controls_1d(self, u):
        u = np.asarray(u, dtype=float)
        if u.ndim and u.shape[-1] == 1:
            u = u[..., 0]
        return u

    def flow(self, x, u, d):
        u = self._controls_1d(self.check_control(u))
        d = self._controls_1d(self.check_control(d))
        x = np.asarray(x, dtype=float)
        x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
        out = np.empty(np.broadcast_shapes(x.shape, np.shape(u) + (3,)))
        out[..., 0] = -self.evader_speed + self.pursuer_speed * np.cos(x3) + u * x2
        out[..., 1] = self.pursuer_speed * np.sin(x3) - u * x1
        out[..., 2] = d - u
        return out

    def agent_flow(self, x_agent, u):
        # World-frame pose (x, y, heading) of one car; constant forward speed.
        x = np.asarray(x_agent, dtype=float)
        u = self._controls_1d(u)
        out = np.empty_like(x)
        out[..., 0] = self.evader_speed * np.cos(x[..., 2])
        out[..., 1] = self.evader_speed * np.sin(x[..., 2])
        out[..., 2] = u
        return out

    def joint_state(self, x_self, x_other):
        a = np.asarray(x_self, dtype=float)
        b = np.asarray(x_other, dtype=float)
        dx = b[..., 0] - a[..., 0]
        dy = b[..., 1] - a[..., 1]
        th = a[..., 2]
        c, s = np.cos(th), np.sin(th)
        rel = np.empty(np.broadcast_shapes(a.shape, b.shape))
        rel[..., 0] = c * dx + s * dy
        rel[..., 1] = -s * dx + c * dy
        rel[..., 2] = np.mod(b[..., 2] - th + np.pi, TWO_PI) - np.pi
        return rel

    def boundary(self, x):
        x = np.asarray(x, dtype=float)
        return np.hypot(x[..., 0], x[..., 1]) - self.collision_radius

    def boundary_gradient(self, x):
        x = np.asarray(x, dtype=float)
        r = np.hypot(x[..., 0], x[..., 1])
        safe = np.where(r > 0.0, r, 1.0)
        g = np.zeros_like(x)
        g[..., 0] = np.where(r > 0.0, x[..., 0] / safe, 0.0)
        g[..., 1] = np.where(r > 0.0, x[..., 1] / safe, 0.0)
        return g

    def hamiltonian(self, x, p):
        xp = _xp(p)
        x1, x2, x3 = _col(x, 0), _col(x, 1), _col(x, 2)
        p1, p2, p3 = _col(p, 0), _col(p, 1), _col(p, 2)
        drift = p1 * (-self.evader_speed + self.pursuer_speed * xp.cos(x3))
        drift = drift + p2 * (self.pursuer_speed * xp.sin(x3))
        u_coeff = x2 * p1 - x1 * p2 - p3
        return drift + self.turn_bound * abs(u_coeff) - self.turn_bound * abs(p3)

    def optimal_controls(self, x, p):
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        u_coeff = x[..., 1] * p[..., 0] - x[..., 0] * p[..., 1] - p[..., 2]
        u = (self.turn_bound * np.sign(u_coeff))[..., None]
        d = (-self.turn_bound * np.sign(p[..., 2]))[..., None]
        return u, d

    def lf_alphas(self):
        b = self.position_bound
        return np.array(
            [
                self.evader_speed + self.pursuer_speed + self.turn_bound * b,
                self.pursuer_speed + self.turn_bound * b,
                2.0 * self.turn_bound,
            ]
        )

    def symmetry_map(self, x):
        out = np.asarray(x, dtype=float).copy()
        out[..., 1] = -out[..., 1]
        out[..., 2] = -out[..., 2]
        return wrap_angles(out, self.periodic_mask)

    def in_train_region(self, x):
        return np.asarray(x)[..., 1] >= 0.0

    def _train_lo_mask(self):
        return np.array([False, True, False])


@dataclass(frozen=True)
class SimpleArmSystem(System):
    """Two planar two-link arms on fixed bases, joint-velocity controlled.

    Joint state (q1, q2) for the first arm then (q1, q2) for the second;
    all angles are periodic and elbow angles are relative to the shoulder.
    Each arm's angles are expressed in its own base frame, with the second
    frame mirrored so the setup is symmetric under swapping the two arms;
    that lets either arm plan with the same value function by putting
    itself in the first block. Links are capsules of radius
    `capsule_radius`; the boundary is the minimum distance over the four
    inter-arm link pairs minus the capsule diameter.
    """

    base_offset: float = 0.5
    link_lengths: tuple = (0.4, 0.4)
    capsule_radius: float = 0.05
    control_bound: float = 1.0
    horizon: float = 1.0

    kind = "simple_arm"
    joint_dim = 4
    agent_dim = 2
    control_dim = 2
    velocity_controlled = True

    def __post_init__(self):
        if min(
            self.base_offset,
            min(self.link_lengths),
            self.capsule_radius,
            self.control_bound,
            self.horizon,
        ) <= 0:
            raise ValueError("arm parameters must be positive")
        if len(self.link_lengths) != 2:
            raise ValueError("exactly two link lengths expected")

    @property
    def state_lo(self):
        return np.full(4, -np.pi)

    @property
    def state_hi(self):
        return np.full(4, np.pi)

    @property
    def periodic_mask(self):
        return np.ones(4, dtype=bool)

    @property
    def agent_periodic_mask(self):
        return np.ones(2, dtype=bool)

    @property
    def symmetry_signs(self):
        return -np.ones(4)

    @property
    def params(self):
        return {
            "base_offset": self.base_offset,
            "link_lengths": list(self.link_lengths),
            "capsule_radius": self.capsule_radius,
            "control_bound": self.control_bound,
            "horizon": self.horizon,
        }

    def flow(self, x, u, d):
        u = self.check_control(u)
        d = self.check_control(d)
        x = np.asarray(x, dtype=float)
        out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (4,)))
        out[..., 0:2] = u
        out[..., 2:4] = d
        return out

    def agent_flow(self, x_agent, u):
        return np.broadcast_to(np.asarray(u, dtype=float), np.shape(x_agent)).copy()

    def joint_state(self, x_self, x_other):
        return _concat_pair(x_self, x_other)

    def _arm_points(self, q, arm: int):
        """Base, elbow and tip points of one arm; q is (..., 2)."""
        l1, l2 = self.link_lengths
        sgn = 1.0 if arm == 0 else -1.0
        base_x = -self.base_offset if arm == 0 else self.base_offset
        phi1 = q[..., 0]
        phi2 = q[..., 0] + q[..., 1]
        p0 = np.zeros(q.shape[:-1] + (2,))
        p0[..., 0] = base_x
        p1 = np.stack([base_x + sgn * l1 * np.cos(phi1), l1 * np.sin(phi1)], axis=-1)
        p2 = p1 + np.stack([sgn * l2 * np.cos(phi2), l2 * np.sin(phi2)], axis=-1)
        return p0, p1, p2

    def _arm_jacobians(self, q, arm: int):
        """d(point)/d(angle) for the elbow and tip; each (..., 2 xy)."""
        l1, l2 = self.link_lengths
        sgn = 1.0 if arm == 0 else -1.0
        phi1 = q[..., 0]
        phi2 = q[..., 0] + q[..., 1]
        # Derivative of the direction vector (sgn*cos, sin) wrt its angle.
        j1 = np.stack([-sgn * l1 * np.sin(phi1), l1 * np.cos(phi1)], axis=-1)
        j2 = np.stack([-sgn * l2 * np.sin(phi2), l2 * np.cos(phi2)], axis=-1)
        return j1, j2

    def _segments(self, x):
        x = np.asarray(x, dtype=float)
        a0, a1, a2 = self._arm_points(x[..., 0:2], 0)
        b0, b1, b2 = self._arm_points(x[..., 2:4], 1)
        segs_a = [(a0, a1), (a1, a2)]
        segs_b = [(b0, b1), (b1, b2)]
        return segs_a, segs_b

    def link_pair_distances(self, x):
        """Distances of the four inter-arm link pairs, stacked last."""
        segs_a, segs_b = self._segments(x)
        dists = [
            segment_distance(sa[0], sa[1], sb[0], sb[1])
            for sa in segs_a
            for sb in segs_b
        ]
        return np.stack(dists, axis=-1)

    def boundary(self, x):
        return np.min(self.link_pair_distances(x), axis=-1) - 2.0 * self.capsule_radius

    def boundary_gradient(self, x):
        """Gradient through the closest link pair (first pair wins ties)."""
        x = np.asarray(x, dtype=float)
        qa = x[..., 0:2]
        qb = x[..., 2:4]
        segs_a, segs_b = self._segments(x)
        ja1, ja2 = self._arm_jacobians(qa, 0)
        jb1, jb2 = self._arm_jacobians(qb, 1)
        zeros = np.zeros_like(ja1)
        # d(endpoint)/d(q1), d(endpoint)/d(q2) for each segment endpoint.
        seg_jac_a = [
            ((zeros, zeros), (ja1, zeros)),
            ((ja1, zeros), (ja1 + ja2, ja2)),
        ]
        seg_jac_b = [
            ((zeros, zeros), (jb1, zeros)),
            ((jb1, zeros), (jb1 + jb2, jb2)),
        ]
        dists = []
        grads = []
        for i, sa in enumerate(segs_a):
            for j, sb in enumerate(segs_b):
                dist, gp1, gp2, gq1, gq2 = segment_distance_with_gradients(
                    sa[0], sa[1], sb[0], sb[1]
                )
                (s1a, s1b), (e1a, e1b) = seg_jac_a[i]
                (s2a, s2b), (e2a, e2b) = seg_jac_b[j]
                g = np.stack(
                    [
                        np.sum(gp1 * s1a + gp2 * e1a, axis=-1),
                        np.sum(gp1 * s1b + gp2 * e1b, axis=-1),
                        np.sum(gq1 * s2a + gq2 * e2a, axis=-1),
                        np.sum(gq1 * s2b + gq2 * e2b, axis=-1),
                    ],
                    axis=-1,
                )
                dists.append(dist)
                grads.append(g)
        dists = np.stack(dists, axis=-1)
        grads = np.stack(grads, axis=-2)
        active = np.argmin(dists, axis=-1)
        return np.take_along_axis(grads, active[..., None, None], axis=-2)[..., 0, :]

    def hamiltonian(self, x, p):
        ub = self.control_bound
        return ub * (abs(_col(p, 0)) + abs(_col(p, 1))) - ub * (
            abs(_col(p, 2)) + abs(_col(p, 3))
        )

    def optimal_controls(self, x, p):
        p = np.asarray(p, dtype=float)
        u = self.control_bound * np.sign(p[..., 0:2])
        d = -self.control_bound * np.sign(p[..., 2:4])
        return u, d

    def lf_alphas(self):
        return np.full(4, self.control_bound)

    def symmetry_map(self, x):
        return wrap_angles(-np.asarray(x, dtype=float), self.periodic_mask)

    def in_train_region(self, x):
        return np.asarray(x)[..., 0] >= 0.0

    def _train_lo_mask(self):
        return np.array([True, False, False, False])


_SYSTEM_CLASSES = {
    "particle": ParticleSystem,
    "air3d": Air3DSystem,
    "simple_arm": SimpleArmSystem,
}


def make_system(config) -> System:
    """Build a system from a config mapping {"kind": ..., **params}.

    Unknown parameter keys are rejected; omitted ones use the defaults.
    """
    if isinstance(config, System):
        return config
    if isinstance(config, str):
        config = {"kind": config}
    cfg = dict(config)
    kind = cfg.pop("kind", None)
    if kind not in _SYSTEM_CLASSES:
        raise ValueError(f"unknown system kind {kind!r}; expected one of {sorted(_SYSTEM_CLASSES)}")
    cls = _SYSTEM_CLASSES[kind]
    if "link_lengths" in cfg:
        cfg["link_lengths"] = tuple(cfg["link_lengths"])
    try:
        return cls(**cfg)
    except TypeError as exc:
        raise ValueError(f"bad parameters for system {kind!r}: {exc}") from exc
