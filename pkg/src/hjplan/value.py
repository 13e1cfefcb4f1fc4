"""Safety value functions: analytic, grid-backed and learned.

Three learned variants share one network class and differ in how the raw
output becomes V(t, x):

  * ``deepreach``   V = N(t, x); the terminal condition is a loss term.
  * ``bc``          V = l(x) + (T - t) * N(t, x); the factor (T - t) makes
                    V(T, .) = l exact for any parameters, so only the
                    time-dependent residual is learned.
  * ``bc_sym``      as ``bc``, trained on the symmetric half of the state
                    space only; queries outside it are folded through the
                    system's involution and gradients mapped back by its
                    (diagonal, +-1) Jacobian.

All evaluation is numpy and returns exact derivatives of the composite
expression (network backward sweep plus the closed-form boundary
gradient). Training mirrors the parameters into torch.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import (
    FileFormatError,
    HeaderError,
    ShapeMismatchError,
    SystemMismatchError,
    TrainingDivergedError,
)
from .network import SineNetwork, torch_forward
from .seeding import derive_seed, rng_for
from .systems import System, make_system

VARIANTS = ("deepreach", "bc", "bc_sym")

_CKPT_MAGIC = b"HJVN"
_CKPT_VERSION = 1


@dataclass
class EvalResult:
    """Value, time derivative and spatial gradient at one (t, x)."""

    value: float
    dv_dt: float
    grad: np.ndarray


class ValueFunctionBase:
    """Common query interface shared by all value functions."""

    system: System

    @property
    def horizon(self) -> float:
        return self.system.horizon

    def _check_time(self, t):
        if isinstance(t, float):
            if not -1e-9 <= t <= self.horizon + 1e-9:
                raise ValueError(f"t out of range [0, {self.horizon}]")
            return min(max(t, 0.0), self.horizon)
        t = np.asarray(t, dtype=float)
        if np.any(t < -1e-9) or np.any(t > self.horizon + 1e-9):
            raise ValueError(f"t out of range [0, {self.horizon}]")
        return np.clip(t, 0.0, self.horizon)

    def evaluate_batch(self, t, X):
        """(V, dV_dt, grad) for rows of X; t scalar or per-row."""
        raise NotImplementedError

    def evaluate(self, t: float, x) -> EvalResult:
        x = np.asarray(x, dtype=float)
        V, Vt, G = self.evaluate_batch(float(t), x[None, :])
        return EvalResult(value=float(V[0]), dv_dt=float(Vt[0]), grad=G[0])

    def value_batch(self, t, X) -> np.ndarray:
        return self.evaluate_batch(t, X)[0]

    def value(self, t: float, x) -> float:
        return float(self.value_batch(float(t), np.asarray(x, dtype=float)[None, :])[0])


class BoundaryValueFunction(ValueFunctionBase):
    """Time-independent value equal to the boundary function itself.

    Exact whenever the max-min game cancels (the particle system); also a
    useful conservative stand-in and test double elsewhere.
    """

    variant = "analytic"

    def __init__(self, system: System):
        self.system = system

    def evaluate_batch(self, t, X):
        X = np.asarray(X, dtype=float)
        self._check_time(t)
        V = self.system.boundary(X)
        G = self.system.boundary_gradient(X)
        return V, np.zeros_like(V), G

    def value_batch(self, t, X):
        self._check_time(t)
        return self.system.boundary(np.asarray(X, dtype=float))


class FieldValueFunction(ValueFunctionBase):
    """Interpolant of a solved grid field.

    Derivatives come from central differences of the interpolant (half a
    cell / half a stored time step), so this class is an approximate
    reference, not an exact-derivative implementation.
    """

    variant = "field"

    def __init__(self, field, system: System | None = None):
        self.field = field
        self.system = make_system(field.system_config) if system is None else system

    def evaluate_batch(self, t, X):
        X = np.asarray(X, dtype=float)
        t = np.broadcast_to(self._check_time(t), (len(X),)).copy()
        V = self.field.sample_batch(t, X)
        ht = max(1e-4, float(np.min(np.diff(self.field.times))) / 2.0)
        tp = np.clip(t + ht, 0.0, self.horizon)
        tm = np.clip(t - ht, 0.0, self.horizon)
        Vt = (self.field.sample_batch(tp, X) - self.field.sample_batch(tm, X)) / (
            tp - tm
        )
        G = np.empty_like(X)
        grid = self.field.grid
        for d in range(grid.ndim):
            h = grid.spacings[d] / 2.0
            Xp = X.copy()
            Xm = X.copy()
            if grid.periodic[d]:
                Xp[:, d] += h
                Xm[:, d] -= h
                denom = 2.0 * h
                G[:, d] = (
                    self.field.sample_batch(t, Xp) - self.field.sample_batch(t, Xm)
                ) / denom
            else:
                Xp[:, d] = np.minimum(Xp[:, d] + h, grid.hi[d])
                Xm[:, d] = np.maximum(Xm[:, d] - h, grid.lo[d])
                denom = Xp[:, d] - Xm[:, d]
                G[:, d] = (
                    self.field.sample_batch(t, Xp) - self.field.sample_batch(t, Xm)
                ) / denom
        return V, Vt, G


class NeuralValueFunction(ValueFunctionBase):
    """Learned value function with variant-specific assembly."""

    def __init__(self, system: System, network: SineNetwork, variant: str, seed: int = 0):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if network.sizes[0] != 1 + system.joint_dim:
            raise ShapeMismatchError(
                f"network expects {network.sizes[0]} inputs, system needs "
                f"{1 + system.joint_dim}"
            )
        self.system = system
        self.network = network
        self.variant = variant
        self.seed = seed
        lo = np.concatenate([[0.0], system.state_lo])
        hi = np.concatenate([[system.horizon], system.state_hi])
        self._lo = lo
        self._scale = 2.0 / (hi - lo)

    def _normalize(self, t, X):
        Z = np.empty((len(X), 1 + self.system.joint_dim))
        Z[:, 0] = t
        Z[:, 1:] = X
        return (Z - self._lo) * self._scale - 1.0

    def evaluate_batch(self, t, X):
        X = np.asarray(X, dtype=float)
        t = np.broadcast_to(self._check_time(t), (len(X),)).copy()
        X = self.system.wrap(X)
        signs = None
        if self.variant == "bc_sym":
            fold = ~self.system.in_train_region(X)
            if np.any(fold):
                X = X.copy()
                X[fold] = self.system.symmetry_map(X[fold])
                signs = np.where(fold[:, None], self.system.symmetry_signs, 1.0)

        N, dNdz = self.network.forward_with_grad(self._normalize(t, X))
        dNdt = dNdz[:, 0] * self._scale[0]
        dNdx = dNdz[:, 1:] * self._scale[1:]

        if self.variant == "deepreach":
            V, Vt, G = N, dNdt, dNdx
        else:
            tau = self.system.horizon - t
            lval = self.system.boundary(X)
            lgrad = self.system.boundary_gradient(X)
            V = lval + tau * N
            Vt = -N + tau * dNdt
            G = lgrad + tau[:, None] * dNdx
        if signs is not None:
            G = G * signs
        return V, Vt, G

    # -- checkpoints: JSON header + little-endian float32 weights ----------

    def save(self, path) -> None:
        header = {
            "sizes": self.network.sizes,
            "omega0": self.network.omega0,
            "variant": self.variant,
            "system": self.system.to_config(),
            "normalization": {
                "lo": self._lo.tolist(),
                "scale": self._scale.tolist(),
            },
            "seed": int(self.seed),
            "dtype": "<f4",
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(_CKPT_MAGIC)
            fh.write(struct.pack("<IQ", _CKPT_VERSION, len(blob)))
            fh.write(blob)
            fh.write(self.network.to_flat().astype("<f4").tobytes())

    @classmethod
    def load(cls, path, system: System | None = None) -> "NeuralValueFunction":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != _CKPT_MAGIC:
                raise FileFormatError(f"bad magic {magic!r}; not a checkpoint file")
            meta = fh.read(12)
            if len(meta) < 12:
                raise FileFormatError("truncated checkpoint preamble")
            version, hlen = struct.unpack("<IQ", meta)
            if version != _CKPT_VERSION:
                raise HeaderError(f"unsupported checkpoint version {version}")
            raw = fh.read(hlen)
            if len(raw) < hlen:
                raise TruncatedBlobError("header shorter than declared")
            try:
                header = json.loads(raw.decode("utf-8"))
                sizes = [int(s) for s in header["sizes"]]
                omega0 = float(header["omega0"])
                variant = header["variant"]
                sys_cfg = header["system"]
            except (KeyError, ValueError, TypeError) as exc:
                raise HeaderError(f"malformed checkpoint header: {exc}") from exc
            n_params = sum(
                sizes[i + 1] * sizes[i] + sizes[i + 1] for i in range(len(sizes) - 1)
            )
            blob = fh.read(n_params * 4)
            if len(blob) < n_params * 4:
                raise TruncatedBlobError(
                    f"expected {n_params * 4} weight bytes, got {len(blob)}"
                )
            flat = np.frombuffer(blob, dtype="<f4").astype(float)
        ckpt_system = make_system(sys_cfg)
        if system is not None:
            if system.to_config() != ckpt_system.to_config():
                raise SystemMismatchError(
                    f"checkpoint was built for {ckpt_system.to_config()}, "
                    f"got {system.to_config()}"
                )
            ckpt_system = system
        template = SineNetwork.init(sizes, omega0, seed=0)
        network = template.with_flat(flat)
        return cls(ckpt_system, network, variant, seed=header.get("seed", 0))


def pde_residual(system, vf, t, X, boundary_X=None, boundary_weight=100.0):
    """Per-sample PDE residuals and the training-style loss.

    residual_i = |dV/dt + min{H(x_i, grad V), 0}|. For the deepreach
    variant a terminal-condition term on `boundary_X` is added to the
    loss, weighted by `boundary_weight`.
    """
    X = np.asarray(X, dtype=float)
    if len(X) == 0:
        raise ValueError("batch must be non-empty")
    V, Vt, G = vf.evaluate_batch(t, X)
    H = system.hamiltonian(X, G)
    residuals = np.abs(Vt + np.minimum(H, 0.0))
    loss = float(np.mean(residuals))
    out = {"residuals": residuals, "loss": loss}
    if boundary_X is not None and getattr(vf, "variant", None) == "deepreach":
        bX = np.asarray(boundary_X, dtype=float)
        berr = np.abs(
            vf.value_batch(system.horizon, bX) - system.boundary(bX)
        )
        out["boundary_errors"] = berr
        out["loss"] = loss + boundary_weight * float(np.mean(berr))
    return out


def _torch_training_loss(system, params, omega0, variant, t_np, x_np, boundary_x_np, boundary_weight):
    """Training loss on one batch, differentiable w.r.t. params."""
    import torch

    T = system.horizon
    lo = np.concatenate([[0.0], system.state_lo])
    hi = np.concatenate([[T], system.state_hi])
    scale = 2.0 / (hi - lo)

    tt = torch.tensor(t_np, dtype=torch.float64, requires_grad=True)
    xx = torch.tensor(x_np, dtype=torch.float64, requires_grad=True)
    z = torch.cat(
        [
            ((tt - lo[0]) * scale[0] - 1.0)[:, None],
            (xx - torch.tensor(lo[1:])) * torch.tensor(scale[1:]) - 1.0,
        ],
        dim=1,
    )
    N = torch_forward(params, z, omega0)
    dNdt, dNdx = torch.autograd.grad(N.sum(), [tt, xx], create_graph=True)

    if variant == "deepreach":
        Vt = dNdt
        G = dNdx
    else:
        tau = T - tt
        lgrad = torch.tensor(system.boundary_gradient(x_np), dtype=torch.float64)
        Vt = -N + tau * dNdt
        G = lgrad + tau[:, None] * dNdx

    H = system.hamiltonian(xx, G)
    # Strict branch: the zero branch wins exact ties, so no H gradient there.
    residual = (Vt + torch.where(H < 0.0, H, torch.zeros_like(H))).abs()
    loss = residual.mean()

    if variant == "deepreach" and boundary_x_np is not None and len(boundary_x_np):
        xb = torch.tensor(boundary_x_np, dtype=torch.float64)
        zb = torch.cat(
            [
                torch.ones(len(xb), 1, dtype=torch.float64),
                (xb - torch.tensor(lo[1:])) * torch.tensor(scale[1:]) - 1.0,
            ],
            dim=1,
        )
        Nb = torch_forward(params, zb, omega0)
        lb = torch.tensor(system.boundary(boundary_x_np), dtype=torch.float64)
        loss = loss + boundary_weight * (Nb - lb).abs().mean()
    return loss


class ValueLearner(BaseEstimator):
    """Self-supervised trainer for the neural value function.

    Minimizes the mean absolute PDE residual over uniformly sampled
    states with a time curriculum whose sampling window grows linearly
    from the terminal instant to the whole horizon. ``bc_sym`` draws
    states from the symmetric training half-space only. Deterministic
    given the seed (single worker).
    """

    def __init__(
        self,
        variant: str = "bc",
        hidden_units: int = 128,
        hidden_layers: int = 3,
        omega0: float = 30.0,
        sample_budget: int = 4_000_000,
        batch_size: int = 2000,
        learning_rate: float = 2e-4,
        lr_decay: float = 0.5,
        lr_decay_steps: int = 600,
        curriculum_fraction: float = 0.5,
        boundary_weight: float = 100.0,
        boundary_fraction: float = 0.5,
        validation_every: int = 200,
        validation_size: int = 2048,
        log_every: int = 50,
        seed: int = 0,
    ):
        self.variant = variant
        self.hidden_units = hidden_units
        self.hidden_layers = hidden_layers
        self.omega0 = omega0
        self.sample_budget = sample_budget
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.lr_decay_steps = lr_decay_steps
        self.curriculum_fraction = curriculum_fraction
        self.boundary_weight = boundary_weight
        self.boundary_fraction = boundary_fraction
        self.validation_every = validation_every
        self.validation_size = validation_size
        self.log_every = log_every
        self.seed = seed

    # -- estimator API ------------------------------------------------------

    def fit(self, system, init_network: SineNetwork | None = None, step_offset: int = 0):
        import torch

        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.sample_budget <= 0 or self.batch_size <= 0:
            raise ValueError("sample budget and batch size must be positive")
        system = make_system(system)

        boundary_batch = (
            int(round(self.batch_size * self.boundary_fraction))
            if self.variant == "deepreach"
            else 0
        )
        per_step = self.batch_size + boundary_batch
        n_steps = max(1, int(self.sample_budget // per_step))
        curriculum_steps = max(1, int(round(self.curriculum_fraction * n_steps)))

        sizes = [1 + system.joint_dim] + [self.hidden_units] * self.hidden_layers + [1]
        if init_network is None:
            net = SineNetwork.init(sizes, self.omega0, derive_seed(self.seed, "init"))
        else:
            if init_network.sizes != sizes:
                raise ShapeMismatchError("resume network has different architecture")
            net = init_network.copy()

        params = net.to_torch(requires_grad=True)
        flat_params = [p for wb in params for p in wb]
        optimizer = torch.optim.Adam(flat_params, lr=self.learning_rate)
        scheduler = torch.optim.lr_scheduler.StepLR(
            optimizer, step_size=self.lr_decay_steps, gamma=self.lr_decay
        )

        T = system.horizon
        train_only = self.variant == "bc_sym"
        val_rng = rng_for(self.seed, "validation")
        val_x = system.sample_states(val_rng, self.validation_size, train_only=train_only)
        val_t = val_rng.uniform(0.0, T, size=self.validation_size)

        def batch_loss(t_np, x_np, b_np):
            return _torch_training_loss(
                system,
                params,
                self.omega0,
                self.variant,
                t_np,
                x_np,
                b_np,
                self.boundary_weight,
            )

        history = []
        samples_used = 0
        t_start = time.perf_counter()
        for k in range(n_steps):
            window = T * min(1.0, (k + 1) / curriculum_steps)
            rng = rng_for(self.seed, "batch", step_offset + k)
            x_np = system.sample_states(rng, self.batch_size, train_only=train_only)
            t_np = T - rng.uniform(0.0, 1.0, size=self.batch_size) * window
            b_np = (
                system.sample_states(rng, boundary_batch) if boundary_batch else None
            )
            loss = batch_loss(t_np, x_np, b_np)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            scheduler.step()
            loss_val = float(loss.detach())
            samples_used += per_step
            if not np.isfinite(loss_val):
                raise TrainingDivergedError(f"non-finite loss at step {k}")

            last = k == n_steps - 1
            if (k % self.log_every == 0) or last or ((k + 1) % self.validation_every == 0):
                val_err = np.nan
                if (k + 1) % self.validation_every == 0 or last or k == 0:
                    with torch.enable_grad():
                        val_err = float(batch_loss(val_t, val_x, None).detach())
                history.append(
                    {
                        "step": step_offset + k,
                        "window": window,
                        "loss": loss_val,
                        "val_error": val_err,
                        "wall_s": time.perf_counter() - t_start,
                    }
                )

        for W, b in params:
            if not (torch.isfinite(W).all() and torch.isfinite(b).all()):
                raise TrainingDivergedError("non-finite parameters after training")

        self.system_ = system
        self.network_ = SineNetwork.from_torch(params, self.omega0)
        self.value_function_ = NeuralValueFunction(
            system, self.network_, self.variant, seed=self.seed
        )
        self.history_ = history
        self.n_steps_ = n_steps
        self.samples_used_ = samples_used
        return self

    def predict(self, TX) -> np.ndarray:
        """Values for rows [t, x_1, ..., x_n]."""
        if not hasattr(self, "value_function_"):
            raise NotFittedError("ValueLearner is not fitted; call fit first")
        TX = np.asarray(TX, dtype=float)
        if TX.ndim != 2 or TX.shape[1] != 1 + self.system_.joint_dim:
            raise ValueError(
                f"expected (B, {1 + self.system_.joint_dim}) array, got {TX.shape}"
            )
        if not np.all(np.isfinite(TX)):
            raise ValueError("inputs must be finite")
        return self.value_function_.value_batch(TX[:, 0], TX[:, 1:])


def train_value_function(system, config: dict, init_network=None, step_offset: int = 0):
    """Functional wrapper: returns (value_function, history rows)."""
    learner = ValueLearner(**config)
    learner.fit(system, init_network=init_network, step_offset=step_offset)
    return learner.value_function_, learner.history_


def validate_against_oracle(vf, field, n: int, seed: int) -> dict:
    """Mean absolute error of a value function against a solved field.

    Half the samples sit at t=0 where the error is largest, the rest are
    uniform over [0, T]; states are uniform over the grid box. Reports the
    overall and the t=0-only figures.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    vf_cfg = vf.system.to_config()
    if vf_cfg != field.system_config:
        raise SystemMismatchError(
            f"value function built for {vf_cfg}, field for {field.system_config}"
        )
    rng = np.random.default_rng(seed)
    grid = field.grid
    X = rng.uniform(grid.lo, grid.hi, size=(n, grid.ndim))
    t = rng.uniform(0.0, field.horizon, size=n)
    n0 = n // 2
    t[:n0] = 0.0
    err = np.abs(vf.value_batch(t, X) - field.sample_batch(t, X))
    return {
        "n": n,
        "mae": float(np.mean(err)),
        "mae_t0": float(np.mean(err[:n0])) if n0 else float("nan"),
        "mae_rest": float(np.mean(err[n0:])) if n0 < n else float("nan"),
    }
