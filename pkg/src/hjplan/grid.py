"""Grid-based level-set solver for the backward safety value function.

Integrates dV/dt + min{H(x, grad V), 0} = 0 backward from the terminal
condition V(T, x) = l(x) with a first-order Lax-Friedrichs numerical
Hamiltonian. The solved field is the ground truth against which learned
value functions are validated.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    HeaderError,
    FileFormatError,
    ShapeMismatchError,
    SolverDivergedError,
    TruncatedBlobError,
)
from .systems import System, make_system

_FIELD_MAGIC = b"HJVF"
_FIELD_VERSION = 1


def _antisymmetrize(coords: np.ndarray, periodic: bool) -> np.ndarray:
    """Force exact negation pairs on a symmetric axis.

    Rounding in linspace/arange can leave c[k] + c[n-k] a few ulp from
    zero, which would spoil bit-level symmetry of solved fields; pairing
    the nodes removes that.
    """
    c = coords.copy()
    n = len(c)
    if periodic:
        for k in range(1, (n + 1) // 2):
            c[n - k] = -c[k]
    else:
        c = 0.5 * (c - c[::-1])
    return c


class Grid:
    """Rectilinear grid over the joint state box.

    Periodic dimensions omit the duplicate endpoint, so node k sits at
    lo + k*(hi-lo)/n; non-periodic dimensions include both endpoints.
    """

    def __init__(self, lo, hi, shape, periodic):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.shape = tuple(int(n) for n in shape)
        self.periodic = np.asarray(periodic, dtype=bool)
        if not (len(self.lo) == len(self.hi) == len(self.shape) == len(self.periodic)):
            raise ValueError("grid component lengths disagree")
        if any(n < 3 for n in self.shape):
            raise ValueError("need at least 3 nodes per dimension")
        if np.any(self.hi <= self.lo):
            raise ValueError("upper bounds must exceed lower bounds")
        coords = []
        spacings = []
        for d, n in enumerate(self.shape):
            if self.periodic[d]:
                step = (self.hi[d] - self.lo[d]) / n
                c = self.lo[d] + step * np.arange(n)
            else:
                step = (self.hi[d] - self.lo[d]) / (n - 1)
                c = np.linspace(self.lo[d], self.hi[d], n)
            if self.lo[d] == -self.hi[d]:
                c = _antisymmetrize(c, self.periodic[d])
            coords.append(c)
            spacings.append(step)
        self.coords = coords
        self.spacings = np.asarray(spacings)

    @classmethod
    def for_system(cls, system: System, shape) -> "Grid":
        if np.isscalar(shape):
            shape = (int(shape),) * system.joint_dim
        return cls(system.state_lo, system.state_hi, shape, system.periodic_mask)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def num_nodes(self) -> int:
        return int(np.prod(self.shape))

    def broadcast_coords(self):
        """Per-dimension coordinate arrays shaped for broadcasting."""
        out = []
        for d, c in enumerate(self.coords):
            shape = [1] * self.ndim
            shape[d] = len(c)
            out.append(c.reshape(shape))
        return out

    def mesh(self) -> np.ndarray:
        """Full (*shape, ndim) array of node coordinates."""
        return np.stack(np.meshgrid(*self.coords, indexing="ij"), axis=-1)

    def to_config(self) -> dict:
        return {
            "lo": self.lo.tolist(),
            "hi": self.hi.tolist(),
            "shape": list(self.shape),
            "periodic": [bool(b) for b in self.periodic],
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "Grid":
        return cls(cfg["lo"], cfg["hi"], cfg["shape"], cfg["periodic"])

    def locate(self, X):
        """Lower node index and in-cell fraction per dimension.

        X is (..., ndim); periodic coordinates are wrapped, non-periodic
        ones must lie inside the bounds (tiny slack for rounding).
        """
        X = np.asarray(X, dtype=float)
        idx = np.empty(X.shape, dtype=np.int64)
        frac = np.empty(X.shape)
        for d in range(self.ndim):
            x = X[..., d]
            n = self.shape[d]
            step = self.spacings[d]
            if self.periodic[d]:
                span = self.hi[d] - self.lo[d]
                x = np.mod(x - self.lo[d], span) + self.lo[d]
                i = np.floor((x - self.lo[d]) / step).astype(np.int64)
                i = np.clip(i, 0, n - 1)
                left = self.coords[d][i]
                f = (x - left) / step
            else:
                if np.any(x < self.lo[d] - 1e-9) or np.any(x > self.hi[d] + 1e-9):
                    raise ValueError(
                        f"coordinate {d} out of grid bounds "
                        f"[{self.lo[d]}, {self.hi[d]}]"
                    )
                i = np.floor((x - self.lo[d]) / step).astype(np.int64)
                i = np.clip(i, 0, n - 2)
                left = self.coords[d][i]
                f = (x - left) / step
            idx[..., d] = i
            frac[..., d] = np.clip(f, 0.0, 1.0)
        return idx, frac

    def interpolate(self, values: np.ndarray, X) -> np.ndarray:
        """Multilinear interpolation of a nodal array at points X."""
        X = np.asarray(X, dtype=float)
        idx, frac = self.locate(X)
        flat_strides = self._strides()
        acc = np.zeros(X.shape[:-1])
        vflat = values.reshape(-1)
        for corner in range(1 << self.ndim):
            w = np.ones(X.shape[:-1])
            flat = np.zeros(X.shape[:-1], dtype=np.int64)
            for d in range(self.ndim):
                bit = (corner >> d) & 1
                i = idx[..., d] + bit
                if self.periodic[d]:
                    i = np.mod(i, self.shape[d])
                w = w * (frac[..., d] if bit else (1.0 - frac[..., d]))
                flat = flat + i * flat_strides[d]
            acc = acc + w * vflat[flat]
        return acc

    def _strides(self):
        strides = np.ones(self.ndim, dtype=np.int64)
        for d in range(self.ndim - 2, -1, -1):
            strides[d] = strides[d + 1] * self.shape[d + 1]
        return strides


@dataclass
class ValueField:
    """Solved value function sampled on a grid at stored time slices."""

    grid: Grid
    times: np.ndarray
    values: np.ndarray
    system_config: dict

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.values.shape != (len(self.times),) + self.grid.shape:
            raise ShapeMismatchError(
                f"values shape {self.values.shape} does not match "
                f"{(len(self.times),) + self.grid.shape}"
            )
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("time stamps must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def terminal_slice(self) -> np.ndarray:
        return self.values[-1]

    def slice_at(self, t: float) -> np.ndarray:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9:
            raise ValueError(f"no stored slice at t={t}; stored times {self.times}")
        return self.values[k]

    def sample_batch(self, t, X) -> np.ndarray:
        """V(t, x) by multilinear space interpolation, linear in time.

        `t` may be a scalar or one value per row of X; rows of X are
        points in the grid's state space.
        """
        X = np.asarray(X, dtype=float)
        squeeze = X.ndim == 1
        Xq = X[None, :] if squeeze else X.reshape(-1, self.grid.ndim)
        tq = np.broadcast_to(np.asarray(t, dtype=float), (len(Xq),)).copy()
        if np.any(tq < -1e-9) or np.any(tq > self.horizon + 1e-9):
            raise ValueError(f"time out of [0, {self.horizon}]")
        tq = np.clip(tq, 0.0, self.horizon)
        k = np.searchsorted(self.times, tq, side="right") - 1
        k = np.clip(k, 0, len(self.times) - 2)
        t0 = self.times[k]
        t1 = self.times[k + 1]
        w = (tq - t0) / (t1 - t0)
        out = np.empty(len(Xq))
        for kk in np.unique(k):
            m = k == kk
            lo_v = self.grid.interpolate(self.values[kk], Xq[m])
            hi_v = self.grid.interpolate(self.values[kk + 1], Xq[m])
            out[m] = (1.0 - w[m]) * lo_v + w[m] * hi_v
        if squeeze:
            return out[0]
        return out.reshape(X.shape[:-1])

    def sample(self, t: float, x) -> float:
        return float(self.sample_batch(t, np.asarray(x, dtype=float)))

    def membership(self, t, x):
        """True where the state can still avoid the collision set."""
        return self.sample_batch(t, x) > 0.0

    def volume_fraction(self, t: float = 0.0) -> float:
        """Fraction of grid nodes with positive value at a stored time."""
        return float(np.mean(self.slice_at(t) > 0.0))

    # -- serialization: JSON header + little-endian float64 blob ----------

    def save(self, path) -> None:
        header = {
            "grid": self.grid.to_config(),
            "system": self.system_config,
            "times": self.times.tolist(),
            "dtype": "<f8",
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(_FIELD_MAGIC)
            fh.write(struct.pack("<IQ", _FIELD_VERSION, len(blob)))
            fh.write(blob)
            fh.write(self.values.astype("<f8", copy=False).tobytes())

    @classmethod
    def load(cls, path) -> "ValueField":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != _FIELD_MAGIC:
                raise FileFormatError(f"bad magic {magic!r}; not a value-field file")
            meta = fh.read(12)
            if len(meta) < 12:
                raise FileFormatError("truncated field file preamble")
            version, hlen = struct.unpack("<IQ", meta)
            if version != _FIELD_VERSION:
                raise HeaderError(f"unsupported field version {version}")
            raw = fh.read(hlen)
            if len(raw) < hlen:
                raise TruncatedBlobError("header shorter than declared")
            try:
                header = json.loads(raw.decode("utf-8"))
                grid = Grid.from_config(header["grid"])
                times = np.asarray(header["times"], dtype=float)
            except (KeyError, ValueError, TypeError) as exc:
                raise HeaderError(f"malformed field header: {exc}") from exc
            count = len(times) * grid.num_nodes
            blob = fh.read(count * 8)
            if len(blob) < count * 8:
                raise TruncatedBlobError(
                    f"expected {count * 8} payload bytes, got {len(blob)}"
                )
            values = np.frombuffer(blob, dtype="<f8").reshape(
                (len(times),) + grid.shape
            )
        return cls(grid=grid, times=times, values=values.copy(), system_config=header["system"])


def _one_sided_differences(V, axis, step, periodic):
    """Backward and forward differences with extrapolated box boundaries."""
    if periodic:
        p_plus = (np.roll(V, -1, axis=axis) - V) / step
        p_minus = np.roll(p_plus, 1, axis=axis)
    else:
        interior = np.diff(V, axis=axis) / step
        first = [slice(None)] * V.ndim
        first[axis] = slice(0, 1)
        last = [slice(None)] * V.ndim
        last[axis] = slice(-1, None)
        p_minus = np.concatenate([interior[tuple(first)], interior], axis=axis)
        p_plus = np.concatenate([interior, interior[tuple(last)]], axis=axis)
    return p_minus, p_plus


def solve_brt(
    system: System,
    grid: Grid,
    cfl: float = 0.5,
    store_stride: int | None = None,
    max_slices: int = 50,
) -> ValueField:
    """Integrate the safety PDE backward from t=T to t=0 on the grid.

    The numerical Hamiltonian is the global Lax-Friedrichs form
    H(x, (p- + p+)/2) + sum_i alpha_i (p+_i - p-_i)/2 with per-dimension
    dissipation bounds alpha_i from the system. The sign of the
    regularization term accounts for the reversed time direction: with it,
    the update V <- V + dt*min{Hhat, 0} is the monotone tube step (clamped
    against the previous slice), stays pointwise non-increasing backward
    in time, and preserves an exact stationary solution. The time step
    obeys dt = cfl / sum_i(alpha_i / dx_i). Every `store_stride`-th slice
    is stored along with the terminal and final slices.
    """
    if not 0.0 < cfl <= 1.0:
        raise ValueError("cfl must be in (0, 1]")
    T = system.horizon
    alphas = system.lf_alphas()
    dt = cfl / float(np.sum(alphas / grid.spacings))
    n_steps = int(np.ceil(T / dt - 1e-12))
    if store_stride is None:
        store_stride = max(1, int(np.ceil(n_steps / max(1, max_slices - 2))))

    mesh = grid.mesh()
    V = np.asarray(system.boundary(mesh), dtype=float)
    del mesh
    coords = grid.broadcast_coords()

    stored = [(T, V.copy())]
    t = T
    for k in range(1, n_steps + 1):
        step = min(dt, t)
        p_mid = []
        reg = np.zeros_like(V)
        for d in range(grid.ndim):
            p_minus, p_plus = _one_sided_differences(
                V, d, grid.spacings[d], bool(grid.periodic[d])
            )
            p_mid.append(0.5 * (p_minus + p_plus))
            reg += alphas[d] * 0.5 * (p_plus - p_minus)
        H = system.hamiltonian(coords, p_mid)
        V = V + step * np.minimum(H + reg, 0.0)
        t = 0.0 if k == n_steps else T - k * dt
        if not np.all(np.isfinite(V)):
            raise SolverDivergedError(t)
        if k == n_steps or k % store_stride == 0:
            stored.append((t, V.copy()))

    stored.sort(key=lambda item: item[0])
    times = np.array([s[0] for s in stored])
    values = np.stack([s[1] for s in stored], axis=0)
    return ValueField(
        grid=grid, times=times, values=values, system_config=system.to_config()
    )


def estimate_solve_bytes(grid: Grid, max_slices: int = 50) -> int:
    """Rough peak memory of solve_brt: work arrays plus stored slices."""
    n = grid.num_nodes
    work = (3 * grid.ndim + 6) * n * 8
    stored = (max_slices + 2) * n * 8
    return int(work + stored)
