"""Small sine-activated multilayer perceptron.

The network is stored as plain float64 numpy weight/bias pairs. Forward
evaluation and exact input gradients (one reverse sweep per batch, no
finite differences) run in numpy so the planner can query values cheaply;
training builds a torch mirror of the same parameters.

Every sine layer computes sin(omega0 * (W h + b)). Initialization draws
the first layer uniformly from [-1/n_in, 1/n_in] and every deeper layer
from [-sqrt(6/n_in)/omega0, sqrt(6/n_in)/omega0], which keeps activations
well-distributed under the frequency scale.
"""

from __future__ import annotations

import numpy as np


class SineNetwork:
    """Feedforward net: sine hidden layers, linear scalar output."""

    def __init__(self, weights, biases, omega0: float):
        if len(weights) != len(biases) or len(weights) < 2:
            raise ValueError("need at least one hidden layer and one output layer")
        self.weights = [np.asarray(W, dtype=float) for W in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.omega0 = float(omega0)
        for W, b in zip(self.weights, self.biases):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError("inconsistent layer shapes")
        for prev, nxt in zip(self.weights[:-1], self.weights[1:]):
            if nxt.shape[1] != prev.shape[0]:
                raise ValueError("layer shapes do not chain")
        if self.weights[-1].shape[0] != 1:
            raise ValueError("output layer must be scalar")
        if not all(np.all(np.isfinite(W)) for W in self.weights):
            raise ValueError("non-finite parameters")

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, sizes, omega0: float, seed: int) -> "SineNetwork":
        """Fresh network for layer sizes [n_in, h1, ..., hk, 1]."""
        sizes = [int(s) for s in sizes]
        if len(sizes) < 3:
            raise ValueError("need at least one hidden layer")
        if sizes[-1] != 1:
            raise ValueError("output size must be 1")
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for i in range(len(sizes) - 1):
            n_in = sizes[i]
            if i == 0:
                bound = 1.0 / n_in
            else:
                bound = np.sqrt(6.0 / n_in) / omega0
            weights.append(rng.uniform(-bound, bound, size=(sizes[i + 1], n_in)))
            biases.append(rng.uniform(-bound, bound, size=sizes[i + 1]))
        return cls(weights, biases, omega0)

    @property
    def sizes(self):
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def copy(self) -> "SineNetwork":
        return SineNetwork(
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.omega0,
        )

    # -- evaluation ----------------------------------------------------------

    def forward(self, Z) -> np.ndarray:
        """Scalar outputs for a (B, n_in) batch."""
        h = np.asarray(Z, dtype=float)
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.sin(self.omega0 * (h @ W.T + b))
        W, b = self.weights[-1], self.biases[-1]
        return (h @ W.T + b)[..., 0]

    def forward_with_grad(self, Z):
        """Outputs and exact input gradients, (B,), (B, n_in).

        One forward pass caches pre-activations, one reverse sweep
        accumulates dN/dz through the cos factors.
        """
        Z = np.asarray(Z, dtype=float)
        h = Z
        pre = []
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            a = self.omega0 * (h @ W.T + b)
            pre.append(a)
            h = np.sin(a)
        W_out, b_out = self.weights[-1], self.biases[-1]
        out = (h @ W_out.T + b_out)[..., 0]

        delta = np.broadcast_to(W_out[0], h.shape)
        for W, a in zip(reversed(self.weights[:-1]), reversed(pre)):
            delta = (delta * self.omega0 * np.cos(a)) @ W
        return out, delta

    # -- flat parameter vector ------------------------------------------------

    def to_flat(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts.append(W.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def with_flat(self, flat) -> "SineNetwork":
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params:
            raise ValueError("flat vector has wrong length")
        weights, biases, k = [], [], 0
        for W, b in zip(self.weights, self.biases):
            weights.append(flat[k : k + W.size].reshape(W.shape))
            k += W.size
            biases.append(flat[k : k + b.size].reshape(b.shape))
            k += b.size
        return SineNetwork(weights, biases, self.omega0)

    # -- torch bridge ----------------------------------------------------------

    def to_torch(self, requires_grad: bool = True):
        """Torch float64 parameter list [(W, b), ...] mirroring this net."""
        import torch

        params = []
        for W, b in zip(self.weights, self.biases):
            params.append(
                (
                    torch.tensor(W, dtype=torch.float64, requires_grad=requires_grad),
                    torch.tensor(b, dtype=torch.float64, requires_grad=requires_grad),
                )
            )
        return params

    @classmethod
    def from_torch(cls, params, omega0: float) -> "SineNetwork":
        weights = [W.detach().cpu().numpy().copy() for W, _ in params]
        biases = [b.detach().cpu().numpy().copy() for _, b in params]
        return cls(weights, biases, omega0)


def torch_forward(params, Z, omega0: float):
    """Torch mirror of SineNetwork.forward (differentiable)."""
    h = Z
    for W, b in params[:-1]:
        h = (omega0 * (h @ W.T + b)).sin()
    W, b = params[-1]
    return (h @ W.T + b)[..., 0]
