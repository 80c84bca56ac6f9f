"""Forward state models: Monte Carlo Euler paths and exact binomial lattices.

Paths use one counter-based Philox stream per path, keyed by
(seed, path index), so a bundle is reproducible bit for bit and growing
the path count extends existing paths without perturbing them.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import SdeModel, TimeGrid

__all__ = ["PathBundle", "Lattice", "simulate_euler", "build_lattice", "dump_paths_csv"]


@dataclass(frozen=True)
class PathBundle:
    """Euler states and the Brownian increments that produced them."""

    states: np.ndarray      # (paths, n+1, m)
    increments: np.ndarray  # (paths, n, q)
    seed: int
    grid: TimeGrid

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]


def _path_normals(seed: int, n_paths: int, n: int, q: int) -> np.ndarray:
    out = np.empty((n_paths, n, q))
    base = int(seed) << 64
    for j in range(n_paths):
        gen = np.random.Generator(np.random.Philox(key=base | j))
        out[j] = gen.standard_normal((n, q))
    return out


def simulate_euler(sde: SdeModel, grid: TimeGrid, seed: int, n_paths: int) -> PathBundle:
    """Simulate the Euler recursion X_{i+1} = X_i + b(X_i) dt + sigma(X_i) dW_i."""
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    n, m, q = grid.n, sde.m, sde.q
    normals = _path_normals(seed, n_paths, n, q)
    states = np.empty((n_paths, n + 1, m))
    increments = np.empty((n_paths, n, q))
    states[:, 0, :] = sde.x0
    for i in range(n):
        dt = grid.dt(i)
        x = states[:, i, :]
        b = sde.drift_at(x)
        sig = sde.diffusion_at(x)
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(sig))):
            bad = np.flatnonzero(~(np.all(np.isfinite(b), axis=1)
                                   & np.all(np.isfinite(sig), axis=(1, 2))))
            raise FloatingPointError(
                f"non-finite SDE coefficients at step {i}, path {bad[0]}")
        dw = normals[:, i, :] * np.sqrt(dt)
        increments[:, i, :] = dw
        states[:, i + 1, :] = x + b * dt + np.einsum("pmq,pq->pm", sig, dw)
    return PathBundle(states=states, increments=increments, seed=seed, grid=grid)


def dump_paths_csv(bundle: PathBundle, path: str) -> None:
    """Debug dump, one row per (path, time_index)."""
    m = bundle.states.shape[2]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "time_index"] + [f"state_{k}" for k in range(m)])
        for p in range(bundle.n_paths):
            for i in range(bundle.states.shape[1]):
                writer.writerow([p, i] + [f"{v:.17g}" for v in bundle.states[p, i]])


@dataclass(frozen=True)
class Lattice:
    """Recombining binomial tree for a constant-coefficient scalar model.

    Node k at step i holds x0 + b*t_i + sigma*(2k - i)*sqrt(dt); its
    successors are k (down) and k+1 (up) with probability 1/2 each and
    signed increment -/+ sqrt(dt).  A zero-volatility model collapses to
    a single-node chain with a zero increment.
    """

    grid: TimeGrid
    b: float
    sigma: float
    x0: float
    degenerate: bool  # sigma == 0: one node per step

    def node_count(self, step: int) -> int:
        return 1 if self.degenerate else step + 1

    def states_at(self, step: int) -> np.ndarray:
        """Node states at a step, shape (nodes, 1)."""
        t = self.grid.points[step]
        if self.degenerate:
            return np.array([[self.x0 + self.b * t]])
        sqdt = np.sqrt(self.grid.dt(0))
        levels = 2.0 * np.arange(step + 1) - step
        return (self.x0 + self.b * t + self.sigma * levels * sqdt)[:, None]

    def branch_probabilities(self) -> np.ndarray:
        return np.array([1.0]) if self.degenerate else np.array([0.5, 0.5])

    def branch_increments(self, step: int) -> np.ndarray:
        """Signed Brownian-increment proxy per branch (down, up)."""
        if self.degenerate:
            return np.array([0.0])
        sqdt = np.sqrt(self.grid.dt(step))
        return np.array([-sqdt, sqdt])

    def successors(self, step: int, node: int) -> np.ndarray:
        """Successor node indices at step+1, ordered (down, up)."""
        return np.array([0]) if self.degenerate else np.array([node, node + 1])

    def node_probabilities(self, step: int) -> np.ndarray:
        """Unconditional node weights at a step (binomial law)."""
        if self.degenerate:
            return np.array([1.0])
        k = np.arange(step + 1)
        logc = (np.cumsum(np.log(np.arange(1, step + 1))) if step else np.array([]))
        logfact = np.concatenate(([0.0], logc))
        logp = logfact[step] - logfact[k] - logfact[step - k] - step * np.log(2.0)
        return np.exp(logp)

    def expectation(self, step: int, values: np.ndarray) -> np.ndarray:
        """Unconditional expectation of per-node values at a step."""
        w = self.node_probabilities(step)
        return np.tensordot(w, np.asarray(values, dtype=float), axes=(0, 0))


def build_lattice(sde: SdeModel, grid: TimeGrid) -> Lattice:
    """Exact conditional-expectation substrate; constant scalar models only."""
    if not sde.is_constant:
        raise ValueError("lattice engine requires constant coefficients")
    if not grid.is_uniform:
        raise ValueError("lattice construction requires a uniform time grid")
    b, sigma = sde.constant_coefficients
    return Lattice(grid=grid, b=float(b), sigma=float(sigma),
                   x0=float(sde.x0[0]), degenerate=(sigma == 0.0))
