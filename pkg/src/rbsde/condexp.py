"""Conditional-expectation engines for the backward scheme.

The scheme only needs two capabilities at each step: the conditional
expectation of a vector payoff, and the conditional expectation of
payoff x increment / dt.  A lattice engine computes both exactly by
finite sums; a regression engine estimates both by least-squares Monte
Carlo over a polynomial basis.  Both expose the same surface so the
backward solver is engine agnostic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from itertools import product

import numpy as np

from .forward import Lattice, PathBundle

__all__ = [
    "BasisSpec",
    "RegressionFit",
    "regress",
    "lattice_cond_exp",
    "lattice_z_bar",
    "LatticeEngine",
    "RegressionEngine",
]


# ---------------------------------------------------------------------------
# lattice side: exact finite sums


def lattice_cond_exp(lattice: Lattice, step: int, next_values) -> np.ndarray:
    """One-step conditional expectation of per-node values at step+1."""
    v = np.asarray(next_values, dtype=float)
    expected = lattice.node_count(step + 1)
    if v.shape[0] != expected:
        raise ValueError(
            f"next_values has {v.shape[0]} nodes, step {step + 1} has {expected}")
    if lattice.degenerate:
        return v.copy()
    return 0.5 * (v[:-1] + v[1:])


def lattice_z_bar(lattice: Lattice, step: int, next_values, dt: float) -> np.ndarray:
    """Increment-weighted expectation: E[V_{i+1} dW | node] / dt.

    With branches -/+ sqrt(dt) this reduces to the central difference
    (V_up - V_down) / (2 sqrt(dt)).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    v = np.asarray(next_values, dtype=float)
    expected = lattice.node_count(step + 1)
    if v.shape[0] != expected:
        raise ValueError(
            f"next_values has {v.shape[0]} nodes, step {step + 1} has {expected}")
    if lattice.degenerate:
        return np.zeros_like(v)
    return (v[1:] - v[:-1]) / (2.0 * math.sqrt(dt))


# ---------------------------------------------------------------------------
# regression side: least-squares Monte Carlo


@dataclass(frozen=True)
class BasisSpec:
    """Monomial basis of total degree <= degree on R^m states."""

    m: int
    degree: int = 2

    def __post_init__(self):
        if self.m < 1 or self.degree < 0:
            raise ValueError("need m >= 1 and degree >= 0")

    @cached_property
    def exponents(self) -> tuple:
        exps = [e for e in product(range(self.degree + 1), repeat=self.m)
                if sum(e) <= self.degree]
        exps.sort(key=lambda e: (sum(e), e))
        return tuple(exps)

    @property
    def size(self) -> int:
        return math.comb(self.m + self.degree, self.degree)

    def evaluate(self, states) -> np.ndarray:
        """Design matrix, shape (N, size); first column is the constant."""
        x = np.asarray(states, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        # per-coordinate power tables, then monomials by multiplication
        pows = []
        for j in range(self.m):
            table = np.empty((len(x), self.degree + 1))
            table[:, 0] = 1.0
            for k in range(1, self.degree + 1):
                table[:, k] = table[:, k - 1] * x[:, j]
            pows.append(table)
        out = np.empty((len(x), len(self.exponents)))
        for b, e in enumerate(self.exponents):
            col = None
            for j, ej in enumerate(e):
                if ej:
                    col = pows[j][:, ej] if col is None else col * pows[j][:, ej]
            out[:, b] = 1.0 if col is None else col
        return out


@dataclass(frozen=True)
class RegressionFit:
    """Least-squares representation of a state function at one date."""

    basis: BasisSpec
    coef: np.ndarray    # (basis size, n_targets)
    fitted: np.ndarray  # (N, n_targets)

    def evaluate(self, states) -> np.ndarray:
        return self.basis.evaluate(states) @ self.coef


_RIDGE = 1e-10
_COND_LIMIT = 1e12


def regress(basis: BasisSpec, states, targets, step=None,
            design: np.ndarray | None = None) -> RegressionFit:
    """Least-squares fit of targets on the basis at the given states.

    Solved through the normal equations; a trace-scaled Tikhonov term is
    added only when the Gram matrix is numerically singular, so a
    well-posed fit stays an exact linear projection.
    """
    if design is None:
        design = basis.evaluate(states)
    t = np.asarray(targets, dtype=float)
    flat = t.reshape(design.shape[0], -1)
    if design.shape[0] < basis.size:
        raise ValueError(
            f"sample count {design.shape[0]} below basis size {basis.size}")
    gram = design.T @ design
    rhs = design.T @ flat
    cond = np.linalg.cond(gram)
    if np.isfinite(cond) and cond < _COND_LIMIT:
        coef = np.linalg.solve(gram, rhs)
    else:
        lam = _RIDGE * np.trace(gram) / gram.shape[0]
        coef = np.linalg.solve(gram + lam * np.eye(gram.shape[0]), rhs)
    if not np.all(np.isfinite(coef)):
        where = "" if step is None else f" at step {step}"
        raise RuntimeError(f"rank-deficient regression beyond ridge repair{where}")
    fitted = design @ coef
    return RegressionFit(basis=basis, coef=coef, fitted=fitted.reshape(t.shape))


# ---------------------------------------------------------------------------
# engines


class LatticeEngine:
    """Exact conditional expectations over a recombining binomial tree."""

    kind = "lattice"

    def __init__(self, lattice: Lattice):
        self.lattice = lattice
        self.grid = lattice.grid
        self.q = 1

    def sample_count(self, step: int) -> int:
        return self.lattice.node_count(step)

    def states_at(self, step: int) -> np.ndarray:
        return self.lattice.states_at(step)

    def cond_exp(self, step: int, next_values) -> np.ndarray:
        return lattice_cond_exp(self.lattice, step, next_values)

    def cond_exp_weighted(self, step: int, next_values) -> np.ndarray:
        """E[V_{i+1} dW' | F_i] / dt, shaped (nodes, d, q)."""
        z = lattice_z_bar(self.lattice, step, next_values, self.grid.dt(step))
        return z[..., np.newaxis]

    def average(self, step: int, values) -> np.ndarray:
        return self.lattice.expectation(step, values)


class RegressionEngine:
    """Least-squares Monte Carlo conditional expectations on a path bundle.

    Fitted values are not truncated by default; pass ``clip=(lo, hi)`` to
    clamp them (the scheme's own a priori bounds have no computable
    constants, so any clamp is the caller's responsibility).
    """

    kind = "regression"

    def __init__(self, bundle: PathBundle, basis: BasisSpec, clip=None):
        if basis.m != bundle.states.shape[2]:
            raise ValueError("basis dimension does not match path states")
        if clip is not None and not clip[0] <= clip[1]:
            raise ValueError("clip bounds must satisfy lo <= hi")
        self.bundle = bundle
        self.basis = basis
        self.clip = clip
        self.grid = bundle.grid
        self.q = bundle.increments.shape[2]
        self._design_step = None  # one-slot cache: both fits of a step reuse it
        self._design = None

    def sample_count(self, step: int) -> int:
        return self.bundle.n_paths

    def states_at(self, step: int) -> np.ndarray:
        return self.bundle.states[:, step, :]

    def _design_at(self, step: int) -> np.ndarray:
        if self._design_step != step:
            self._design = self.basis.evaluate(self.states_at(step))
            self._design_step = step
        return self._design

    def cond_exp(self, step: int, next_values) -> np.ndarray:
        fit = regress(self.basis, self.states_at(step), next_values, step=step,
                      design=self._design_at(step))
        return fit.fitted

    def cond_exp_weighted(self, step: int, next_values) -> np.ndarray:
        v = np.asarray(next_values, dtype=float)
        dw = self.bundle.increments[:, step, :]
        targets = v[:, :, np.newaxis] * dw[:, np.newaxis, :]
        fit = regress(self.basis, self.states_at(step), targets, step=step,
                      design=self._design_at(step))
        return fit.fitted / self.grid.dt(step)

    def average(self, step: int, values) -> np.ndarray:
        return np.mean(np.asarray(values, dtype=float), axis=0)
