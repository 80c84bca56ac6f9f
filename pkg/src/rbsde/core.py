"""Problem descriptions shared by every solver component.

A problem bundles a forward diffusion, a vector driver, a terminal
condition, a matrix of switching costs and a time grid carrying a
distinguished subset of reflection dates.  All types are immutable
after construction and safe to share across threads.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "TimeGrid",
    "CostModel",
    "Driver",
    "Terminal",
    "SdeModel",
    "Problem",
    "ValidationReport",
    "build_uniform_grid",
    "validate_problem",
]


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TimeGrid:
    """Fine grid 0 = t_0 < ... < t_n = T with flagged reflection dates.

    Every reflection date is a grid point; the first and last points are
    always reflection dates.
    """

    points: np.ndarray
    reflection_flags: np.ndarray

    def __post_init__(self):
        pts = _readonly(np.asarray(self.points, dtype=float))
        flags = _readonly(np.asarray(self.reflection_flags, dtype=bool))
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "reflection_flags", flags)
        if pts.ndim != 1 or pts.size < 2:
            raise ValueError("time grid needs at least two points")
        if flags.shape != pts.shape:
            raise ValueError("reflection flags must align with grid points")
        if pts[0] != 0.0:
            raise ValueError("time grid must start at 0")
        if not np.all(np.diff(pts) > 0):
            raise ValueError("time grid must be strictly increasing")
        if not (flags[0] and flags[-1]):
            raise ValueError("both endpoints must be reflection dates")

    @property
    def n(self) -> int:
        """Number of time steps."""
        return self.points.size - 1

    @property
    def kappa(self) -> int:
        """Number of reflection intervals (flagged points minus one)."""
        return int(self.reflection_flags.sum()) - 1

    @property
    def horizon(self) -> float:
        return float(self.points[-1])

    @property
    def mesh(self) -> float:
        """Largest step of the fine grid."""
        return float(np.max(np.diff(self.points)))

    @property
    def reflection_indices(self) -> np.ndarray:
        return np.flatnonzero(self.reflection_flags)

    @property
    def reflection_times(self) -> np.ndarray:
        return self.points[self.reflection_flags]

    @property
    def reflection_mesh(self) -> float:
        """Largest spacing between consecutive reflection dates."""
        return float(np.max(np.diff(self.reflection_times)))

    @property
    def is_uniform(self) -> bool:
        d = np.diff(self.points)
        return bool(np.allclose(d, d[0], rtol=1e-12, atol=0.0))

    def dt(self, i: int) -> float:
        return float(self.points[i + 1] - self.points[i])

    def bookkeeping(self) -> dict:
        """Grid size bookkeeping: mesh*n and reflection_mesh*kappa.

        For a uniform grid mesh*n equals the horizon; the reflection
        figures are recorded but never enforced against a Lipschitz
        constant (the two constants are kept separate on purpose).
        """
        return {
            "mesh": self.mesh,
            "mesh_times_n": self.mesh * self.n,
            "reflection_mesh": self.reflection_mesh,
            "reflection_mesh_times_kappa": self.reflection_mesh * self.kappa,
        }


def build_uniform_grid(horizon: float, n: int, kappa: int) -> TimeGrid:
    """Uniform n-step grid with kappa equally spaced reflection intervals.

    Requires kappa to divide n so every reflection date lands on a grid
    point; both endpoints are always flagged.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if kappa < 1:
        raise ValueError("kappa must be at least 1")
    if n % kappa != 0:
        raise ValueError(f"kappa must divide n: {kappa} does not divide {n}")
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    points = np.linspace(0.0, horizon, n + 1)
    flags = np.zeros(n + 1, dtype=bool)
    flags[:: n // kappa] = True
    flags[0] = flags[-1] = True
    return TimeGrid(points, flags)


def _as_states(x) -> np.ndarray:
    """Coerce probe states to shape (N, m)."""
    a = np.asarray(x, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    return a


@dataclass(frozen=True)
class CostModel:
    """Switching costs c^{ij}(x), either a constant matrix or state dependent."""

    d: int
    evaluator: Callable[[np.ndarray], np.ndarray]
    kind: str  # "constant" | "state"
    lipschitz: float = 0.0
    _matrix: np.ndarray | None = None

    @staticmethod
    def constant(matrix) -> "CostModel":
        m = _readonly(np.asarray(matrix, dtype=float))
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("cost matrix must be square")
        d = m.shape[0]
        return CostModel(d=d, evaluator=lambda x: np.broadcast_to(m, (len(x), d, d)),
                         kind="constant", lipschitz=0.0, _matrix=m)

    @staticmethod
    def from_function(d: int, fn: Callable[[np.ndarray], np.ndarray],
                      lipschitz: float) -> "CostModel":
        return CostModel(d=d, evaluator=fn, kind="state", lipschitz=lipschitz)

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"

    def matrix_at(self, states) -> np.ndarray:
        """Cost matrices at each state, shape (N, d, d)."""
        states = _as_states(states)
        out = np.asarray(self.evaluator(states), dtype=float)
        if out.shape != (len(states), self.d, self.d):
            raise ValueError(
                f"cost evaluator returned shape {out.shape}, "
                f"expected {(len(states), self.d, self.d)}")
        return out


@dataclass(frozen=True)
class Driver:
    """Vector driver f(x, y, z) -> R^d, evaluated on batches.

    Shapes: x (N, m), y (N, d), z (N, d, q) -> (N, d).  ``componentwise``
    declares that component i reads only y^i and row i of z;
    ``depends_on_z`` and ``bounded_in_z`` gate which error statements the
    experiment harness is allowed to assert.
    """

    d: int
    evaluator: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    lipschitz: float
    depends_on_z: bool = False
    componentwise: bool = True
    bounded_in_z: bool = True

    @staticmethod
    def zero(d: int) -> "Driver":
        return Driver(d=d, evaluator=lambda x, y, z: np.zeros((len(x), d)),
                      lipschitz=0.0, depends_on_z=False, componentwise=True)

    def __call__(self, x, y, z) -> np.ndarray:
        out = np.asarray(self.evaluator(x, y, z), dtype=float)
        if out.shape != (len(x), self.d):
            raise ValueError(
                f"driver returned shape {out.shape}, expected {(len(x), self.d)}")
        return out


@dataclass(frozen=True)
class Terminal:
    """Terminal payoff g(x) -> R^d on batches of states."""

    d: int
    evaluator: Callable[[np.ndarray], np.ndarray]
    lipschitz: float

    @staticmethod
    def constant(values) -> "Terminal":
        v = _readonly(np.asarray(values, dtype=float))
        return Terminal(d=v.size, evaluator=lambda x: np.broadcast_to(v, (len(x), v.size)),
                        lipschitz=0.0)

    def __call__(self, states) -> np.ndarray:
        states = _as_states(states)
        out = np.asarray(self.evaluator(states), dtype=float)
        if out.shape != (len(states), self.d):
            raise ValueError(
                f"terminal returned shape {out.shape}, expected {(len(states), self.d)}")
        return out


@dataclass(frozen=True)
class SdeModel:
    """Forward diffusion dX = b(X) dt + sigma(X) dW in R^m, W in R^q."""

    m: int
    q: int
    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    x0: np.ndarray
    lipschitz: float
    constant_coefficients: tuple | None = None  # (b, sigma) when scalar constant

    @staticmethod
    def constant(b: float, sigma: float, x0: float) -> "SdeModel":
        """One-dimensional model with constant coefficients (lattice capable)."""
        bv, sv = float(b), float(sigma)
        return SdeModel(
            m=1, q=1,
            drift=lambda x: np.full_like(x, bv),
            diffusion=lambda x: np.full((len(x), 1, 1), sv),
            x0=np.array([float(x0)]),
            lipschitz=0.0,
            constant_coefficients=(bv, sv),
        )

    def __post_init__(self):
        object.__setattr__(self, "x0", _readonly(np.asarray(self.x0, dtype=float).reshape(-1)))
        if self.x0.size != self.m:
            raise ValueError("x0 dimension does not match m")

    @property
    def is_constant(self) -> bool:
        return self.constant_coefficients is not None

    def drift_at(self, states) -> np.ndarray:
        states = _as_states(states)
        out = np.asarray(self.drift(states), dtype=float)
        if out.shape != (len(states), self.m):
            raise ValueError(f"drift returned shape {out.shape}, expected {(len(states), self.m)}")
        return out

    def diffusion_at(self, states) -> np.ndarray:
        states = _as_states(states)
        out = np.asarray(self.diffusion(states), dtype=float)
        if out.shape != (len(states), self.m, self.q):
            raise ValueError(
                f"diffusion returned shape {out.shape}, expected {(len(states), self.m, self.q)}")
        return out


@dataclass(frozen=True)
class Problem:
    """Full problem instance; regime count must agree across components."""

    sde: SdeModel
    driver: Driver
    terminal: Terminal
    costs: CostModel
    grid: TimeGrid

    def __post_init__(self):
        if not (self.driver.d == self.terminal.d == self.costs.d):
            raise ValueError(
                f"regime count mismatch: driver d={self.driver.d}, "
                f"terminal d={self.terminal.d}, costs d={self.costs.d}")

    @property
    def d(self) -> int:
        return self.driver.d


@dataclass
class ValidationReport:
    """Violations found while probing a problem; empty entries == pass."""

    entries: list = field(default_factory=list)
    probes_checked: int = 0
    min_offdiag_cost: float = np.inf
    min_triangle_margin: float = np.inf
    min_terminal_margin: float = np.inf

    @property
    def ok(self) -> bool:
        return not self.entries

    def __str__(self):
        head = "validation: " + ("PASS" if self.ok else f"{len(self.entries)} violation(s)")
        lines = [head, f"  probes checked: {self.probes_checked}"]
        lines.append(f"  min off-diagonal cost: {self.min_offdiag_cost:.6g}")
        lines.append(f"  min triangle margin:   {self.min_triangle_margin:.6g}")
        lines.append(f"  min terminal margin:   {self.min_terminal_margin:.6g}")
        lines += ["  " + e for e in self.entries]
        return "\n".join(lines)


def _check_structure(C: np.ndarray, where: str, report: ValidationReport):
    """Strict structure checks on one cost matrix (margin 0)."""
    d = C.shape[0]
    for i in range(d):
        if C[i, i] != 0.0:
            report.entries.append(f"{where}: c^{{{i+1}{i+1}}} = {C[i, i]:g} != 0")
    for i in range(d):
        for j in range(d):
            if i != j:
                report.min_offdiag_cost = min(report.min_offdiag_cost, C[i, j])
                if C[i, j] <= 0.0:
                    report.entries.append(
                        f"{where}: c^{{{i+1}{j+1}}} = {C[i, j]:g} <= 0")
    for i in range(d):
        for j in range(d):
            for l in range(d):
                if i != j and j != l:
                    margin = C[i, j] + C[j, l] - C[i, l]
                    report.min_triangle_margin = min(report.min_triangle_margin, margin)
                    if margin <= 0.0:
                        report.entries.append(
                            f"{where}: c^{{{i+1}{j+1}}}+c^{{{j+1}{l+1}}}-c^{{{i+1}{l+1}}}"
                            f" = {margin:g} <= 0")


def _check_componentwise(driver: Driver, states: np.ndarray, report: ValidationReport,
                         seed: int = 0):
    """Probe the componentwise declaration with perturbed cross inputs."""
    rng = np.random.default_rng(seed)
    d = driver.d
    x = states[: min(len(states), 8)]
    y = rng.standard_normal((len(x), d))
    z = rng.standard_normal((len(x), d, 1))
    base = driver(x, y, z)
    for i in range(d):
        y2 = y.copy()
        z2 = z.copy()
        for j in range(d):
            if j != i:
                y2[:, j] += 1.0 + rng.random()
                z2[:, j, :] -= 1.0 + rng.random()
        probe = driver(x, y2, z2)
        if not np.array_equal(base[:, i], probe[:, i]):
            report.entries.append(
                f"componentwise flag violated: f^{i+1} changed when only "
                f"cross components of y/z were perturbed")


def validate_problem(problem: Problem, probe_states) -> ValidationReport:
    """Probe structure condition, terminal membership and driver flags.

    Violations are report entries, never exceptions; the report is empty
    exactly when all checks pass on the probe set.  Strict inequalities
    are checked with margin 0; the observed margins are recorded so the
    caller can do its own bookkeeping against a Lipschitz constant.
    """
    states = _as_states(probe_states)
    if states.size == 0:
        raise ValueError("probe_states must be nonempty")
    if states.shape[1] != problem.sde.m:
        raise ValueError(
            f"probe states have dimension {states.shape[1]}, model has m={problem.sde.m}")
    report = ValidationReport(probes_checked=len(states))

    cost = problem.costs.matrix_at(states)
    g = problem.terminal(states)
    for k in range(len(states)):
        _check_structure(cost[k], f"probe {k}", report)
        # terminal membership: g^i >= max_j (g^j - c^{ij})
        for i in range(problem.d):
            rhs = np.max(g[k] - cost[k, i, :])
            margin = g[k, i] - rhs
            report.min_terminal_margin = min(report.min_terminal_margin, margin)
            if margin < 0.0:
                j = int(np.argmax(g[k] - cost[k, i, :]))
                report.entries.append(
                    f"probe {k}: terminal membership fails: g^{i+1} >= g^{j+1} - "
                    f"c^{{{i+1}{j+1}}} violated ({g[k, i]:g} < {g[k, j] - cost[k, i, j]:g})")

    if problem.driver.componentwise:
        _check_componentwise(problem.driver, states, report)

    # shape probes for the forward model
    problem.sde.drift_at(states[:1])
    problem.sde.diffusion_at(states[:1])
    return report
