"""Discretely reflected backward Euler scheme over any engine.

One backward sweep per solve: at each step the increment-weighted
conditional expectation gives the z estimate, an implicit fixed point
gives the pre-projection value, and the oblique projection is applied
at reflection dates only (time 0 included).  The implicit step walks
backward through a Picard iteration, which contracts when dt * L < 1.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .core import Driver, Problem
from .projection import project_batch

__all__ = [
    "SchemeSolution",
    "implicit_step",
    "backward_solve",
    "unreflected_backward_solve",
    "ComparisonReport",
    "compare_schemes",
    "solution_to_csv",
    "SOLUTION_CSV_COLUMNS",
]

PICARD_TOL = 1e-12
PICARD_MAX_ITER = 100


@dataclass
class SchemeSolution:
    """Backward sweep output.

    Per-step arrays are indexed by time index; entries may be None when a
    reduced storage level was requested.  ``delta_k`` maps reflection
    time indices to the projection increments Y - Ytilde there (the entry
    at index 0 exists but is not part of the cumulated reflection mass).
    """

    d: int
    q: int
    engine_kind: str
    n: int
    store: str
    y: list = field(default_factory=list)
    y_tilde: list = field(default_factory=list)
    z_bar: list = field(default_factory=list)
    delta_k: dict = field(default_factory=dict)
    y0: np.ndarray | None = None
    y_tilde0: np.ndarray | None = None
    z_bar0: np.ndarray | None = None
    reflection_mass: np.ndarray | None = None
    picard_iterations: list = field(default_factory=list)
    picard_residuals: list = field(default_factory=list)
    times: np.ndarray | None = None
    reflection_flags: np.ndarray | None = None


def implicit_step(expectation, z_bar, states, driver: Driver, dt: float,
                  tol: float = PICARD_TOL, max_iter: int = PICARD_MAX_ITER,
                  step: int | None = None):
    """Solve y = expectation + dt * f(x, y, z_bar) by Picard iteration.

    Starts from the expectation itself and iterates to sup-norm
    tolerance; the caller guarantees dt * L < 1 so the map contracts.
    Returns (y, iterations, final residual).
    """
    e = np.asarray(expectation, dtype=float)
    if dt * driver.lipschitz >= 1.0:
        raise ValueError(
            f"implicit step requires dt * L < 1, got dt={dt:g}, L={driver.lipschitz:g}")
    y = e.copy()
    resid = 0.0
    for it in range(1, max_iter + 1):
        y_next = e + dt * driver(states, y, z_bar)
        resid = float(np.max(np.abs(y_next - y))) if y.size else 0.0
        y = y_next
        if resid < tol:
            return y, it, resid
    where = "" if step is None else f" at step {step}"
    raise RuntimeError(
        f"implicit step did not converge in {max_iter} iterations{where}, "
        f"residual {resid:.3e}")


def _check_contraction(problem: Problem):
    worst = problem.grid.mesh * problem.driver.lipschitz
    if worst >= 1.0:
        raise ValueError(
            f"scheme requires mesh * L < 1; got {problem.grid.mesh:g} * "
            f"{problem.driver.lipschitz:g} = {worst:g}")


def _check_engine(problem: Problem, engine):
    if not np.array_equal(engine.grid.points, problem.grid.points):
        raise ValueError("engine grid does not match problem grid")


def backward_solve(problem: Problem, engine, store: str = "full") -> SchemeSolution:
    """Full backward sweep of the reflected scheme.

    ``store`` controls retention: "full" keeps every per-step array,
    "reflection" keeps values at reflection dates only, "summary" keeps
    only the time-0 summaries.  Scalar summaries and the cumulated
    reflection mass are computed for every storage level.
    """
    if store not in ("full", "reflection", "summary"):
        raise ValueError(f"unknown store level {store!r}")
    _check_contraction(problem)
    _check_engine(problem, engine)
    grid = problem.grid
    n, d, q = grid.n, problem.d, engine.q
    flagged = grid.reflection_flags

    sol = SchemeSolution(d=d, q=q, engine_kind=engine.kind, n=n, store=store,
                         y=[None] * (n + 1), y_tilde=[None] * (n + 1),
                         z_bar=[None] * (n + 1),
                         picard_iterations=[0] * n,
                         picard_residuals=[0.0] * n,
                         times=grid.points, reflection_flags=flagged)

    x_T = engine.states_at(n)
    g = problem.terminal(x_T)
    proj_T = project_batch(problem.costs.matrix_at(x_T), g)
    bad = np.flatnonzero(np.any(g < proj_T, axis=1))
    if bad.size:
        k = int(bad[0])
        raise ValueError(
            f"terminal value outside the switching domain at sample {k}, "
            f"state {x_T[k]}: g = {g[k]}")

    mass = np.zeros(d)
    y_next = g
    if store == "full":
        sol.y[n] = g
        sol.y_tilde[n] = g

    for i in range(n - 1, -1, -1):
        dt = grid.dt(i)
        z = engine.cond_exp_weighted(i, y_next)
        e = engine.cond_exp(i, y_next)
        x = engine.states_at(i)
        y_til, iters, resid = implicit_step(e, z, x, problem.driver, dt, step=i)
        sol.picard_iterations[i] = iters
        sol.picard_residuals[i] = resid
        if flagged[i]:
            y_cur = project_batch(problem.costs.matrix_at(x), y_til)
            dk = y_cur - y_til
            if i > 0:
                mass += engine.average(i, dk)
            if store in ("full", "reflection"):
                sol.delta_k[i] = dk
        else:
            y_cur = y_til
        keep = store == "full" or (store == "reflection" and flagged[i])
        if keep:
            sol.y[i] = y_cur
            sol.y_tilde[i] = y_til
            sol.z_bar[i] = z
        y_next = y_cur

    sol.y0 = np.asarray(engine.average(0, y_next), dtype=float).reshape(d)
    last_til = y_til  # i == 0 values from the final loop pass
    sol.y_tilde0 = np.asarray(engine.average(0, last_til), dtype=float).reshape(d)
    sol.z_bar0 = np.asarray(engine.average(0, z), dtype=float).reshape(d, q)
    sol.reflection_mass = mass
    return sol


def unreflected_backward_solve(problem: Problem, engine) -> SchemeSolution:
    """Textbook backward Euler scheme with no projection anywhere.

    Kept as an independent reference; in one regime the reflected scheme
    must coincide with it.
    """
    _check_contraction(problem)
    _check_engine(problem, engine)
    grid = problem.grid
    n, d, q = grid.n, problem.d, engine.q
    sol = SchemeSolution(d=d, q=q, engine_kind=engine.kind, n=n, store="full",
                         y=[None] * (n + 1), y_tilde=[None] * (n + 1),
                         z_bar=[None] * (n + 1),
                         picard_iterations=[0] * n,
                         picard_residuals=[0.0] * n,
                         times=grid.points,
                         reflection_flags=np.zeros(n + 1, dtype=bool))
    y = problem.terminal(engine.states_at(n))
    sol.y[n] = y
    sol.y_tilde[n] = y
    for i in range(n - 1, -1, -1):
        dt = grid.dt(i)
        z = engine.cond_exp_weighted(i, y)
        e = engine.cond_exp(i, y)
        y, iters, resid = implicit_step(e, z, engine.states_at(i), problem.driver,
                                        dt, step=i)
        sol.picard_iterations[i] = iters
        sol.picard_residuals[i] = resid
        sol.y[i] = y
        sol.y_tilde[i] = y
        sol.z_bar[i] = z
    sol.y0 = np.asarray(engine.average(0, y), dtype=float).reshape(d)
    sol.y_tilde0 = sol.y0.copy()
    sol.z_bar0 = np.asarray(engine.average(0, sol.z_bar[0]), dtype=float).reshape(d, q)
    sol.reflection_mass = np.zeros(d)
    return sol


@dataclass
class ComparisonReport:
    """Outcome of a pathwise dominance check between two solves."""

    dominates: bool
    max_violation: float
    violations: list
    atol: float

    def __str__(self):
        if self.dominates:
            return f"dominance holds everywhere (atol={self.atol:g})"
        head = f"dominance FAILED: {len(self.violations)} violation(s), worst {self.max_violation:.3e}"
        return "\n".join([head] + [f"  step {s} sample {k}: {a:.12g} < {b:.12g}"
                                   for s, k, a, b in self.violations[:20]])


def _same_probe(a, b, states):
    return np.array_equal(np.asarray(a(states)), np.asarray(b(states)))


def compare_schemes(p1: Problem, p2: Problem, engine, atol: float = 1e-10,
                    seed: int = 0) -> ComparisonReport:
    """Certify Y^1 >= Y^2 at every step and sample, or list counterexamples.

    Preconditions checked on probe inputs: the problems share grid,
    costs and forward model; both drivers ignore z; g1 >= g2 at the
    terminal samples and f1 >= f2 on probe (x, y) pairs.  A failed
    precondition is a rejection; a dominance violation is a report entry
    (which would indicate an implementation bug).  The tolerance covers
    the fixed-point truncation of the implicit step.
    """
    if p1.driver.depends_on_z or p2.driver.depends_on_z:
        raise ValueError("comparison requires drivers independent of z")
    if not np.array_equal(p1.grid.points, p2.grid.points) or \
            not np.array_equal(p1.grid.reflection_flags, p2.grid.reflection_flags):
        raise ValueError("comparison requires identical grids")
    _check_contraction(p1)
    _check_contraction(p2)

    n = p1.grid.n
    probe = engine.states_at(n)
    if not np.array_equal(p1.costs.matrix_at(probe), p2.costs.matrix_at(probe)):
        raise ValueError("comparison requires identical cost models")
    if not (_same_probe(p1.sde.drift_at, p2.sde.drift_at, probe)
            and _same_probe(p1.sde.diffusion_at, p2.sde.diffusion_at, probe)
            and np.array_equal(p1.sde.x0, p2.sde.x0)):
        raise ValueError("comparison requires identical forward models")

    g1, g2 = p1.terminal(probe), p2.terminal(probe)
    if np.any(g1 < g2):
        raise ValueError("terminal ordering g1 >= g2 not verifiable on probes")
    rng = np.random.default_rng(seed)
    d = p1.d
    for i in range(0, n + 1, max(1, n // 8)):
        x = engine.states_at(i)
        scale = 1.0 + float(np.max(np.abs(g1))) + float(np.max(np.abs(g2)))
        for _ in range(4):
            y = rng.uniform(-scale, scale, size=(len(x), d))
            z = np.zeros((len(x), d, engine.q))
            if np.any(p1.driver(x, y, z) < p2.driver(x, y, z)):
                raise ValueError("driver ordering f1 >= f2 not verifiable on probes")

    s1 = backward_solve(p1, engine, store="full")
    s2 = backward_solve(p2, engine, store="full")
    violations = []
    worst = 0.0
    for i in range(n + 1):
        for a, b in ((s1.y[i], s2.y[i]), (s1.y_tilde[i], s2.y_tilde[i])):
            gap = b - a
            mask = gap > atol
            if np.any(mask):
                worst = max(worst, float(np.max(gap)))
                for k in np.argwhere(mask):
                    violations.append((i, int(k[0]), float(a[tuple(k)]), float(b[tuple(k)])))
    return ComparisonReport(dominates=not violations, max_violation=worst,
                            violations=violations, atol=atol)


SOLUTION_CSV_COLUMNS = ("time_index", "time", "node")


def _row_labels(d: int, q: int):
    cols = list(SOLUTION_CSV_COLUMNS)
    cols += [f"y_{i+1}" for i in range(d)]
    cols += [f"y_tilde_{i+1}" for i in range(d)]
    cols += [f"z_bar_{i+1}_{j+1}" for i in range(d) for j in range(q)]
    cols += [f"delta_k_{i+1}" for i in range(d)]
    return cols


def solution_to_csv(sol: SchemeSolution, engine, path: str) -> None:
    """One row per stored (time_index, node_or_summary).

    Lattice solves with full storage emit one row per node; otherwise a
    single averaged row per stored step is written with node=summary.
    The column set is fixed; absent z/delta values are written as 0.
    """
    d, q, n = sol.d, sol.q, sol.n
    per_node = sol.engine_kind == "lattice" and sol.store == "full"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_row_labels(d, q))
        for i in range(n + 1):
            if sol.y[i] is None:
                continue
            t = sol.times[i]
            zb = sol.z_bar[i]
            dk = sol.delta_k.get(i)
            if per_node:
                for k in range(sol.y[i].shape[0]):
                    row = [i, f"{t:.17g}", k]
                    row += [f"{v:.17g}" for v in sol.y[i][k]]
                    row += [f"{v:.17g}" for v in sol.y_tilde[i][k]]
                    zrow = zb[k].reshape(-1) if zb is not None else np.zeros(d * q)
                    row += [f"{v:.17g}" for v in zrow]
                    krow = dk[k] if dk is not None else np.zeros(d)
                    row += [f"{v:.17g}" for v in krow]
                    w.writerow(row)
            else:
                row = [i, f"{t:.17g}", "summary"]
                row += [f"{v:.17g}" for v in engine.average(i, sol.y[i])]
                row += [f"{v:.17g}" for v in engine.average(i, sol.y_tilde[i])]
                if zb is not None:
                    row += [f"{v:.17g}" for v in np.asarray(engine.average(i, zb)).reshape(-1)]
                else:
                    row += ["0"] * (d * q)
                if dk is not None:
                    row += [f"{v:.17g}" for v in engine.average(i, dk)]
                else:
                    row += ["0"] * d
                w.writerow(row)
