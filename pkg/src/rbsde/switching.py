"""Switching strategies and strategy-based oracles on lattices.

A strategy is stored closed loop: one action per (reflection date, node,
current regime), so adaptedness holds by construction.  Evaluating a
strategy runs a scalar backward induction over (node, regime) pairs and
never touches the projection operator or the z estimate, which makes it
an independent check of the reflected scheme: the maximum over all
strategies must reproduce the scheme's pre-projection value at the
start.

Oracles are restricted to componentwise drivers that ignore z; the
per-strategy control process is then never needed.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .core import Problem
from .forward import Lattice
from .scheme import PICARD_MAX_ITER, PICARD_TOL, SchemeSolution

__all__ = [
    "SwitchingStrategy",
    "decision_dates",
    "extract_optimal_strategy",
    "evaluate_switched",
    "enumerate_strategies_oracle",
    "random_strategies",
    "domination_check",
    "DominationReport",
    "strategy_to_csv",
]


def decision_dates(lattice: Lattice, start_step: int) -> list:
    """Reflection time indices strictly between the start date and T.

    Switching exactly at the start date belongs to the projected value,
    not the pre-projection one the oracles target; switching at T never
    helps because the terminal value already lies in the domain.
    """
    idx = lattice.grid.reflection_indices
    return [int(i) for i in idx if start_step < i < lattice.grid.n]


@dataclass(frozen=True)
class SwitchingStrategy:
    """Closed-loop decision tables plus the starting point.

    ``tables[step]`` has shape (nodes at step, d); the entry is the
    regime to hold after the date's decision, so an entry equal to the
    current regime means no switch.
    """

    start_step: int
    start_regime: int
    tables: dict  # step -> int array (nodes, d)

    def rollout(self, lattice: Lattice, problem: Problem, branches) -> dict:
        """Follow one lattice path and recover the (theta_k, alpha_k) form.

        ``branches`` is a sequence of 0/1 down/up moves from the start
        step.  Returns the switch times/regimes, the switch count and the
        cumulated switching cost along the path.
        """
        branches = list(branches)
        node, regime = 0, self.start_regime
        times, regimes = [lattice.grid.points[self.start_step]], [regime]
        cost = 0.0
        n = lattice.grid.n
        for step in range(self.start_step, n + 1):
            if step in self.tables:
                action = int(self.tables[step][node, regime])
                if action != regime:
                    x = lattice.states_at(step)[node]
                    cost += float(problem.costs.matrix_at(x[None, :])[0, regime, action])
                    times.append(float(lattice.grid.points[step]))
                    regimes.append(action)
                    regime = action
            if step < n and not lattice.degenerate:
                node += branches[step - self.start_step]
        return {"times": times, "regimes": regimes,
                "switches": len(times) - 1, "cost": cost}


def _tables_to_batch(lattice, strategies):
    """Stack per-strategy tables into {step: (S, nodes, d)} arrays."""
    steps = sorted({s for strat in strategies for s in strat.tables})
    out = {}
    for step in steps:
        out[step] = np.stack([strat.tables[step] for strat in strategies])
    return out


def _scalar_implicit(cont, states, driver, dt):
    """Picard fixed point u = cont + dt f(x, u, 0), batched over strategies."""
    shape = cont.shape  # (S, nodes, d)
    flat_x = np.broadcast_to(states, (shape[0],) + states.shape).reshape(-1, states.shape[1])
    z = np.zeros((flat_x.shape[0], shape[2], 1))
    u = cont.reshape(-1, shape[2])
    e = u.copy()
    for _ in range(PICARD_MAX_ITER):
        u_next = e + dt * driver(flat_x, u, z)
        resid = np.max(np.abs(u_next - u))
        u = u_next
        if resid < PICARD_TOL:
            return u.reshape(shape)
    raise RuntimeError("strategy evaluation fixed point did not converge")


def _evaluate_batch(lattice: Lattice, problem: Problem, batch_tables: dict,
                    start_step: int, start_regime, start_node: int = 0,
                    n_strategies: int = 1) -> np.ndarray:
    """Values of many strategies at once; returns shape (S,)."""
    driver = problem.driver
    if driver.depends_on_z:
        raise ValueError("strategy evaluation requires a driver independent of z")
    if not driver.componentwise:
        raise ValueError("strategy evaluation requires a componentwise driver")
    grid = lattice.grid
    n, d = grid.n, problem.d
    S = n_strategies

    x = lattice.states_at(n)
    v = np.broadcast_to(problem.terminal(x), (S, lattice.node_count(n), d)).copy()
    for i in range(n - 1, start_step - 1, -1):
        if lattice.degenerate:
            cont = v
        else:
            cont = 0.5 * (v[:, :-1, :] + v[:, 1:, :])
        x = lattice.states_at(i)
        u = _scalar_implicit(cont, x, driver, grid.dt(i))
        if i in batch_tables and i > start_step:
            act = batch_tables[i]  # (S, nodes, d)
            cost = problem.costs.matrix_at(x)  # (nodes, d, d)
            moved = np.take_along_axis(u, act, axis=2)
            paid = np.take_along_axis(
                np.broadcast_to(cost, (S,) + cost.shape), act[..., None], axis=3)[..., 0]
            v = moved - paid
        else:
            v = u
    regime = np.asarray(start_regime, dtype=int)
    if regime.ndim == 0:
        return v[:, start_node, int(regime)]
    return v[np.arange(S), start_node, regime]


def evaluate_switched(lattice: Lattice, strategy: SwitchingStrategy,
                      problem: Problem, start_node: int = 0) -> float:
    """Value of one strategy by scalar backward induction (no projection)."""
    batch = _tables_to_batch(lattice, [strategy])
    vals = _evaluate_batch(lattice, problem, batch, strategy.start_step,
                           strategy.start_regime, start_node, n_strategies=1)
    return float(vals[0])


def extract_optimal_strategy(sol: SchemeSolution, lattice: Lattice,
                             problem: Problem, start) -> SwitchingStrategy:
    """Switch at the first date where the barrier binds, to the smallest
    regime index attaining the maximum.

    Built from the solved node tables; rejected for regression solutions
    which have no node tables.
    """
    start_step, start_regime = int(start[0]), int(start[1])
    if sol.engine_kind != "lattice":
        raise ValueError("strategy extraction requires node tables")
    tables = {}
    for step in decision_dates(lattice, start_step):
        y_til = sol.y_tilde[step]
        if y_til is None:
            raise ValueError(f"solution does not retain node tables at step {step}")
        x = lattice.states_at(step)
        cost = problem.costs.matrix_at(x)  # (nodes, d, d)
        vals = y_til[:, None, :] - cost    # (nodes, regime, target)
        d = problem.d
        off = vals.copy()
        off[:, np.arange(d), np.arange(d)] = -np.inf
        barrier = np.max(off, axis=2)
        target = np.argmax(off, axis=2)
        binds = y_til <= barrier
        stay = np.broadcast_to(np.arange(d), binds.shape)
        tables[step] = np.where(binds, target, stay).astype(int)
    return SwitchingStrategy(start_step=start_step, start_regime=start_regime,
                             tables=tables)


def _decision_points(lattice: Lattice, d: int, start_step: int):
    """Flat (step, node, regime) layout used by the enumerators."""
    points = []
    for step in decision_dates(lattice, start_step):
        for node in range(lattice.node_count(step)):
            for regime in range(d):
                points.append((step, node, regime))
    return points


def _actions_to_tables(lattice, d, start_step, actions):
    """actions: (S, n_points) int array -> batched tables {step: (S,nodes,d)}."""
    points = _decision_points(lattice, d, start_step)
    S = actions.shape[0]
    tables = {}
    col = 0
    for step in decision_dates(lattice, start_step):
        nodes = lattice.node_count(step)
        block = actions[:, col:col + nodes * d].reshape(S, nodes, d)
        tables[step] = block
        col += nodes * d
    assert col == len(points)
    return tables


def enumerate_strategies_oracle(lattice: Lattice, problem: Problem, start,
                                max_decision_points: int = 12) -> float:
    """Ground truth by exhausting every adapted decision table.

    The instance must be tiny: with P decision points there are d**P
    tables.  Larger instances are rejected with the computed count.
    """
    start_step, start_regime = int(start[0]), int(start[1])
    d = problem.d
    points = _decision_points(lattice, d, start_step)
    n_points = len(points)
    if n_points > max_decision_points:
        raise ValueError(
            f"instance too large for enumeration: {n_points} decision points "
            f"(> {max_decision_points})")
    total = d ** n_points
    if n_points == 0:
        actions = np.zeros((1, 0), dtype=int)
    else:
        flat = np.arange(total)
        digits = []
        for _ in range(n_points):
            digits.append(flat % d)
            flat = flat // d
        actions = np.stack(digits, axis=1)
    tables = _actions_to_tables(lattice, d, start_step, actions)
    vals = _evaluate_batch(lattice, problem, tables, start_step, start_regime,
                           n_strategies=actions.shape[0])
    return float(np.max(vals))


def random_strategies(lattice: Lattice, d: int, start, count: int,
                      seed: int) -> list:
    """Uniform random adapted decision tables from a seeded stream."""
    start_step, start_regime = int(start[0]), int(start[1])
    rng = np.random.default_rng(seed)
    points = _decision_points(lattice, d, start_step)
    actions = rng.integers(0, d, size=(count, len(points)))
    tables = _actions_to_tables(lattice, d, start_step, actions)
    out = []
    for s in range(count):
        per = {step: tables[step][s] for step in tables}
        out.append(SwitchingStrategy(start_step=start_step,
                                     start_regime=start_regime, tables=per))
    return out


@dataclass
class DominationReport:
    """Sampled-strategy domination summary, one block per start regime."""

    tolerance: float
    sampled: int
    max_excess: float = -np.inf
    violations: list = field(default_factory=list)
    optimal_gaps: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations and \
            all(abs(g) <= self.tolerance for g in self.optimal_gaps.values())

    def __str__(self):
        status = "PASS" if self.ok else "FAIL"
        lines = [f"domination check: {status} ({self.sampled} strategies/regime, "
                 f"tol {self.tolerance:g})",
                 f"  max sampled excess over Ytilde_0: {self.max_excess:.3e}"]
        for i, g in sorted(self.optimal_gaps.items()):
            lines.append(f"  regime {i + 1}: extracted-strategy gap {g:.3e}")
        lines += [f"  violation: {v}" for v in self.violations[:10]]
        return "\n".join(lines)


def domination_check(lattice: Lattice, problem: Problem, sol: SchemeSolution,
                     sample_strategies: int, seed: int,
                     tolerance: float = 1e-10) -> DominationReport:
    """No sampled strategy may beat the scheme; the extracted one must tie."""
    d = problem.d
    report = DominationReport(tolerance=tolerance, sampled=sample_strategies)
    for regime in range(d):
        ref = float(sol.y_tilde0[regime])
        points = _decision_points(lattice, d, 0)
        rng = np.random.default_rng(seed + regime)
        actions = rng.integers(0, d, size=(sample_strategies, len(points)))
        tables = _actions_to_tables(lattice, d, 0, actions)
        vals = _evaluate_batch(lattice, problem, tables, 0, regime,
                               n_strategies=sample_strategies)
        excess = vals - ref
        report.max_excess = max(report.max_excess, float(np.max(excess)))
        for s in np.flatnonzero(excess > tolerance):
            report.violations.append(
                f"regime {regime + 1} strategy {int(s)} exceeds by {excess[s]:.3e}")
        best = extract_optimal_strategy(sol, lattice, problem, (0, regime))
        report.optimal_gaps[regime] = evaluate_switched(lattice, best, problem) - ref
    return report


def strategy_to_csv(strategy: SwitchingStrategy, lattice: Lattice, path: str) -> None:
    """Serialize the decision tables (reflection_date, node, regime, action)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["reflection_date", "node", "regime", "action"])
        for step in sorted(strategy.tables):
            t = lattice.grid.points[step]
            table = strategy.tables[step]
            for node in range(table.shape[0]):
                for regime in range(table.shape[1]):
                    w.writerow([f"{t:.17g}", node, regime + 1,
                                int(table[node, regime]) + 1])
