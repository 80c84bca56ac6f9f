"""Shared instance builders for the test suite.

Random cost matrices draw off-diagonal entries from [0.5, 0.9]; since
0.9 < 2 * 0.5 the triangle margin is positive by construction.  Random
terminals keep the pointwise spread below the smallest cost so domain
membership holds at every state, and binding reflections come from
asymmetric running payoffs in the driver.
"""
import numpy as np
import pytest

import rbsde as rb


def rand_cost_matrix(rng, d, lo=0.5, hi=0.9):
    C = rng.uniform(lo, hi, size=(d, d))
    np.fill_diagonal(C, 0.0)
    return C


def rand_terminal_vector_in_domain(rng, C, d):
    """Random constant terminal strictly inside the domain of C.

    Projecting can land exactly on the boundary where later float
    reassociation breaks the exact membership check, so pull toward the
    (strictly interior) constant vector.
    """
    u = rng.uniform(-1.0, 1.0, size=d)
    p = rb.project(C, u)
    return 0.9 * p + 0.1 * p.mean()


def rand_bounded_terminal(rng, d, min_cost):
    """State-dependent terminal whose componentwise spread stays below
    min_cost at every state (clipped slopes)."""
    offsets = rng.uniform(-0.2, 0.2, size=d) * min_cost
    slopes = rng.uniform(-0.15, 0.15, size=d) * min_cost
    base_slope = rng.uniform(-0.5, 0.5)

    def g(x):
        s = np.clip(x[:, 0], -1.0, 1.0)
        base = base_slope * x[:, 0]
        return base[:, None] + offsets + slopes * s[:, None]

    return rb.Terminal(d=d, evaluator=g, lipschitz=abs(base_slope) + 0.15 * min_cost)


def rand_componentwise_driver(rng, d, y_scale=0.4):
    """f^i = a_i y^i + b_i max(s_i x, 0) + c_i; ignores z.

    The sign s_i alternates across regimes so running payoffs diverge
    and reflections have a chance to bind.
    """
    a = rng.uniform(-y_scale, y_scale, size=d)
    b = rng.uniform(0.4, 1.6, size=d)
    sign = np.array([1.0 if i % 2 == 0 else -1.0 for i in range(d)])
    c = rng.uniform(-0.4, 0.4, size=d)

    def f(x, y, z):
        ramp = np.maximum(sign * x[:, :1], 0.0)
        return a * y + b * ramp + c

    return rb.Driver(d=d, evaluator=f, lipschitz=float(np.max(np.abs(a))),
                     depends_on_z=False, componentwise=True)


def rand_lattice_instance(rng, n, kappa, d=2):
    """Random tiny lattice problem with structure-valid costs and a
    terminal inside the domain; drivers push spreads so reflections can
    bind."""
    sde = rb.SdeModel.constant(float(rng.uniform(-0.3, 0.3)), float(rng.uniform(0.6, 1.2)),
                               float(rng.uniform(-0.3, 0.3)))
    C = rand_cost_matrix(rng, d, lo=0.3, hi=0.55)
    costs = rb.CostModel.constant(C)
    terminal = rand_bounded_terminal(rng, d, float(C[C > 0].min()))
    driver = rand_componentwise_driver(rng, d)
    grid = rb.build_uniform_grid(1.0, n, kappa)
    problem = rb.Problem(sde=sde, driver=driver, terminal=terminal, costs=costs, grid=grid)
    lattice = rb.build_lattice(sde, grid)
    return problem, lattice


def two_regime_switching_problem(n, kappa, cost=0.3, horizon=1.0):
    """Canonical binding instance: regime 1 earns max(X,0), regime 2
    earns max(-X,0), constant symmetric costs, zero terminal."""
    sde = rb.SdeModel.constant(0.0, 1.0, 0.0)

    def f(x, y, z):
        return np.stack([np.maximum(x[:, 0], 0.0), np.maximum(-x[:, 0], 0.0)], axis=1)

    driver = rb.Driver(d=2, evaluator=f, lipschitz=0.0, depends_on_z=False,
                       componentwise=True)
    costs = rb.CostModel.constant([[0.0, cost], [cost, 0.0]])
    terminal = rb.Terminal.constant([0.0, 0.0])
    grid = rb.build_uniform_grid(horizon, n, kappa)
    return rb.Problem(sde=sde, driver=driver, terminal=terminal, costs=costs, grid=grid)


def constant_terminal_problem(n=4, kappa=2):
    """Zero driver, costs 2, terminal (1, 0): nothing ever binds."""
    sde = rb.SdeModel.constant(0.0, 1.0, 0.0)
    costs = rb.CostModel.constant([[0.0, 2.0], [2.0, 0.0]])
    terminal = rb.Terminal.constant([1.0, 0.0])
    grid = rb.build_uniform_grid(1.0, n, kappa)
    return rb.Problem(sde=sde, driver=rb.Driver.zero(2), terminal=terminal,
                      costs=costs, grid=grid)


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)
