import numpy as np
import pytest

import rbsde as rb


@pytest.fixture
def lattice():
    sde = rb.SdeModel.constant(0.0, 1.0, 0.0)
    return rb.build_lattice(sde, rb.build_uniform_grid(1.0, 4, 2))


class TestLatticeCondExp:
    def test_constant_payoff(self, lattice):
        out = rb.lattice_cond_exp(lattice, 2, np.full(4, 3.5))
        np.testing.assert_array_equal(out, np.full(3, 3.5))

    def test_two_point_average(self, lattice):
        out = rb.lattice_cond_exp(lattice, 0, np.array([2.0, 6.0]))
        np.testing.assert_array_equal(out, [4.0])

    def test_martingale_property(self, lattice):
        nxt = lattice.states_at(3)[:, 0]
        out = rb.lattice_cond_exp(lattice, 2, nxt)
        np.testing.assert_allclose(out, lattice.states_at(2)[:, 0], atol=1e-15)

    def test_size_mismatch_rejected(self, lattice):
        with pytest.raises(ValueError, match="nodes"):
            rb.lattice_cond_exp(lattice, 1, np.zeros(5))

    def test_tower_property(self, lattice):
        payoff = np.cos(lattice.states_at(4)[:, 0])
        v = payoff
        for i in range(3, -1, -1):
            v = rb.lattice_cond_exp(lattice, i, v)
        assert v[0] == pytest.approx(lattice.expectation(4, payoff), abs=1e-13)


class TestLatticeZBar:
    def test_constant_orthogonal_to_increments(self, lattice):
        out = rb.lattice_z_bar(lattice, 1, np.full(3, 7.0), lattice.grid.dt(1))
        np.testing.assert_array_equal(out, np.zeros(2))

    def test_isometry_on_one_step(self, lattice):
        dt = lattice.grid.dt(0)
        inc = lattice.branch_increments(0)  # (-sqrt(dt), +sqrt(dt))
        out = rb.lattice_z_bar(lattice, 0, inc, dt)
        assert out[0] == pytest.approx(1.0, abs=1e-14)

    def test_linear_payoff_recovers_slope(self, lattice):
        dt = lattice.grid.dt(0)
        a, b = 2.0, -3.0
        nxt = a + b * lattice.branch_increments(0)
        out = rb.lattice_z_bar(lattice, 0, nxt, dt)
        assert out[0] == pytest.approx(b, abs=1e-13)

    def test_nonpositive_dt_rejected(self, lattice):
        with pytest.raises(ValueError):
            rb.lattice_z_bar(lattice, 0, np.zeros(2), 0.0)


class TestBasis:
    def test_size_formula(self):
        assert rb.BasisSpec(m=1, degree=2).size == 3
        assert rb.BasisSpec(m=2, degree=2).size == 6
        assert rb.BasisSpec(m=3, degree=3).size == 20

    def test_first_column_is_constant(self, rng):
        basis = rb.BasisSpec(m=2, degree=2)
        A = basis.evaluate(rng.standard_normal((10, 2)))
        np.testing.assert_array_equal(A[:, 0], np.ones(10))

    def test_design_full_rank_at_generic_points(self, rng):
        basis = rb.BasisSpec(m=2, degree=2)
        A = basis.evaluate(rng.standard_normal((50, 2)))
        assert np.linalg.matrix_rank(A) == basis.size

    def test_matches_direct_monomials(self, rng):
        basis = rb.BasisSpec(m=2, degree=3)
        x = rng.standard_normal((20, 2))
        A = basis.evaluate(x)
        for b, e in enumerate(basis.exponents):
            np.testing.assert_allclose(A[:, b], x[:, 0] ** e[0] * x[:, 1] ** e[1],
                                       rtol=1e-12)


class TestRegress:
    def test_function_in_span_reproduced(self, rng):
        basis = rb.BasisSpec(m=1, degree=1)
        x = rng.uniform(-2, 2, size=(200, 1))
        targets = 3.0 * x[:, 0] + 1.0
        fit = rb.regress(basis, x, targets)
        np.testing.assert_allclose(fit.fitted, targets, atol=1e-10)

    def test_constant_targets(self, rng):
        basis = rb.BasisSpec(m=1, degree=2)
        x = rng.uniform(-1, 1, size=(100, 1))
        fit = rb.regress(basis, x, np.full(100, 5.0))
        np.testing.assert_allclose(fit.coef[:, 0], [5.0, 0.0, 0.0], atol=1e-10)

    def test_quadratic_in_span(self, rng):
        basis = rb.BasisSpec(m=1, degree=2)
        x = rng.uniform(-2, 2, size=(300, 1))
        targets = x[:, 0] ** 2
        fit = rb.regress(basis, x, targets)
        assert np.max(np.abs(fit.fitted - targets)) <= 1e-8

    def test_refit_is_idempotent(self, rng):
        basis = rb.BasisSpec(m=1, degree=2)
        x = rng.uniform(-2, 2, size=(500, 1))
        targets = np.sin(x[:, 0])
        fit = rb.regress(basis, x, targets)
        refit = rb.regress(basis, x, fit.fitted)
        np.testing.assert_allclose(refit.fitted, fit.fitted, atol=1e-10)

    def test_degenerate_states_fall_back_to_mean(self):
        basis = rb.BasisSpec(m=1, degree=2)
        x = np.zeros((50, 1))
        targets = np.linspace(0.0, 1.0, 50)
        fit = rb.regress(basis, x, targets)
        np.testing.assert_allclose(fit.fitted, np.full(50, targets.mean()), atol=1e-8)

    def test_sample_count_below_basis_size_rejected(self):
        basis = rb.BasisSpec(m=1, degree=3)
        with pytest.raises(ValueError, match="below basis size"):
            rb.regress(basis, np.zeros((2, 1)), np.zeros(2))

    def test_nonfinite_targets_fail_with_step(self):
        basis = rb.BasisSpec(m=1, degree=1)
        x = np.linspace(0, 1, 10)[:, None]
        with pytest.raises(RuntimeError, match="step 7"):
            rb.regress(basis, x, np.full(10, np.nan), step=7)

    def test_vector_targets(self, rng):
        basis = rb.BasisSpec(m=1, degree=1)
        x = rng.uniform(-1, 1, size=(100, 1))
        targets = np.stack([x[:, 0], 2 * x[:, 0] + 1], axis=1)
        fit = rb.regress(basis, x, targets)
        np.testing.assert_allclose(fit.fitted, targets, atol=1e-10)
        assert fit.fitted.shape == (100, 2)


class TestEngines:
    def test_engines_expose_the_same_surface(self, lattice, rng):
        grid = lattice.grid
        sde = rb.SdeModel.constant(0.0, 1.0, 0.0)
        bundle = rb.simulate_euler(sde, grid, seed=1, n_paths=2000)
        engines = [rb.LatticeEngine(lattice),
                   rb.RegressionEngine(bundle, rb.BasisSpec(m=1, degree=2))]
        for eng in engines:
            v = np.ones((eng.sample_count(3), 2))
            ce = eng.cond_exp(2, v)
            zb = eng.cond_exp_weighted(2, v)
            assert ce.shape == (eng.sample_count(2), 2)
            assert zb.shape == (eng.sample_count(2), 2, 1)
            # a constant payoff is in the span of both engines' bases
            np.testing.assert_allclose(ce, 1.0, atol=1e-10)
        # for a constant payoff the lattice z is exactly zero ...
        lat = engines[0]
        np.testing.assert_array_equal(
            lat.cond_exp_weighted(2, np.ones((4, 2))), np.zeros((3, 2, 1)))
        # ... while the regression z is only statistically zero
        reg = engines[1]
        zb = reg.cond_exp_weighted(2, np.ones((2000, 2)))
        bound = 5.0 * np.sqrt(grid.dt(2) / 2000) / grid.dt(2)
        assert np.all(np.abs(reg.average(2, zb)) <= bound)

    def test_regression_engine_recovers_linear_slope(self):
        # E[X_{i+1} dW | X_i] / dt = 1 for the driftless unit-vol model
        sde = rb.SdeModel.constant(0.0, 1.0, 0.0)
        grid = rb.build_uniform_grid(1.0, 4, 2)
        bundle = rb.simulate_euler(sde, grid, seed=12, n_paths=50_000)
        eng = rb.RegressionEngine(bundle, rb.BasisSpec(m=1, degree=2))
        v = bundle.states[:, 3, :]  # payoff = state itself
        zb = eng.cond_exp_weighted(2, v)
        assert np.median(zb[:, 0, 0]) == pytest.approx(1.0, abs=0.05)

    def test_lattice_engine_average_uses_tree_weights(self, lattice):
        payoff = lattice.states_at(2)[:, 0] ** 2
        assert rb.LatticeEngine(lattice).average(2, payoff) == pytest.approx(0.5)
