from __future__ import annotations

import math

import numpy as np
import pytest

from cbflab.diagnostics import energy_residual
from cbflab.grid import Grid, inner, random_field, shear_field, sobolev_norm, taylor_green
from cbflab.integrators import (
    BaseTrajectoryError,
    BlowUpError,
    BrownianPath,
    ForcingSpec,
    StabilityError,
    TimeGrid,
    heat_flow,
    iterate_cbf,
    solve_adjoint,
    solve_cbf,
    solve_linearized,
    solve_stochastic,
    step_cbf,
)
from cbflab.operators import PhysParams, RegimeError


@pytest.fixture
def grid2():
    return Grid(2, 1.0, 16)


class TestTimeGrid:
    def test_nodes(self):
        tg = TimeGrid(0.0, 1.0, 0.25)
        assert tg.n_steps == 4
        np.testing.assert_allclose(tg.times, [0, 0.25, 0.5, 0.75, 1.0])
        assert tg.refined().dt == 0.125

    def test_rejects_non_integer_steps(self):
        with pytest.raises(ValueError):
            TimeGrid(0.0, 1.0, 0.3)
        with pytest.raises(ValueError):
            TimeGrid(1.0, 1.0, 0.1)
        with pytest.raises(ValueError):
            TimeGrid(0.0, 1.0, 0.0)


class TestForcing:
    def test_steady_is_projected(self, grid2):
        rng = np.random.default_rng(0)
        f = ForcingSpec.steady(random_field(grid2, rng, solenoidal=False))
        from cbflab.grid import divergence

        assert np.max(np.abs(divergence(f.payload))) < 1e-12
        assert f.hypothesis == "W^{1,2}(0,T;H)"

    def test_kind_validation(self):
        with pytest.raises(ValueError):
            ForcingSpec("bogus")
        with pytest.raises(ValueError):
            ForcingSpec("time_varying", payload=None)

    def test_zero(self, grid2):
        f = ForcingSpec.zero()
        assert f.is_zero and f.coeffs(grid2, 0.0) is None
        assert sobolev_norm(f.at(grid2, 0.3)) == 0.0


class TestForwardSolver:
    def test_linear_mode_decay_r1(self, grid2):
        # shear is an exact Euler steady state and C(u) = u for r = 1,
        # so u(t) = exp(-(mu lambda + alpha + beta) t) x
        p = PhysParams(mu=0.05, alpha=0.2, beta=0.7, r=1.0)
        x = shear_field(grid2, wavenumber=2)
        rate = p.mu * 4 * grid2.lambda1 + p.alpha + p.beta

        def err(dt):
            tr = solve_cbf(x, TimeGrid(0, 1.0, dt), p)
            exact = x * math.exp(-rate)
            return sobolev_norm(tr.final - exact) / sobolev_norm(exact)

        e1, e2 = err(0.02), err(0.01)
        assert e1 < 1e-4
        assert 3.5 <= e1 / e2 <= 4.5

    def test_second_order_self_convergence(self, grid2):
        p = PhysParams()
        x = random_field(grid2, np.random.default_rng(1), h_norm=0.5)
        sols = [solve_cbf(x, TimeGrid(0, 0.5, dt), p).final for dt in (0.02, 0.01, 0.005)]
        ratio = sobolev_norm(sols[0] - sols[1]) / sobolev_norm(sols[1] - sols[2])
        assert 3.5 <= ratio <= 4.5

    def test_energy_decays_without_forcing(self, grid2):
        tr = solve_cbf(taylor_green(grid2, 0.5), TimeGrid(0, 0.5, 0.01), PhysParams())
        h2 = np.asarray(tr.budget["h2"])
        assert np.all(np.diff(h2) < 0)

    def test_energy_residual_small(self, grid2):
        tr = solve_cbf(taylor_green(grid2, 0.25), TimeGrid(0, 0.2, 1e-3), PhysParams())
        assert np.max(np.abs(energy_residual(tr))) < 1e-8

    def test_energy_residual_with_forcing(self, grid2):
        f = ForcingSpec.steady(shear_field(grid2, amplitude=0.5, wavenumber=1, kind="sin"))
        x = random_field(grid2, np.random.default_rng(2), h_norm=0.2)
        r1 = np.max(np.abs(energy_residual(solve_cbf(x, TimeGrid(0, 0.2, 2e-3), PhysParams(), f))))
        r2 = np.max(np.abs(energy_residual(solve_cbf(x, TimeGrid(0, 0.2, 1e-3), PhysParams(), f))))
        assert r2 < r1 and r2 < 1e-7

    def test_iterate_matches_solve_bitwise(self, grid2):
        x = random_field(grid2, np.random.default_rng(3), h_norm=0.5)
        tg = TimeGrid(0, 0.05, 0.01)
        tr = solve_cbf(x, tg, PhysParams())
        for (i, t, u) in iterate_cbf(x, tg, PhysParams()):
            assert t == tr.times[i]
            np.testing.assert_array_equal(u.coeffs, tr.snapshots[i])

    def test_step_matches_solve(self, grid2):
        x = random_field(grid2, np.random.default_rng(4), h_norm=0.5)
        tr = solve_cbf(x, TimeGrid(0, 0.01, 0.01), PhysParams())
        np.testing.assert_array_equal(step_cbf(x, 0.0, 0.01, PhysParams()).coeffs, tr.final.coeffs)

    def test_stride_and_hooks(self, grid2):
        seen = []
        tr = solve_cbf(
            taylor_green(grid2, 0.25), TimeGrid(0, 0.1, 0.01), PhysParams(),
            hooks=[lambda i, t, u: seen.append(i)], stride=3,
        )
        np.testing.assert_allclose(tr.times, [0, 0.03, 0.06, 0.09, 0.1])
        assert seen == list(range(11))
        assert len(tr.budget["t"]) == 11
        assert tr.completed

    def test_interpolation(self, grid2):
        tr = solve_cbf(taylor_green(grid2, 0.25), TimeGrid(0, 0.1, 0.05), PhysParams())
        mid = tr.at(0.025)
        np.testing.assert_allclose(mid.coeffs, 0.5 * (tr.snapshots[0] + tr.snapshots[1]))
        with pytest.raises(BaseTrajectoryError):
            tr.at(0.2)

    def test_states_stay_solenoidal_and_dealiased(self, grid2):
        from cbflab.grid import divergence

        tr = solve_cbf(random_field(grid2, np.random.default_rng(5)), TimeGrid(0, 0.1, 0.01), PhysParams())
        u = tr.final
        assert np.max(np.abs(divergence(u))) < 1e-12
        assert np.all(u.coeffs[:, ~grid2.dealias_mask] == 0)
        assert tr.repair_max < 1e-12

    def test_regime_rejected(self):
        g = Grid(3, 1.0, 8)
        with pytest.raises(RegimeError):
            solve_cbf(random_field(g, np.random.default_rng(0)), TimeGrid(0, 0.01, 0.01), PhysParams(r=2.0))

    def test_guard_halving(self, grid2):
        x = random_field(grid2, np.random.default_rng(6), h_norm=3.0)
        tr = solve_cbf(x, TimeGrid(0, 0.2, 0.1), PhysParams())
        assert tr.halvings > 0 and tr.completed

    def test_stability_error_carries_partial_trajectory(self, grid2):
        x = random_field(grid2, np.random.default_rng(6), h_norm=30.0)
        with pytest.raises(StabilityError) as info:
            solve_cbf(x, TimeGrid(0, 1.0, 0.5), PhysParams(), max_halvings=0)
        assert isinstance(info.value, BlowUpError)
        assert info.value.trajectory is not None and not info.value.trajectory.completed


class TestHeatFlow:
    def test_matches_solver_on_mode(self, grid2):
        p = PhysParams(beta=1e-12, r=1.0)
        x = shear_field(grid2)
        tr = solve_cbf(x, TimeGrid(0, 0.5, 0.01), p)
        assert sobolev_norm(tr.final - heat_flow(x, 0.5, p)) < 1e-10


class TestLinearizedAndAdjoint:
    def test_duality_identity(self, grid2):
        p = PhysParams()
        rng = np.random.default_rng(7)
        tg = TimeGrid(0, 0.1, 5e-3)
        base = solve_cbf(random_field(grid2, rng, h_norm=0.5), tg, p)
        y, q = random_field(grid2, rng), random_field(grid2, rng)
        v = solve_linearized(base, y, tg, p)
        z = solve_adjoint(base, q, tg, p)
        err = abs(inner(v.final, q) - inner(y, z.field(0)))
        assert err < 1e-12 * sobolev_norm(y) * sobolev_norm(q)

    def test_tangent_matches_finite_difference(self, grid2):
        p = PhysParams()
        rng = np.random.default_rng(8)
        tg = TimeGrid(0, 0.1, 1e-3)
        x, y = random_field(grid2, rng, h_norm=0.5), random_field(grid2, rng)
        base = solve_cbf(x, tg, p)
        v = solve_linearized(base, y, tg, p).final
        eps = 1e-5
        fd = (solve_cbf(x + y * eps, tg, p).final - solve_cbf(x - y * eps, tg, p).final) / (2 * eps)
        assert sobolev_norm(v - fd) < 1e-4 * sobolev_norm(fd)

    def test_strided_base_rejected(self, grid2):
        p = PhysParams()
        tg = TimeGrid(0, 0.1, 0.01)
        base = solve_cbf(random_field(grid2, np.random.default_rng(9)), tg, p, stride=2)
        y = random_field(grid2, np.random.default_rng(10))
        with pytest.raises(BaseTrajectoryError):
            solve_linearized(base, y, tg, p)
        solve_linearized(base, y, tg, p, max_gap=0.02)

    def test_base_must_cover_run(self, grid2):
        p = PhysParams()
        base = solve_cbf(random_field(grid2, np.random.default_rng(11)), TimeGrid(0, 0.05, 0.01), p)
        with pytest.raises(BaseTrajectoryError):
            solve_adjoint(base, base.final, TimeGrid(0, 0.1, 0.01), p)


class TestStochastic:
    def test_brownian_path_seeded(self):
        tg = TimeGrid(0, 1.0, 0.01)
        a, b = BrownianPath.sample(3, tg, 0.5), BrownianPath.sample(3, tg, 0.5)
        np.testing.assert_array_equal(a.W, b.W)
        assert a.W[0] == 0.0
        np.testing.assert_allclose(a.z, np.exp(-0.5 * a.W))

    def test_brownian_increment_variance(self):
        tg = TimeGrid(0, 100.0, 0.01)
        W = BrownianPath.sample(0, tg, 1.0).W
        assert np.var(np.diff(W)) == pytest.approx(0.01, rel=0.05)

    def test_range_check(self):
        tg = TimeGrid(0, 1.0, 0.5)
        path = BrownianPath(0, tg.times, np.array([0.0, 1.0, 2.0]), 400.0)
        with pytest.raises(BlowUpError):
            path.check_range()

    def test_sigma_zero_matches_deterministic(self, grid2):
        p = PhysParams(sigma=0.0)
        tg = TimeGrid(0, 0.1, 0.01)
        x = random_field(grid2, np.random.default_rng(12), h_norm=0.5)
        _, u = solve_stochastic(x, tg, p, None, BrownianPath.sample(0, tg, 0.0))
        det = solve_cbf(x, tg, p)
        assert sobolev_norm(u.final - det.final) <= 1e-12 * sobolev_norm(det.final)

    def test_bit_reproducible(self, grid2):
        p = PhysParams(sigma=0.5)
        tg = TimeGrid(0, 0.05, 0.01)
        x = random_field(grid2, np.random.default_rng(13), h_norm=0.5)
        a = solve_stochastic(x, tg, p, None, BrownianPath.sample(4, tg, 0.5))[1].final
        b = solve_stochastic(x, tg, p, None, BrownianPath.sample(4, tg, 0.5))[1].final
        np.testing.assert_array_equal(a.coeffs, b.coeffs)

    def test_path_grid_mismatch(self, grid2):
        tg = TimeGrid(0, 0.05, 0.01)
        x = random_field(grid2, np.random.default_rng(14))
        with pytest.raises(ValueError):
            solve_stochastic(x, tg, PhysParams(sigma=0.1), None, BrownianPath.sample(0, TimeGrid(0, 0.1, 0.01), 0.1))

    def test_pure_noise_mode_scaling(self, grid2):
        # r = 1 shear with frozen-z stepping: v = z u solves a linear equation with
        # decay mu lambda + alpha + sigma^2/2 + beta, independent of the path
        p = PhysParams(mu=0.05, alpha=0.1, beta=0.3, r=1.0, sigma=0.4)
        tg = TimeGrid(0, 0.5, 1e-3)
        x = shear_field(grid2)
        path = BrownianPath.sample(2, tg, p.sigma)
        v, u = solve_stochastic(x, tg, p, None, path)
        rate = p.mu * grid2.lambda1 + p.alpha + 0.5 * p.sigma**2 + p.beta
        assert sobolev_norm(v.final - x * math.exp(-rate * 0.5)) < 1e-6
        np.testing.assert_allclose(u.final.coeffs, v.final.coeffs / path.z[-1])
