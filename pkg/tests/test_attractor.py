from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbflab.attractor import (
    AttractorSample,
    check_deviation,
    deviation_scale,
    epsilon_n,
    kolmogorov_forcing,
    maximal_set_363,
    project_Pn_Qn,
    relative_drift,
    sample_attractor,
    save_sample,
    tail_inequality_gap,
    weyl_trend,
)
from cbflab.diagnostics import log_lipschitz_ratios
from cbflab.grid import Grid, divergence, inner, random_field, sobolev_norm, stokes_spectrum
from cbflab.io import read_checkpoint
from cbflab.operators import PhysParams


@pytest.fixture(scope="module")
def grid2():
    return Grid(2, 1.0, 16)


@pytest.fixture(scope="module")
def spec2(grid2):
    return stokes_spectrum(grid2)


class TestProjections:
    def test_split_is_orthogonal_and_complete(self, grid2, spec2):
        u = random_field(grid2, np.random.default_rng(0))
        for n in (0, 3, 10, len(spec2)):
            p, q = project_Pn_Qn(u, n, spec2)
            np.testing.assert_allclose((p + q).coeffs, u.coeffs)
            assert abs(inner(p, q)) < 1e-15
            pp, _ = project_Pn_Qn(p, n, spec2)
            np.testing.assert_array_equal(pp.coeffs, p.coeffs)

    def test_extremes(self, grid2, spec2):
        u = random_field(grid2, np.random.default_rng(1))
        assert sobolev_norm(project_Pn_Qn(u, 0, spec2)[0]) == 0
        assert sobolev_norm(project_Pn_Qn(u, len(spec2), spec2)[1]) == 0

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(0, 50))
    def test_tail_inequality(self, seed, n):
        g = Grid(2, 1.0, 16)
        w = random_field(g, np.random.default_rng(seed))
        lhs, rhs = tail_inequality_gap(w, n)
        assert lhs <= rhs * (1 + 1e-12)

    def test_tail_inequality_tight_on_eigenmode(self, grid2, spec2):
        # w supported on the (n+1)-th pair: equality
        n = 5
        c = np.zeros(grid2.field_shape, dtype=complex)
        mask = spec2.pn_mask(n + 1) & ~spec2.pn_mask(n)
        c[0][mask] = 1.0
        c[1][mask] = 1.0
        from cbflab.grid import SpectralField, hermitian_repair, leray_coeffs

        w = SpectralField(grid2, hermitian_repair(leray_coeffs(grid2, c), grid2.axes))
        lhs, rhs = tail_inequality_gap(w, n, spec2)
        assert lhs == pytest.approx(rhs, rel=1e-13)


class TestDeviationScale:
    def test_reference_value(self):
        assert epsilon_n(1.0, 1.0, 8 * math.pi**2) == pytest.approx(2 * math.exp(-4 * math.pi**2), rel=1e-15)

    def test_strictly_decreasing_in_lambda(self, spec2):
        eps = [epsilon_n(2.0, 50.0, lam) for lam in np.unique(spec2.eigenvalues)]
        assert np.all(np.diff(eps) < 0)

    def test_from_constants(self, spec2):
        sc = deviation_scale(None, spec2, 4, C0=10.0, M0=2.0)
        assert sc.lambda_next == spec2.lambda_(5)
        assert sc.epsilon_n == pytest.approx(4.0 * math.exp(-sc.lambda_next / 20.0))
        assert sc.half_bound_rigorous == pytest.approx(2.0 * math.exp(-sc.lambda_next / 80.0))
        with pytest.raises(ValueError):
            deviation_scale(None, spec2, 4)
        with pytest.raises(ValueError):
            deviation_scale(None, spec2, 4, C0=-1.0, M0=1.0)

    def test_from_report(self, grid2, spec2):
        rng = np.random.default_rng(2)
        pts = [random_field(grid2, rng, h_norm=0.3) for _ in range(3)]
        rep = log_lipschitz_ratios([(pts[0], pts[1]), (pts[0], pts[2])])
        sc = deviation_scale(rep, spec2, 6)
        assert sc.C0 == pytest.approx(1.1 * rep.ratio_360)
        assert sc.M0 == rep.M0


class TestMaximalSet:
    def test_relation_holds_on_kept_and_fails_for_rejected(self, grid2, spec2):
        rng = np.random.default_rng(3)
        pts = [random_field(grid2, rng, slope=1.0) for _ in range(12)]
        n = 6
        kept = maximal_set_363(pts, n, spec2)
        assert kept and kept[0] == 0
        for a in kept:
            for b in kept:
                p, q = project_Pn_Qn(pts[a] - pts[b], n, spec2)
                assert sobolev_norm(q) <= sobolev_norm(p)
        for i in set(range(len(pts))) - set(kept):
            assert any(
                sobolev_norm(project_Pn_Qn(pts[i] - pts[j], n, spec2)[1])
                > sobolev_norm(project_Pn_Qn(pts[i] - pts[j], n, spec2)[0])
                for j in kept
            )
        chk = check_deviation(pts, kept, n, deviation_scale(None, spec2, n, C0=100.0, M0=4.0), spec2)
        assert chk["max_Qn_violating"] > 0
        assert set(chk) >= {"half_epsilon", "half_bound_rigorous", "within_epsilon", "within_rigorous"}

    def test_empty(self):
        assert maximal_set_363([], 3) == []


class TestDrift:
    def test_linear_series(self):
        s = np.linspace(1.0, 1.1, 101)
        assert relative_drift(s) == pytest.approx(0.1 / 1.05, rel=1e-10)

    def test_oscillation_drift_shrinks_with_window(self):
        # a zero-mean oscillation only leaks amplitude / (number of periods) into the trend
        short = relative_drift(1.0 + 0.1 * np.sin(np.linspace(0, 40 * np.pi, 4001)))
        long = relative_drift(1.0 + 0.1 * np.sin(np.linspace(0, 400 * np.pi, 40001)))
        assert short < 0.01
        assert long == pytest.approx(short / 10, rel=0.05)

    def test_degenerate(self):
        assert relative_drift(np.array([1.0])) == 0.0


class TestSampling:
    def test_small_sample(self, tmp_path):
        g = Grid(2, 1.0, 16)
        p = PhysParams(mu=0.01)
        f = kolmogorov_forcing(g, 0.5, 2)
        s = sample_attractor(g, p, f, 0.01, n_initial=2, burn_in=1.0, n_snapshots=2, spacing=0.5, seed=3)
        assert isinstance(s, AttractorSample)
        assert len(s) == 4 and s.source == [0, 0, 1, 1]
        np.testing.assert_allclose(s.times, [1.0, 1.5, 1.0, 1.5])
        for u in s.points:
            assert np.all(u.coeffs[(slice(None),) + (0,) * g.d] == 0)
            assert np.max(np.abs(divergence(u))) < 1e-12
            assert sobolev_norm(u) <= s.radius
        out = save_sample(s, tmp_path / "sample", p, {"C0": 1.0})
        man = json.loads((out / "manifest.json").read_text())
        assert man["files"][0] == "point_0000.cbf" and man["C0"] == 1.0
        u0, p0, t0 = read_checkpoint(out / man["files"][0])
        np.testing.assert_array_equal(u0.coeffs, s.points[0].coeffs)
        assert p0 == p and t0 == 1.0

    def test_needs_initial_conditions(self):
        g = Grid(2, 1.0, 8)
        with pytest.raises(ValueError):
            sample_attractor(g, PhysParams(), kolmogorov_forcing(g), 0.01, n_initial=0)


class TestWeyl:
    @pytest.mark.parametrize("d,N", [(2, 32), (3, 16)])
    def test_growth_and_ratio(self, d, N):
        w = weyl_trend(stokes_spectrum(Grid(d, 1.0, N)))
        assert w["expected_exponent"] == 2.0 / d
        assert w["growth_exponent"] == pytest.approx(2.0 / d, rel=0.1)
        assert w["eventually_decreasing"]
        assert np.all(w["ratio"] > 0)
