import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clspec import ensemble as ens
from clspec._iteration import SolverOptions
from clspec.errors import GridSolveError, NoConvergence
from clspec.sce import (
    bulk_scan,
    detect_bulk,
    sce_residual,
    solve_grid,
    solve_sce,
    stability_certificate,
    stability_response,
)

from oracles import semicircle_m

# Frozen output of oracles.continuation_fixed_point for N=1000, gamma1 = power law
# (mu=0.25), gamma2 = 1, z = 0.5 + 0.01i (extended precision, tol 1e-14).
ORACLE_U = np.array([-0.11806089274442769 + 0.7742524743803202j, -0.09866797681998568 + 0.6072890343222876j])
ORACLE_M = -0.09866797681999326 + 0.6072890343222862j
ORACLE_T = np.array([[0.6200427869735478, 0.47657223113862407], [0.47657223113862407, 0.386045745011305]])


@pytest.fixture(scope="module")
def flat_spec():
    return ens.build_spec(100, 0.5, np.ones(100))


@pytest.fixture(scope="module")
def rank_two_spec():
    N = 1000
    # kappa does not enter the equations; 0.45 keeps q*s_11 below 1
    return ens.build_spec(N, 0.45, np.vstack([ens.power_law_profile(N, 0.25), np.ones(N)]))


@pytest.fixture(scope="module")
def power_spec():
    return ens.build_spec(1000, 0.5, ens.power_law_profile(1000, 0.25))


def test_semicircle_at_2i(flat_spec):
    sol = solve_sce(flat_spec, 2j)
    assert sol.m == pytest.approx(1j * (math.sqrt(2) - 1), abs=1e-12)
    assert sol.u[0] == pytest.approx(1j * (math.sqrt(2) - 1), abs=1e-12)
    assert sol.residual <= 1e-12


def test_constant_two_dilation():
    spec = ens.build_spec(100, 0.1, np.full(100, 2.0))
    sol = solve_sce(spec, 2j)
    assert sol.m == pytest.approx(0.5 * 1j * (math.sqrt(5) - 1) / 2, abs=1e-12)
    assert sol.m == pytest.approx(0.309017j, abs=1e-6)
    assert sol.u[0] == pytest.approx(0.618034j, abs=1e-6)


def test_rank_two_continuation_oracle(rank_two_spec):
    sol = solve_sce(rank_two_spec, 0.5 + 0.01j)
    np.testing.assert_allclose(sol.u, ORACLE_U, atol=1e-10)
    assert abs(sol.m - ORACLE_M) <= 1e-10
    cert = stability_certificate(sol)
    np.testing.assert_allclose(cert.T, ORACLE_T, atol=1e-9)
    assert cert.spectral_radius < 1.0
    assert cert.spectral_radius == pytest.approx(0.99376796, abs=1e-7)


def test_g_is_recomputed(power_spec):
    sol = solve_sce(power_spec, 0.3 + 0.1j)
    expected = -1.0 / (sol.z + sol.u @ power_spec.gammas)
    np.testing.assert_array_equal(sol.g, expected)
    assert sol.m == pytest.approx(np.mean(sol.g), abs=1e-13)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(1e-3, 10))
def test_herglotz_and_bounds(E, eta):
    spec = ens.build_spec(200, 0.5, ens.power_law_profile(200, 0.2))
    z = complex(E, eta)
    sol = solve_sce(spec, z)
    assert np.all(sol.u.imag > 0) and sol.m.imag > 0
    assert abs(sol.m) <= 1 / eta * (1 + 1e-12)
    avg = spec.gammas.mean(axis=1)
    assert np.all(np.abs(sol.u) <= avg / eta * (1 + 1e-12))
    assert sol.residual <= 1e-12
    assert sce_residual(spec, z, sol.u) <= 1e-12
    assert stability_certificate(sol).spectral_radius <= 1 + 1e-8


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(1e-3, 10))
def test_semicircle_property(E, eta):
    spec = ens.build_spec(50, 0.5, np.ones(50))
    z = complex(E, eta)
    assert abs(solve_sce(spec, z).m - semicircle_m(z)) <= 1e-10


@pytest.mark.parametrize("r", [2, 3])
def test_semicircle_reduction_any_rank(r):
    spec = ens.build_spec(60, 0.5, np.ones((r, 60)))
    for z in (0.3 + 0.05j, -1.2 + 0.5j, 2j):
        sol = solve_sce(spec, z)
        assert np.max(np.abs(sol.u - sol.u[0])) <= 1e-12
        w = sol.u.sum()
        assert w == pytest.approx(-r / (z + w), abs=1e-11)
        closed = (-z + cmath.sqrt(z - 2 * math.sqrt(r)) * cmath.sqrt(z + 2 * math.sqrt(r))) / 2
        assert w == pytest.approx(closed, abs=1e-11)


@pytest.mark.parametrize("c", [2.0, 3.0])
def test_scaling_covariance(c):
    spec = ens.build_spec(100, 0.1, np.full(100, c))
    for z in (0.5 + 0.01j, -2.0 + 0.3j, 4.0 + 1e-3j):
        assert abs(solve_sce(spec, z).m - semicircle_m(z / c) / c) <= 1e-10


def test_uniqueness_from_two_starts(power_spec):
    avg = power_spec.gammas.mean(axis=1)
    z = 0.2 + 0.005j
    a = solve_sce(power_spec, z, u0=1j * avg)
    b = solve_sce(power_spec, z, u0=2j * avg)
    assert np.max(np.abs(a.u - b.u)) <= 10 * 1e-12


def test_grid_semicircle_and_warm_start(flat_spec):
    sols = solve_grid(flat_spec, [10j, 5j, 2j])
    for s in sols:
        eta = s.z.imag
        assert s.m == pytest.approx(1j * (math.sqrt(eta**2 + 4) - eta) / 2, abs=1e-12)
    single = solve_grid(flat_spec, [0.4 + 0.2j])[0]
    direct = solve_sce(flat_spec, 0.4 + 0.2j)
    np.testing.assert_array_equal(single.u, direct.u)


def test_long_grid_to_axis(power_spec):
    zs = [complex(2.0, eta) for eta in np.geomspace(10, 1e-3, 50)]
    sols = solve_grid(power_spec, zs)
    assert len(sols) == 50
    assert max(s.residual for s in sols) <= 1e-12


def test_grid_errors(flat_spec):
    with pytest.raises(ValueError):
        solve_grid(flat_spec, [1j, 0.5 + 0j])
    with pytest.raises(ValueError):
        solve_sce(flat_spec, 1 - 1j)
    opts = SolverOptions(max_iter=1, continuation=False)
    with pytest.raises(GridSolveError) as info:
        solve_grid(flat_spec, [0.5 + 1e-3j], opts)
    assert info.value.index == 0


def test_no_convergence_carries_best_iterate(flat_spec):
    with pytest.raises(NoConvergence) as info:
        solve_sce(flat_spec, 0.5 + 1e-3j, SolverOptions(max_iter=1, continuation=False))
    err = info.value
    assert err.best is not None and len(err.best) == 1
    assert err.residual > 0


def test_plain_picard_stalls_near_axis():
    # motivates the Newton default: the literal damped map fails here
    spec = ens.build_spec(10, 0.5, np.ones(10))
    with pytest.raises(NoConvergence):
        solve_sce(spec, 0.01 + 1e-3j, SolverOptions(method="picard", continuation=False))
    sol = solve_sce(spec, 0.01 + 1e-3j)
    assert abs(sol.m - semicircle_m(0.01 + 1e-3j)) <= 1e-10


def test_certificate_scalar_case(flat_spec):
    cert = stability_certificate(solve_sce(flat_spec, 2j))
    assert cert.T[0, 0] == pytest.approx((math.sqrt(2) - 1) ** 2, abs=1e-12)
    assert cert.T[0, 0] == pytest.approx(0.171573, abs=1e-6)
    assert cert.ok
    assert cert.distance_to_one == pytest.approx(1 - cert.T[0, 0])


def test_certificate_symmetric_nonnegative(rank_two_spec):
    for z in (0.1 + 0.5j, -1.0 + 0.01j, 3.0 + 0.1j):
        cert = stability_certificate(solve_sce(rank_two_spec, z))
        assert np.all(cert.T >= 0)
        np.testing.assert_array_equal(cert.T, cert.T.T)
        assert cert.ok


def test_stability_response_stable_across_eps(power_spec):
    ratios = stability_response(power_spec, 0.2 + 0.01j, (1e-4, 1e-5, 1e-6))
    assert np.all(np.isfinite(ratios))
    assert ratios.max() / ratios.min() <= 1.1
    cert = stability_certificate(solve_sce(power_spec, 0.2 + 0.01j))
    assert ratios[-1] <= cert.linear_response * (1 + 1e-3)


def test_detect_bulk_semicircle():
    spec = ens.build_spec(50, 0.5, np.ones(50))
    E = np.round(np.arange(-3, 3.0001, 0.01), 10)
    intervals, _ = bulk_scan(spec, E, 1e-3, c_threshold=0.1)
    assert len(intervals) == 1
    lo, hi = intervals[0]
    edge = math.sqrt(3.96)
    assert abs(lo + edge) <= 0.02 and abs(hi - edge) <= 0.02


def test_detect_bulk_threshold_above_sup():
    spec = ens.build_spec(50, 0.5, np.ones(50))
    intervals, sols = bulk_scan(spec, np.linspace(-3, 3, 31), 1e-2, c_threshold=2.0)
    assert intervals == []
    assert detect_bulk(sols, 2.0) == []


def test_detect_bulk_power_law(power_spec):
    intervals, _ = bulk_scan(power_spec, np.linspace(-3, 3, 61), 1e-2, c_threshold=0.05)
    assert intervals
    assert any(lo <= 0 <= hi for lo, hi in intervals)


def test_detect_bulk_ignores_levels_outside_window(flat_spec):
    sols = solve_grid(flat_spec, [0.0 + 5j]) + solve_grid(flat_spec, [0.0 + 0.1j])
    # Im m at 5i is below 0.2, but that level lies above eta_max
    assert detect_bulk(sols, 0.2, eta_probe=0.1, eta_max=1.0) == [(0.0, 0.0)]
