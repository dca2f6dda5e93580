"""Rank-r self-consistent equations for the limiting Stieltjes transform.

For a profile with factor vectors ``gamma[k]`` and ``z`` in the upper
half-plane the unknowns ``u[k]`` solve

    u[k] = -(1/N) sum_i gamma[k, i] / (z + sum_l gamma[l, i] u[l])

and ``m = -(1/N) sum_i 1 / (z + sum_l gamma[l, i] u[l])``. The per-site
values ``g_i = -1/(z + sum_l gamma[l, i] u[l])`` approximate the diagonal
resolvent entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._iteration import SolverOptions, csum, damped_solve, eta_path
from .ensemble import EnsembleSpec
from .errors import GridSolveError, LeftUpperHalfPlane, NoConvergence

DEFAULT_BULK_THRESHOLD = 0.05
SPECTRAL_RADIUS_SLACK = 1e-8


class _LowRankSystem:
    """The map ``u -> F(u)`` for weighted sums over sites.

    ``weights`` are the quadrature weights of the site sum; ``1/N`` each for
    the finite system.
    """

    def __init__(self, gammas, weights, z, rhs=None):
        self.G = np.asarray(gammas, dtype=float)
        self.w = np.asarray(weights, dtype=float)
        self.z = complex(z)
        self.rhs = None if rhs is None else np.asarray(rhs, dtype=complex)
        self._Gw = self.G * self.w

    def denominators(self, u):
        return self.z + u @ self.G

    def F(self, u):
        inv = 1.0 / self.denominators(u)
        out = np.array([-csum(row * inv) for row in self._Gw])
        if self.rhs is not None:
            out = out + self.rhs
        return out

    def newton_direction(self, u, Fu):
        inv2 = 1.0 / self.denominators(u) ** 2
        DF = (self._Gw * inv2) @ self.G.T
        J = np.eye(len(u)) - DF
        try:
            return np.linalg.solve(J, -(u - Fu))
        except np.linalg.LinAlgError:
            return None

    def m(self, u):
        return -csum(self.w / self.denominators(u))

    def solve(self, u0, opts):
        return damped_solve(u0, self.F, opts, self.newton_direction)


def _cold_start(gammas, weights):
    return 1j * (np.asarray(gammas) @ np.asarray(weights))


def _solve_with_fallback(system_at, z, u0, opts):
    """Solve at ``z``; on failure walk down an eta-continuation path."""
    system = system_at(z)
    try:
        return system.solve(u0, opts)
    except (NoConvergence, LeftUpperHalfPlane):
        if not opts.continuation:
            raise
    total = 0
    u = None
    for zz in eta_path(complex(z)):
        sysz = system_at(zz)
        start = u if u is not None else _cold_start(sysz.G, sysz.w)
        u, res, it = sysz.solve(start, opts)
        total += it
    return u, res, total


@dataclass(frozen=True)
class SceSolution:
    z: complex
    u: np.ndarray
    m: complex
    residual: float
    iterations: int
    spec: EnsembleSpec = field(repr=False)

    @property
    def g(self) -> np.ndarray:
        """Per-site values, always recomputed from ``u``."""
        return -1.0 / (self.z + self.u @ self.spec.gammas)

    @property
    def rank(self) -> int:
        return len(self.u)


def solve_sce(spec: EnsembleSpec, z, opts: SolverOptions | None = None, u0=None, rhs=None) -> SceSolution:
    """Solve the rank-r system at ``z``.

    ``u0`` overrides the cold start ``i * (1/N) sum_i gamma[k, i]``; ``rhs``
    adds a constant to the right-hand side (used to probe stability).
    """
    z = complex(z)
    if z.imag <= 0:
        raise ValueError(f"Im z must be positive, got {z}")
    opts = opts or SolverOptions()
    w = np.full(spec.N, 1.0 / spec.N)
    system_at = lambda zz: _LowRankSystem(spec.gammas, w, zz, rhs)  # noqa: E731
    start = _cold_start(spec.gammas, w) if u0 is None else np.asarray(u0, dtype=complex)
    u, res, it = _solve_with_fallback(system_at, z, start, opts)
    m = system_at(z).m(u)
    return SceSolution(z=z, u=u, m=m, residual=res, iterations=it, spec=spec)


def sce_residual(spec: EnsembleSpec, z, u) -> float:
    """``max_k |u[k] + (1/N) sum_i gamma[k,i] / (z + gamma_i . u)|``."""
    system = _LowRankSystem(spec.gammas, np.full(spec.N, 1.0 / spec.N), z)
    u = np.asarray(u, dtype=complex)
    return float(np.max(np.abs(u - system.F(u))))


def solve_grid(spec: EnsembleSpec, zs, opts: SolverOptions | None = None) -> list[SceSolution]:
    """Solve along ``zs`` in order, warm-starting each point from the previous one.

    Best ordered by decreasing ``Im z``.
    """
    zs = [complex(z) for z in zs]
    bad = [k for k, z in enumerate(zs) if z.imag <= 0]
    if bad:
        raise ValueError(f"grid points {bad} are not in the upper half-plane")
    out = []
    prev = None
    for k, z in enumerate(zs):
        try:
            sol = solve_sce(spec, z, opts, u0=None if prev is None else prev.u)
        except (NoConvergence, LeftUpperHalfPlane) as exc:
            raise GridSolveError(k, z, exc) from exc
        out.append(sol)
        prev = sol
    return out


# stability ---------------------------------------------------------------

@dataclass(frozen=True)
class StabilityCertificate:
    T: np.ndarray
    spectral_radius: float
    distance_to_one: float
    # infinity-norm of (I - T1)^-1, the linearised response of u to the rhs
    linear_response: float

    @property
    def ok(self) -> bool:
        return self.spectral_radius <= 1.0 + SPECTRAL_RADIUS_SLACK


def stability_certificate(solution: SceSolution) -> StabilityCertificate:
    G = solution.spec.gammas
    N = G.shape[1]
    D = solution.z + solution.u @ G
    T = (G / np.abs(D) ** 2) @ G.T / N
    T = 0.5 * (T + T.T)
    ev = np.linalg.eigvalsh(T)
    rho = float(np.max(np.abs(ev)))
    T1 = (G / D**2) @ G.T / N
    try:
        resp = float(np.linalg.norm(np.linalg.inv(np.eye(len(T1)) - T1), ord=np.inf))
    except np.linalg.LinAlgError:
        resp = float("inf")
    return StabilityCertificate(T=T, spectral_radius=rho, distance_to_one=1.0 - float(ev[-1]),
                                linear_response=resp)


def stability_response(spec: EnsembleSpec, z, eps_list=(1e-4, 1e-5, 1e-6), seed: int = 0,
                       opts: SolverOptions | None = None) -> np.ndarray:
    """Measured ``max|u' - u| / eps`` when the right-hand side moves by ``eps``.

    The perturbation direction is a seeded random complex vector scaled so
    that its largest component has modulus ``eps``.
    """
    opts = opts or SolverOptions()
    base = solve_sce(spec, z, opts)
    rng = np.random.default_rng(seed)
    d = rng.standard_normal(spec.rank) + 1j * rng.standard_normal(spec.rank)
    d /= np.max(np.abs(d))
    ratios = []
    for eps in eps_list:
        pert = solve_sce(spec, z, opts, u0=base.u, rhs=eps * d)
        ratios.append(float(np.max(np.abs(pert.u - base.u))) / eps)
    return np.array(ratios)


# bulk detection --------------------------------------------------------------

def detect_bulk(grid_solutions, c_threshold: float = DEFAULT_BULK_THRESHOLD,
                eta_probe: float | None = None, eta_max: float = 1.0) -> list[tuple[float, float]]:
    """Maximal E-intervals on which ``Im m > c_threshold`` at every probed eta.

    ``grid_solutions`` holds solutions on an E-grid at several eta levels;
    only levels in ``[eta_probe, eta_max]`` count. Returns ``[(E_lo, E_hi), ...]``
    whose endpoints are grid points.
    """
    if eta_probe is None:
        eta_probe = min(s.z.imag for s in grid_solutions)
    lo, hi = eta_probe * (1 - 1e-9), eta_max * (1 + 1e-9)
    ok_at: dict[float, bool] = {}
    for sol in grid_solutions:
        if not lo <= sol.z.imag <= hi:
            continue
        E = round(sol.z.real, 12)
        ok_at[E] = ok_at.get(E, True) and sol.m.imag > c_threshold
    intervals = []
    start = prev = None
    for E in sorted(ok_at):
        if ok_at[E]:
            if start is None:
                start = E
            prev = E
        elif start is not None:
            intervals.append((start, prev))
            start = None
    if start is not None:
        intervals.append((start, prev))
    return intervals


def bulk_eta_levels(eta_probe: float, eta_max: float = 1.0, per_decade: int = 2) -> list[float]:
    """Descending eta levels from ``eta_max`` to ``eta_probe``."""
    n = max(2, int(np.ceil(np.log10(eta_max / eta_probe) * per_decade)) + 1)
    return list(np.geomspace(eta_max, eta_probe, n))


def bulk_scan(spec: EnsembleSpec, E_grid, eta_probe: float, c_threshold: float = DEFAULT_BULK_THRESHOLD,
              eta_levels=None, opts: SolverOptions | None = None):
    """Solve on ``E_grid`` x eta-levels and return ``(intervals, solutions)``."""
    levels = bulk_eta_levels(eta_probe) if eta_levels is None else sorted(eta_levels, reverse=True)
    sols = []
    for E in E_grid:
        sols.extend(solve_grid(spec, [complex(E, eta) for eta in levels], opts))
    return detect_bulk(sols, c_threshold, eta_probe=min(levels)), sols
