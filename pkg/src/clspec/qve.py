"""Kernel form of the self-consistent equation on a dyadic grid.

The unknown is a staircase function ``g`` on ``n = 2**k`` cells of [0, 1]
solving ``g_a = -1/(z + (1/n) sum_b s_ab g_b)`` where ``s_ab`` is the cell
average of the kernel ``s(x, y)``. For a low-rank profile the kernel is
``s(x, y) = sum_k f_k(x) f_k(y)`` with ``f_k`` the step function of
``gamma[k]``, so with ``n = N`` cells this is the same system the SCE solver
handles through the ``r`` averaged unknowns.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, gmres

from ._iteration import SolverOptions, damped_solve, eta_path
from .ensemble import DEFAULT_FLATNESS_BOUND
from .errors import DomainViolation, LeftUpperHalfPlane, NoConvergence, ViolatedFlatness
from .sce import _LowRankSystem, _solve_with_fallback

log = logging.getLogger(__name__)

# dense Newton solves below this size, GMRES above
DIRECT_SOLVE_MAX = 512


class KernelKind(str, enum.Enum):
    LOW_RANK = "low_rank"
    FLAT = "flat"
    EXPLICIT = "explicit"


def _is_power_of_two(n):
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class KernelGrid:
    s_values: np.ndarray = field(repr=False)
    kind: KernelKind = KernelKind.EXPLICIT
    bounds: tuple[float, float] | None = None

    def __post_init__(self):
        s = np.asarray(self.s_values, dtype=float)
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise ValueError(f"kernel must be square, got shape {s.shape}")
        if not _is_power_of_two(s.shape[0]):
            raise ValueError(f"grid size must be a power of two, got {s.shape[0]}")
        if not np.all(np.isfinite(s)) or np.any(s < 0):
            raise ValueError("kernel values must be finite and nonnegative")
        if not np.array_equal(s, s.T):
            raise ValueError("kernel must be symmetric")
        if self.kind is KernelKind.FLAT:
            if self.bounds is None:
                raise ValueError("flat kernels need bounds (c, C)")
            c, C = self.bounds
            if not 0 < c <= C:
                raise ValueError(f"flat bounds need 0 < c <= C, got {self.bounds}")
            if s.min() < c or s.max() > C:
                raise ValueError(f"flat kernel values leave [{c}, {C}]")
        s.setflags(write=False)
        object.__setattr__(self, "s_values", s)

    @property
    def n(self) -> int:
        return self.s_values.shape[0]

    @property
    def has_zero_cells(self) -> bool:
        return bool(np.any(self.s_values == 0))


def constant_kernel(n: int, value: float = 1.0) -> KernelGrid:
    return KernelGrid(np.full((n, n), float(value)), KernelKind.FLAT, (float(value), float(value)))


def function_kernel(fn, n: int, bounds=None) -> KernelGrid:
    """Evaluate a symmetric ``fn(x, y)`` at the cell midpoints.

    With ``bounds=(c, C)`` the result is a flat kernel checked against them.
    """
    x = (np.arange(n) + 0.5) / n
    s = np.asarray(fn(x[:, None], x[None, :]), dtype=float) * np.ones((n, n))
    s = 0.5 * (s + s.T)
    kind = KernelKind.FLAT if bounds is not None else KernelKind.EXPLICIT
    return KernelGrid(s, kind, None if bounds is None else tuple(map(float, bounds)))


def cell_averages(values, n: int) -> np.ndarray:
    """Averages of the step function ``sum_i values[i] 1[(i)/N, (i+1)/N)`` over ``n`` equal cells."""
    v = np.asarray(values, dtype=float)
    N = len(v)
    cum = np.concatenate([[0.0], np.cumsum(v) / N])
    edges = np.arange(n + 1) / n
    F = np.interp(edges, np.arange(N + 1) / N, cum)
    return np.diff(F) * n


def low_rank_kernel(gammas, n: int | None = None) -> KernelGrid:
    """Kernel ``sum_k f_k(x) f_k(y)`` of a profile, averaged over ``n`` cells (default ``N``)."""
    G = np.asarray(gammas, dtype=float)
    if G.ndim == 1:
        G = G[None, :]
    n = G.shape[1] if n is None else n
    fbar = np.vstack([cell_averages(row, n) for row in G])
    s = fbar.T @ fbar
    return KernelGrid(0.5 * (s + s.T), KernelKind.LOW_RANK)


def csv_kernel(path) -> KernelGrid:
    return KernelGrid(np.loadtxt(path, delimiter=",", ndmin=2), KernelKind.EXPLICIT)


def perturb_kernel(kernel: KernelGrid, delta) -> KernelGrid:
    """``kernel + delta`` (scalar or symmetric array) as an explicit kernel."""
    return KernelGrid(kernel.s_values + np.asarray(delta, dtype=float), KernelKind.EXPLICIT)


def kernel_distance(a: KernelGrid, b: KernelGrid) -> float:
    """Frobenius norm of the cell differences divided by ``n`` (discrete L2 on [0,1]^2)."""
    return float(np.linalg.norm(a.s_values - b.s_values)) / a.n


# solver ------------------------------------------------------------------

@dataclass(frozen=True)
class QveSolution:
    z: complex
    g: np.ndarray
    residual: float
    iterations: int

    @property
    def m0(self) -> complex:
        return complex(np.mean(self.g))


class _KernelSystem:
    def __init__(self, kernel: KernelGrid, z, rhs=None):
        self.S = kernel.s_values
        self.n = kernel.n
        self.z = complex(z)
        self.rhs = None if rhs is None else np.asarray(rhs, dtype=complex)

    def Sg(self, g):
        return (self.S @ g.real + 1j * (self.S @ g.imag)) / self.n

    def F(self, g):
        out = -1.0 / (self.z + self.Sg(g))
        if self.rhs is not None:
            out = out + self.rhs
        return out

    def newton_direction(self, g, Fg):
        f0 = -1.0 / (self.z + self.Sg(g))
        d2 = f0**2
        b = -(g - Fg)
        if self.n <= DIRECT_SOLVE_MAX:
            J = np.eye(self.n) - d2[:, None] * self.S / self.n
            try:
                return np.linalg.solve(J, b)
            except np.linalg.LinAlgError:
                return None
        op = LinearOperator((self.n, self.n), matvec=lambda v: v - d2 * self.Sg(v), dtype=complex)
        x, info = gmres(op, b, rtol=1e-13, atol=0.0, restart=50, maxiter=20)
        return x if np.all(np.isfinite(x)) else None

    def solve(self, g0, opts):
        return damped_solve(g0, self.F, opts, self.newton_direction)


def solve_qve(kernel: KernelGrid, z, opts: SolverOptions | None = None, g0=None, rhs=None) -> QveSolution:
    """Solve the kernel equation at ``z``; cold start ``g = i``."""
    z = complex(z)
    if z.imag <= 0:
        raise ValueError(f"Im z must be positive, got {z}")
    opts = opts or SolverOptions()
    start = np.full(kernel.n, 1j) if g0 is None else np.asarray(g0, dtype=complex)
    system = _KernelSystem(kernel, z, rhs)
    try:
        g, res, it = system.solve(start, opts)
    except (NoConvergence, LeftUpperHalfPlane):
        if not opts.continuation:
            raise
        g, it = None, 0
        for zz in eta_path(z):
            g, res, k = _KernelSystem(kernel, zz, rhs).solve(np.full(kernel.n, 1j) if g is None else g, opts)
            it += k
    return QveSolution(z=z, g=g, residual=res, iterations=it)


def solve_qve_grid(kernel: KernelGrid, zs, opts: SolverOptions | None = None) -> list[QveSolution]:
    out, prev = [], None
    for z in zs:
        sol = solve_qve(kernel, z, opts, g0=None if prev is None else prev.g)
        out.append(sol)
        prev = sol
    return out


def qve_residual(kernel: KernelGrid, z, g) -> float:
    system = _KernelSystem(kernel, z)
    g = np.asarray(g, dtype=complex)
    return float(np.max(np.abs(g - system.F(g))))


# limiting integral system ----------------------------------------------------

def midpoint_nodes(n: int) -> tuple[np.ndarray, np.ndarray]:
    return (np.arange(n) + 0.5) / n, np.full(n, 1.0 / n)


@dataclass(frozen=True)
class LimitSolution:
    z: complex
    u: np.ndarray
    m0: complex
    residual: float
    iterations: int


def check_limit_profile(f_values, weights, flatness_bound=DEFAULT_FLATNESS_BOUND):
    f = np.atleast_2d(np.asarray(f_values, dtype=float))
    if np.any(f < 1.0):
        k, a = np.argwhere(f < 1.0)[0]
        raise DomainViolation(f"f_{k} = {f[k, a]} < 1 at node {a}")
    norms = (f**2) @ np.asarray(weights, dtype=float)
    if np.any(norms > flatness_bound):
        k = int(np.argmax(norms))
        raise ViolatedFlatness(f"quadrature estimate of int f_{k}^2 = {norms[k]:.6g} exceeds M = {flatness_bound}")
    return f


def solve_limit_sce(f_values, z, weights=None, opts: SolverOptions | None = None, u0=None,
                    flatness_bound=DEFAULT_FLATNESS_BOUND) -> LimitSolution:
    """Discretised integral system for ``(u_1..u_r, m0)``.

    ``f_values`` is ``r x n``: each ``f_k`` sampled at the quadrature nodes;
    ``weights`` default to the equal weights ``1/n`` of the midpoint rule.
    """
    z = complex(z)
    if z.imag <= 0:
        raise ValueError(f"Im z must be positive, got {z}")
    f = np.atleast_2d(np.asarray(f_values, dtype=float))
    w = np.full(f.shape[1], 1.0 / f.shape[1]) if weights is None else np.asarray(weights, dtype=float)
    f = check_limit_profile(f, w, flatness_bound)
    opts = opts or SolverOptions()
    system_at = lambda zz: _LowRankSystem(f, w, zz)  # noqa: E731
    start = 1j * (f @ w) if u0 is None else np.asarray(u0, dtype=complex)
    u, res, it = _solve_with_fallback(system_at, z, start, opts)
    return LimitSolution(z=z, u=u, m0=system_at(z).m(u), residual=res, iterations=it)


# stability probes --------------------------------------------------------------

@dataclass(frozen=True)
class StabilityProbe:
    max_ratio: float
    ratios: np.ndarray
    # False when a kernel has zero cells: the stability theorems assume s > 0
    supported: bool


def kernel_stability_probe(kernel: KernelGrid, kernel_perturbed: KernelGrid, zs,
                           opts: SolverOptions | None = None) -> StabilityProbe:
    """Largest ``||g_hat - g|| / ||S - S_hat||`` over ``zs`` (discrete L2 norms)."""
    supported = not (kernel.has_zero_cells or kernel_perturbed.has_zero_cells)
    if not supported:
        log.warning("kernel has zero cells; stability is not covered by theory, probing anyway")
    dist = kernel_distance(kernel, kernel_perturbed)
    ratios = []
    for z in zs:
        if dist == 0.0:
            ratios.append(0.0)
            continue
        g = solve_qve(kernel, z, opts).g
        gh = solve_qve(kernel_perturbed, z, opts, g0=g).g
        ratios.append(float(np.sqrt(np.mean(np.abs(gh - g) ** 2))) / dist)
    ratios = np.array(ratios)
    return StabilityProbe(float(ratios.max()) if len(ratios) else 0.0, ratios, supported)


def bulk_stability_probe(kernel: KernelGrid, z, eps_list=(1e-4, 1e-5, 1e-6), seed: int = 0,
                         opts: SolverOptions | None = None) -> np.ndarray:
    """``||g' - g||_2 / eps`` where ``g'`` solves the equation with a rhs of L2 size ``eps``."""
    base = solve_qve(kernel, z, opts)
    rng = np.random.default_rng(seed)
    d = rng.standard_normal(kernel.n) + 1j * rng.standard_normal(kernel.n)
    d /= np.sqrt(np.mean(np.abs(d) ** 2))
    out = []
    for eps in eps_list:
        pert = solve_qve(kernel, z, opts, g0=base.g, rhs=eps * d)
        out.append(float(np.sqrt(np.mean(np.abs(pert.g - base.g) ** 2))) / eps)
    return np.array(out)
