"""Eigendecomposition and resolvent statistics of sampled matrices.

Resolvent entries come from the eigenexpansion
``G_ij(z) = sum_a U[i, a] U[j, a] / (lambda_a - z)`` so that one
decomposition serves every ``z``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ensemble import DENSE_CAP, EnsembleSpec, SampledMatrix
from .errors import DecompositionFailure, EmptyBulk, VectorsNotRetained
from .sce import SceSolution

DEFAULT_PAIR_BUDGET = 100_000
DEFAULT_DELTA = 0.1


@dataclass(frozen=True)
class Spectrum:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray | None = field(default=None, repr=False)
    source_seed: int | None = None

    @property
    def N(self) -> int:
        return len(self.eigenvalues)

    def _vectors(self) -> np.ndarray:
        if self.eigenvectors is None:
            raise VectorsNotRetained("this spectrum was decomposed without eigenvectors")
        return self.eigenvectors


def eigen_decompose(matrix, keep_vectors: bool = True, cap: int = DENSE_CAP, check: bool = True) -> Spectrum:
    """Full symmetric eigendecomposition with trace and Frobenius self-checks."""
    seed = None
    if isinstance(matrix, SampledMatrix):
        seed = matrix.seed
        matrix = matrix.entries
    H = np.asarray(matrix, dtype=float)
    N = H.shape[0]
    if H.shape != (N, N):
        raise ValueError(f"matrix must be square, got {H.shape}")
    if N > cap:
        raise ValueError(f"N={N} exceeds the dense cap {cap}")
    try:
        if keep_vectors:
            lam, U = np.linalg.eigh(H)
        else:
            lam, U = np.linalg.eigvalsh(H), None
    except np.linalg.LinAlgError as exc:
        raise DecompositionFailure(str(exc)) from exc
    if check:
        _check_identities(H, lam, U)
    lam.setflags(write=False)
    if U is not None:
        U.setflags(write=False)
    return Spectrum(lam, U, seed)


def _check_identities(H, lam, U):
    N = len(lam)
    scale = max(1.0, float(np.max(np.abs(lam))) if N else 1.0)
    tr_err = abs(math.fsum(lam) - math.fsum(np.diag(H)))
    if tr_err > 1e-8 * N * scale:
        raise DecompositionFailure(f"trace identity violated by {tr_err:.3e}")
    fro = math.fsum((H * H).ravel())
    fro_err = abs(math.fsum(lam * lam) - fro)
    if fro_err > 1e-8 * max(fro, 1e-300):
        raise DecompositionFailure(f"Frobenius identity violated by {fro_err:.3e}")
    if U is not None and N:
        # cheap probe of orthonormality on a few columns
        cols = U[:, :: max(1, N // 8)]
        if np.max(np.abs(cols.T @ cols - np.eye(cols.shape[1]))) > 1e-8:
            raise DecompositionFailure("eigenvectors are not orthonormal")


def empirical_stieltjes(spectrum: Spectrum, z) -> complex:
    return complex(np.mean(1.0 / (spectrum.eigenvalues - complex(z))))


def _weights(spectrum, z):
    return 1.0 / (spectrum.eigenvalues - complex(z))


def resolvent_diagonal(spectrum: Spectrum, z) -> np.ndarray:
    U = spectrum._vectors()
    w = _weights(spectrum, z)
    U2 = U * U
    return U2 @ w.real + 1j * (U2 @ w.imag)


def resolvent_rows(spectrum: Spectrum, z, rows) -> np.ndarray:
    """Full rows ``G[rows, :]`` as a ``len(rows) x N`` array."""
    U = spectrum._vectors()
    w = _weights(spectrum, z)
    A = U[np.asarray(rows)]
    return (A * w.real) @ U.T + 1j * ((A * w.imag) @ U.T)


def resolvent_entries(spectrum: Spectrum, z, pairs) -> np.ndarray:
    U = spectrum._vectors()
    w = _weights(spectrum, z)
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    return np.einsum("pa,pa,a->p", U[pairs[:, 0]], U[pairs[:, 1]], w)


def ward_defect(spectrum: Spectrum, z, rows) -> np.ndarray:
    """Relative error of ``sum_j |G_ij|^2 = Im G_ii / eta`` for each row."""
    z = complex(z)
    Grows = resolvent_rows(spectrum, z, rows)
    lhs = np.sum(np.abs(Grows) ** 2, axis=1)
    rhs = Grows[np.arange(len(rows)), np.asarray(rows)].imag / z.imag
    return np.abs(lhs - rhs) / np.abs(rhs)


# local law -------------------------------------------------------------------

@dataclass(frozen=True)
class LocalLawRecord:
    z: complex
    lambda_d: float
    lambda_o: float
    lambda_: float
    phi: float
    max_schur_residual: float
    sample_seed: int | None
    m_N: complex
    m: complex
    pair_budget: int

    @property
    def ratio(self) -> float:
        return self.lambda_ / self.phi


def control_parameter(q: float, N: int, eta: float) -> float:
    return 1.0 / math.sqrt(q) + 1.0 / math.sqrt(N * eta)


def offdiagonal_rows(N: int, pair_budget: int, seed) -> np.ndarray | None:
    """Rows whose off-diagonal entries make up the sampled pairs.

    ``None`` means exhaustive (all pairs fit in the budget). Otherwise
    ``ceil(budget / (N - 1))`` distinct rows drawn uniformly with ``seed``.
    """
    if N * (N - 1) // 2 <= pair_budget:
        return None
    k = min(N, max(1, -(-int(pair_budget) // (N - 1))))
    rng = np.random.default_rng([0 if seed is None else int(seed), 0x0FF])
    return np.sort(rng.choice(N, size=k, replace=False))


def local_law_record(spectrum: Spectrum, solution: SceSolution, z=None, pair_budget: int = DEFAULT_PAIR_BUDGET,
                     diag=None) -> LocalLawRecord:
    """Lambda_D, Lambda_O, Phi and the Schur residual at one ``z``.

    ``diag`` substitutes the diagonal resolvent entries (only useful for
    testing the identity case).
    """
    spec: EnsembleSpec = solution.spec
    z = solution.z if z is None else complex(z)
    if abs(z - solution.z) > 1e-14 * max(1.0, abs(z)):
        raise ValueError(f"solution was computed at {solution.z}, not {z}")
    N = spectrum.N
    theta = spec.theta
    Gd = resolvent_diagonal(spectrum, z) if diag is None else np.asarray(diag, dtype=complex)
    g = solution.g
    lambda_d = float(np.max(theta * np.abs(Gd - g)))

    rows = offdiagonal_rows(N, pair_budget, spectrum.source_seed)
    if rows is None:
        rows = np.arange(N)
    Grows = resolvent_rows(spectrum, z, rows)
    Grows[np.arange(len(rows)), rows] = 0.0
    sq = np.sqrt(theta)
    lambda_o = float(np.max(np.abs(Grows) * sq[rows, None] * sq[None, :])) if N > 1 else 0.0

    # Schur residual R_i = 1/G_ii + z + sum_k s_ik G_kk via the low-rank form of s
    G = spec.gammas
    sG = (G.T @ (G @ Gd.real) + 1j * (G.T @ (G @ Gd.imag))) / N
    R = 1.0 / Gd + z + sG
    schur = float(np.max(np.abs(R) / theta))

    m_N = complex(np.mean(1.0 / (spectrum.eigenvalues - z)))
    return LocalLawRecord(
        z=z,
        lambda_d=lambda_d,
        lambda_o=lambda_o,
        lambda_=max(lambda_d, lambda_o),
        phi=control_parameter(spec.q, N, z.imag),
        max_schur_residual=schur,
        sample_seed=spectrum.source_seed,
        m_N=m_N,
        m=solution.m,
        pair_budget=int(pair_budget),
    )


# eigenvector and counting diagnostics ---------------------------------------

def delocalization_profile(spectrum: Spectrum, bulk_interval) -> float:
    """``N * max |u_k(i)|^2`` over eigenvectors with eigenvalue in the interval."""
    U = spectrum._vectors()
    lo, hi = bulk_interval
    sel = (spectrum.eigenvalues >= lo) & (spectrum.eigenvalues <= hi)
    if not np.any(sel):
        raise EmptyBulk(f"no eigenvalue in [{lo}, {hi}]")
    return float(spectrum.N * np.max(U[:, sel] ** 2))


def dyadic_count_profile(eigenvalues, E: float, delta: float = DEFAULT_DELTA, N: int | None = None) -> np.ndarray:
    """Counts of eigenvalues in dyadic annuli around ``E``.

    ``counts[0]`` covers ``|lambda - E| <= N**(delta-1)``; ``counts[n]``
    for ``n = 1..floor(log2 N)`` covers ``2**(n-1) a < |lambda - E| <= 2**n a``.
    ``N`` defaults to the number of eigenvalues.
    """
    lam = np.asarray(getattr(eigenvalues, "eigenvalues", eigenvalues), dtype=float)
    N = len(lam) if N is None else N
    nmax = int(math.floor(math.log2(N))) if N >= 1 else 0
    a = float(N) ** (delta - 1.0)
    edges = a * 2.0 ** np.arange(nmax + 1)
    d = np.abs(lam - E)
    cum = np.searchsorted(np.sort(d), edges, side="right")
    return np.diff(np.concatenate([[0], cum]))


def dyadic_ratio(counts, N: int, delta: float = DEFAULT_DELTA) -> float:
    """``max_n counts[n] / (2**n N**delta)``."""
    counts = np.asarray(counts, dtype=float)
    return float(np.max(counts / (2.0 ** np.arange(len(counts)) * float(N) ** delta)))
