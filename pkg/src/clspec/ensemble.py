"""Low-rank variance profiles and the matrix ensembles built on them.

A profile is a set of ``r`` factor vectors ``gamma[k]`` of length ``N``; the
variance of entry ``(i, j)`` is ``s_ij = (1/N) sum_k gamma[k, i] gamma[k, j]``
and the sparsity level is ``q = N**kappa``. Indices are 0-based throughout.

Randomness is counter based: row ``i`` of a matrix drawn with ``seed`` reads
its uniforms from a Philox stream whose key is ``(seed, tag)`` and whose
counter starts at ``i``. Entry ``(i, j)`` (``j >= i``) is draw ``j`` of that
stream, so it does not depend on which other rows are generated or in which
order.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    MuOutOfRange,
    ProfileError,
    ViolatedFlatness,
    ViolatedGammaBound,
    ViolatedSparsity,
)

log = logging.getLogger(__name__)

DEFAULT_FLATNESS_BOUND = 100.0
DENSE_CAP = 8192
# relative slack on q*s_ij <= 1; power-law profiles hit the bound exactly
SPARSITY_SLACK = 1e-12
NEAR_SPARSITY_WARNING = 0.95

_TAG_UNIFORM = 0
_TAG_NORMAL = 1


class Model(str, enum.Enum):
    RANDOM_SIGN = "random_sign"
    CENTERED = "centered"
    GOE = "goe"


class VarianceProfile:
    """Lazy view of ``s_ij``; only materialised on request and below a cap."""

    def __init__(self, gammas: np.ndarray):
        self._gammas = gammas
        self.N = gammas.shape[1]
        self.theta = gammas.sum(axis=0)
        self.theta.setflags(write=False)

    def __call__(self, i, j):
        g = self._gammas
        return np.einsum("k...,k...->...", g[:, i], g[:, j]) / self.N

    def row(self, i: int) -> np.ndarray:
        return self._gammas[:, i] @ self._gammas / self.N

    def matrix(self, cap: int = DENSE_CAP) -> np.ndarray:
        if self.N > cap:
            raise ValueError(f"refusing to materialise a {self.N}x{self.N} profile (cap {cap})")
        return self._gammas.T @ self._gammas / self.N


@dataclass(frozen=True)
class EnsembleSpec:
    N: int
    kappa: float
    gammas: np.ndarray = field(repr=False)
    flatness_bound: float = DEFAULT_FLATNESS_BOUND

    @property
    def q(self) -> float:
        return float(self.N) ** self.kappa

    @property
    def rank(self) -> int:
        return self.gammas.shape[0]

    @property
    def theta(self) -> np.ndarray:
        return self.profile.theta

    @property
    def profile(self) -> VarianceProfile:
        # cached on first access; the dataclass is frozen so go through __dict__
        prof = self.__dict__.get("_profile")
        if prof is None:
            prof = VarianceProfile(self.gammas)
            self.__dict__["_profile"] = prof
        return prof

    def s(self, i, j):
        return self.profile(i, j)

    def max_qs(self) -> tuple[float, int]:
        """Largest ``q*s_ij`` and the row where it occurs.

        By Cauchy-Schwarz the maximum over pairs sits on the diagonal.
        """
        diag = np.sum(self.gammas**2, axis=0) / self.N
        i = int(np.argmax(diag))
        return self.q * float(diag[i]), i

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "kappa": self.kappa,
            "flatness_bound": self.flatness_bound,
            "gammas": self.gammas.tolist(),
        }


def build_spec(N, kappa, gammas, flatness_bound=DEFAULT_FLATNESS_BOUND) -> EnsembleSpec:
    """Validate a profile and wrap it as an :class:`EnsembleSpec`.

    ``gammas`` is either one vector of length ``N`` (rank one) or an
    ``r x N`` array. Raises :class:`ViolatedGammaBound`,
    :class:`ViolatedFlatness` or :class:`ViolatedSparsity`.
    """
    N = int(N)
    if N < 1:
        raise ProfileError(f"N must be positive, got {N}")
    if not 0.0 < kappa <= 1.0:
        raise ProfileError(f"kappa must lie in (0, 1], got {kappa}")
    g = np.array(gammas, dtype=float, copy=True)
    if g.ndim == 1:
        g = g[None, :]
    if g.ndim != 2 or g.shape[0] == 0 or g.shape[1] != N:
        raise ProfileError(f"gammas must have shape (r, {N}), got {g.shape}")
    if not np.all(np.isfinite(g)):
        raise ProfileError("gammas contain non-finite values")
    if np.any(g < 1.0):
        k, i = np.argwhere(g < 1.0)[0]
        raise ViolatedGammaBound(f"gamma[{k}][{i}] = {g[k, i]} < 1")
    flat = float(np.sum(g**2)) / N
    if flat > flatness_bound:
        raise ViolatedFlatness(f"(1/N) sum gamma^2 = {flat:.6g} exceeds M = {flatness_bound}")
    g.setflags(write=False)
    spec = EnsembleSpec(N=N, kappa=float(kappa), gammas=g, flatness_bound=float(flatness_bound))
    qs, i = spec.max_qs()
    if qs > 1.0 + SPARSITY_SLACK:
        raise ViolatedSparsity(f"q*s[{i}][{i}] = {qs:.6g} > 1", index=(i, i), value=qs)
    if qs > NEAR_SPARSITY_WARNING:
        log.warning("max q*s_ij = %.4f is close to the sparsity bound 1", qs)
    return spec


# profile generators ---------------------------------------------------------

def power_law_profile(N: int, mu: float) -> np.ndarray:
    """``gamma_i = (i/N)**(-mu)`` for ``i = 1..N``, with ``0 < mu < 1/2``."""
    if not 0.0 < mu < 0.5:
        raise MuOutOfRange(f"mu must lie in the open interval (0, 1/2), got {mu}")
    i = np.arange(1, N + 1, dtype=float)
    return (i / N) ** (-mu)


def power_law_exponent(mu: float) -> float:
    """Degree-distribution exponent implied by a power-law profile."""
    return 1.0 + 1.0 / mu


def constant_profile(N: int, value: float = 1.0) -> np.ndarray:
    return np.full(N, float(value))


def two_block_profile(N: int, values, proportions) -> np.ndarray:
    values = [float(v) for v in values]
    proportions = [float(p) for p in proportions]
    if len(values) != 2 or len(proportions) != 2:
        raise ProfileError("two_block needs exactly two values and two proportions")
    if min(proportions) < 0 or abs(sum(proportions) - 1.0) > 1e-9:
        raise ProfileError(f"proportions must be nonnegative and sum to 1, got {proportions}")
    n0 = int(round(proportions[0] * N))
    out = np.empty(N)
    out[:n0] = values[0]
    out[n0:] = values[1]
    return out


def profile_from_config(N: int, cfg) -> np.ndarray:
    """Build an ``r x N`` gamma array from a profile description.

    ``cfg`` is a dict with ``kind`` in {constant, power_law, two_block,
    explicit} or a list of such dicts (one per rank component).
    """
    if isinstance(cfg, list):
        rows = [profile_from_config(N, c) for c in cfg]
        return np.vstack(rows)
    kind = cfg["kind"]
    if kind == "constant":
        return constant_profile(N, cfg.get("value", 1.0))[None, :]
    if kind == "power_law":
        return power_law_profile(N, cfg["mu"])[None, :]
    if kind == "two_block":
        return two_block_profile(N, cfg["values"], cfg["proportions"])[None, :]
    if kind == "explicit":
        g = np.asarray(cfg["gammas"], dtype=float)
        return g if g.ndim == 2 else g[None, :]
    raise ProfileError(f"unknown profile kind {kind!r}")


# sampling ------------------------------------------------------------------

@dataclass(frozen=True)
class SampledMatrix:
    entries: np.ndarray = field(repr=False)
    model: Model
    seed: int

    @property
    def N(self) -> int:
        return self.entries.shape[0]


def _check_seed(seed) -> int:
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def _row_stream(seed: int, tag: int, row: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, tag], counter=[0, 0, 0, row]))


def entry_uniform(seed: int, i: int, j: int) -> float:
    """The uniform variate that drives entry ``(i, j)``; order independent."""
    i, j = min(i, j), max(i, j)
    bg = np.random.Philox(key=[_check_seed(seed), _TAG_UNIFORM], counter=[0, 0, 0, i])
    bg.advance(j)
    return float(np.random.Generator(bg).random())


def _row_probabilities(spec: EnsembleSpec, i: int) -> np.ndarray:
    p = spec.q * spec.profile.row(i)[i:]
    return np.minimum(p, 1.0)


def _fill_symmetric(N, row_fn) -> np.ndarray:
    H = np.empty((N, N))
    for i in range(N):
        vals = row_fn(i)
        H[i, i:] = vals
        H[i:, i] = vals
    H.setflags(write=False)
    return H


def sample_random_sign(spec: EnsembleSpec, seed: int) -> SampledMatrix:
    """Entries are ``+-1/sqrt(q)`` with probability ``q*s_ij/2`` each, else 0."""
    seed = _check_seed(seed)
    amp = 1.0 / np.sqrt(spec.q)

    def row(i):
        u = _row_stream(seed, _TAG_UNIFORM, i).random(spec.N)[i:]
        p = _row_probabilities(spec, i)
        return np.where(u < 0.5 * p, amp, np.where(u < p, -amp, 0.0))

    return SampledMatrix(_fill_symmetric(spec.N, row), Model.RANDOM_SIGN, seed)


def sample_centered(spec: EnsembleSpec, seed: int) -> SampledMatrix:
    """Centred 0/1 adjacency scaled by ``1/sqrt(q)``, edge probability ``p = q*s_ij``.

    Entries are ``(1-p)/sqrt(q)`` with probability ``p`` and ``-p/sqrt(q)``
    otherwise. Uses the same uniforms as :func:`sample_adjacency`.
    """
    seed = _check_seed(seed)
    amp = 1.0 / np.sqrt(spec.q)

    def row(i):
        u = _row_stream(seed, _TAG_UNIFORM, i).random(spec.N)[i:]
        p = _row_probabilities(spec, i)
        return amp * (np.where(u < p, 1.0, 0.0) - p)

    return SampledMatrix(_fill_symmetric(spec.N, row), Model.CENTERED, seed)


def sample_adjacency(spec: EnsembleSpec, seed: int, loops: bool = False) -> np.ndarray:
    """Uncentred 0/1 adjacency matrix (uint8) behind :func:`sample_centered`."""
    seed = _check_seed(seed)
    N = spec.N
    A = np.zeros((N, N), dtype=np.uint8)
    for i in range(N):
        u = _row_stream(seed, _TAG_UNIFORM, i).random(N)[i:]
        a = (u < _row_probabilities(spec, i)).astype(np.uint8)
        A[i, i:] = a
        A[i:, i] = a
    if not loops:
        np.fill_diagonal(A, 0)
    return A


def sample_goe(N: int, seed: int) -> SampledMatrix:
    """GOE normalised so the spectrum fills ``[-2, 2]``.

    Off-diagonal variance ``1/N``, diagonal variance ``2/N``.
    """
    if N < 2:
        raise ValueError("GOE needs N >= 2")
    seed = _check_seed(seed)
    off = 1.0 / np.sqrt(N)

    def row(i):
        x = _row_stream(seed, _TAG_NORMAL, i).standard_normal(N)[i:] * off
        x[0] *= np.sqrt(2.0)
        return x

    return SampledMatrix(_fill_symmetric(N, row), Model.GOE, seed)


def sample(spec: EnsembleSpec | None, model, seed: int, N: int | None = None) -> SampledMatrix:
    """Dispatch on ``model``; GOE ignores the profile and only needs ``N``."""
    model = Model(model)
    if model is Model.RANDOM_SIGN:
        return sample_random_sign(spec, seed)
    if model is Model.CENTERED:
        return sample_centered(spec, seed)
    return sample_goe(N if N is not None else spec.N, seed)


def entry_moments(spec: EnsembleSpec, i: int, j: int, model) -> dict:
    """Exact mean and absolute moments 2 and 4 of entry ``(i, j)``."""
    model = Model(model)
    q = spec.q
    p = min(spec.q * float(spec.s(i, j)), 1.0)
    if model is Model.RANDOM_SIGN:
        return {"mean": 0.0, "m2": p / q, "m4": p / q**2}
    if model is Model.CENTERED:
        return {
            "mean": 0.0,
            "m2": p * (1 - p) / q,
            "m4": p * (1 - p) * ((1 - p) ** 3 + p**3) / q**2,
        }
    N = spec.N
    var = (2.0 if i == j else 1.0) / N
    return {"mean": 0.0, "m2": var, "m4": 3 * var**2}
