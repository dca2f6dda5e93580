"""Damped iteration shared by the SCE and QVE solvers.

Both solvers look for a fixed point ``x = F(x)`` of a map that sends the
upper half-plane (componentwise) into itself. Every accepted iterate stays in
that region. A step is tried at damping ``alpha = 1`` and halved until the
residual ``max|x - F(x)|`` decreases and the iterate is admissible; ``alpha``
never drops below ``floor``.

``method="newton"`` uses Newton directions with a Picard fallback;
``method="picard"`` is the plain damped map ``x <- (1-a)x + aF(x)`` with
persistent ``a``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import LeftUpperHalfPlane, NoConvergence

METHODS = ("newton", "picard")


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-12
    max_iter: int = 10_000
    damping_floor: float = 1.0 / 64
    method: str = "newton"
    # retry through an eta-continuation path when a direct solve fails
    continuation: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0 < self.damping_floor <= 1:
            raise ValueError("damping_floor must lie in (0, 1]")
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("tol must be positive and max_iter at least 1")


def csum(x: np.ndarray) -> complex:
    """Correctly rounded sum of a complex vector."""
    return complex(math.fsum(x.real), math.fsum(x.imag))


def in_upper_half_plane(x: np.ndarray) -> bool:
    return bool(np.all(x.imag > 0) and np.all(np.isfinite(x)))


def _alphas(floor):
    a = 1.0
    while a >= floor:
        yield a
        a *= 0.5


def damped_solve(x0, F, opts: SolverOptions, newton_direction=None):
    """Iterate to a fixed point of ``F``.

    ``newton_direction(x, Fx)`` returns the Newton step for the residual
    ``x - F(x)``, or ``None`` when it cannot be formed.

    Returns ``(x, residual, iterations)``.
    """
    x = np.array(x0, dtype=complex)
    if not in_upper_half_plane(x):
        raise LeftUpperHalfPlane("initial iterate is not in the upper half-plane")
    Fx = F(x)
    res = float(np.max(np.abs(x - Fx)))
    best = (x, res)
    alpha = 1.0
    it = 0
    while it < opts.max_iter:
        if res <= opts.tol:
            return x, res, it
        it += 1
        step = None
        if opts.method == "newton" and newton_direction is not None:
            d = newton_direction(x, Fx)
            if d is not None and np.all(np.isfinite(d)):
                step = _line_search(x, d, F, res, opts.damping_floor)
        if step is None:
            if opts.method == "picard":
                step, alpha = _picard_persistent(x, Fx, F, res, alpha, opts.damping_floor)
            else:
                step = _picard_fallback(x, Fx, F, res, opts.damping_floor)
        x, Fx, res = step
        if res < best[1]:
            best = (x, res)
    if res <= opts.tol:
        return x, res, it
    raise NoConvergence(
        f"no convergence after {it} iterations (residual {best[1]:.3e})",
        best=best[0], residual=best[1], iterations=it,
    )


def _line_search(x, d, F, res, floor):
    for a in _alphas(floor):
        xn = x + a * d
        if not in_upper_half_plane(xn):
            continue
        Fn = F(xn)
        rn = float(np.max(np.abs(xn - Fn)))
        if rn < res:
            return xn, Fn, rn
    return None


def _picard_fallback(x, Fx, F, res, floor):
    last = None
    for a in _alphas(floor):
        xn = (1 - a) * x + a * Fx
        if not in_upper_half_plane(xn):
            continue
        Fn = F(xn)
        rn = float(np.max(np.abs(xn - Fn)))
        last = (xn, Fn, rn)
        if rn < res:
            return last
    if last is None:
        raise LeftUpperHalfPlane("iterate left the upper half-plane at the damping floor")
    # non-monotone step at the floor
    return last


def _picard_persistent(x, Fx, F, res, alpha, floor):
    while True:
        xn = (1 - alpha) * x + alpha * Fx
        ok = in_upper_half_plane(xn)
        if ok:
            Fn = F(xn)
            rn = float(np.max(np.abs(xn - Fn)))
            if rn < res or alpha <= floor:
                return (xn, Fn, rn), alpha
        elif alpha <= floor:
            raise LeftUpperHalfPlane("iterate left the upper half-plane at the damping floor")
        alpha = max(alpha * 0.5, floor)


def eta_path(z: complex, eta_start: float = 2.0, factor: float = 0.5):
    """Points ``E + i*eta`` from ``eta_start`` down to ``Im z`` (inclusive)."""
    eta = z.imag
    path = []
    e = max(eta_start, eta)
    while e > eta * 1.0000001:
        path.append(complex(z.real, e))
        e *= factor
    path.append(z)
    return path
