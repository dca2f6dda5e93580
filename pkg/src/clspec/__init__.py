"""Spectral numerics for generalized Chung-Lu random matrices.

Submodules: ``ensemble`` (profiles and samplers), ``sce`` (rank-r
self-consistent equations), ``qve`` (kernel equations on a dyadic grid),
``spectral`` (resolvent statistics), ``harness`` (Monte Carlo experiments),
``config`` and ``cli``.
"""

__version__ = "0.1.0"

from ._iteration import SolverOptions
from .ensemble import EnsembleSpec, Model, build_spec, power_law_profile, sample
from .qve import solve_qve
from .sce import solve_sce, stability_certificate
from .spectral import eigen_decompose, local_law_record

__all__ = [
    "EnsembleSpec",
    "Model",
    "SolverOptions",
    "build_spec",
    "eigen_decompose",
    "local_law_record",
    "power_law_profile",
    "sample",
    "solve_qve",
    "solve_sce",
    "stability_certificate",
]
