"""Monte Carlo experiments: local-law sweeps, gap-ratio universality, degree tails.

Every sample ``s`` of an experiment uses ``seed_for(base_seed, s)``, so the
records depend only on the plan, never on the number of workers or the order
in which samples finish. Aggregation folds records sorted by ``(E, eta, s)``.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import ensemble as ens
from ._iteration import SolverOptions
from .ensemble import EnsembleSpec, Model
from .errors import (
    BulkValidationFailed,
    DecompositionFailure,
    DegenerateDegrees,
    SampleFailure,
    TooFewEigenvalues,
)
from .sce import DEFAULT_BULK_THRESHOLD, bulk_scan, solve_grid
from .spectral import (
    DEFAULT_DELTA,
    DEFAULT_PAIR_BUDGET,
    delocalization_profile,
    dyadic_count_profile,
    dyadic_ratio,
    eigen_decompose,
    local_law_record,
)

log = logging.getLogger(__name__)

QUANTILES = (0.5, 0.95, 1.0)
MAX_FAILURE_FRACTION = 0.01


def seed_for(base_seed: int, sample: int) -> int:
    """64-bit per-sample seed hashed from ``(base_seed, sample)``."""
    ss = np.random.SeedSequence([int(base_seed), int(sample)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _map(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _quantiles(x):
    x = np.asarray(x, dtype=float)
    return {f"q{int(round(100 * p))}": float(np.quantile(x, p)) for p in QUANTILES}


@dataclass
class ExperimentReport:
    kind: str
    passed: bool
    checks: dict
    summary: dict
    records: list = field(default_factory=list, repr=False)
    failures: list = field(default_factory=list)
    runtime: dict = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        return self.summary.get("valid", True)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "passed": self.passed,
            "status": "PASS" if self.passed else "FAIL",
            "checks": self.checks,
            "summary": self.summary,
            "failures": self.failures,
            "n_records": len(self.records),
            "runtime": self.runtime,
        }


# local law -------------------------------------------------------------------

@dataclass
class ExperimentPlan:
    spec: EnsembleSpec
    model: Model
    E_interval: tuple[float, float]
    eta_list: list
    samples: int
    base_seed: int = 0
    n_E: int = 5
    pair_budget: int = DEFAULT_PAIR_BUDGET
    delta: float = DEFAULT_DELTA
    bulk_threshold: float = DEFAULT_BULK_THRESHOLD
    quantile: float = 0.95
    max_ratio: float = 10.0
    threads: int = 1
    diagnostics: bool = False
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        self.model = Model(self.model)

    @property
    def E_values(self) -> np.ndarray:
        a, b = self.E_interval
        return np.linspace(a, b, self.n_E) if self.n_E > 1 else np.array([0.5 * (a + b)])

    @property
    def z_grid(self) -> list[complex]:
        return [complex(E, eta) for E in self.E_values for eta in sorted(self.eta_list, reverse=True)]


def validate_plan(plan: ExperimentPlan):
    """Check the eta floor and that the E-interval sits inside a detected bulk interval.

    Returns the SCE solutions on the plan's grid, keyed by ``z``.
    """
    N = plan.spec.N
    floor = float(N) ** (plan.delta - 1.0)
    low = [eta for eta in plan.eta_list if eta < floor * (1 - 1e-12)]
    if low:
        raise BulkValidationFailed(f"eta values {low} lie below N^(delta-1) = {floor:.4g}")
    a, b = plan.E_interval
    probe_E = np.linspace(a, b, max(plan.n_E, 11))
    intervals, _ = bulk_scan(plan.spec, probe_E, min(plan.eta_list), plan.bulk_threshold, opts=plan.solver)
    if not any(lo <= a + 1e-12 and b - 1e-12 <= hi for lo, hi in intervals):
        raise BulkValidationFailed(
            f"[{a}, {b}] is not inside a bulk interval at c={plan.bulk_threshold}; detected {intervals}"
        )
    sols = {}
    etas = sorted(plan.eta_list, reverse=True)
    for E in plan.E_values:
        for s in solve_grid(plan.spec, [complex(E, eta) for eta in etas], plan.solver):
            sols[s.z] = s
    return sols


def _local_law_sample(plan, sols, s):
    seed = seed_for(plan.base_seed, s)
    H = ens.sample(plan.spec, plan.model, seed)
    try:
        spectrum = eigen_decompose(H, keep_vectors=True)
    except DecompositionFailure as exc:
        return s, None, None, str(exc)
    recs = []
    for z, sol in sols.items():
        try:
            recs.append(local_law_record(spectrum, sol, z, plan.pair_budget))
        except Exception as exc:  # attach context, keep the original type visible
            raise SampleFailure(seed, exc, z=z) from exc
    diag = None
    if plan.diagnostics:
        N = plan.spec.N
        diag = {
            "sample": s,
            "seed": seed,
            "delocalization": delocalization_profile(spectrum, plan.E_interval),
            "dyadic_ratio": max(
                dyadic_ratio(dyadic_count_profile(spectrum, E, plan.delta), N, plan.delta) for E in plan.E_values
            ),
        }
    return s, recs, diag, None


def record_row(sample: int, rec) -> dict:
    return {
        "E": rec.z.real,
        "eta": rec.z.imag,
        "sample": sample,
        "seed": rec.sample_seed,
        "lambda_d": rec.lambda_d,
        "lambda_o": rec.lambda_o,
        "lambda": rec.lambda_,
        "phi": rec.phi,
        "ratio": rec.ratio,
        "max_schur_residual": rec.max_schur_residual,
        "schur_ratio": rec.max_schur_residual / rec.phi,
        "re_m_N": rec.m_N.real,
        "im_m_N": rec.m_N.imag,
        "re_m": rec.m.real,
        "im_m": rec.m.imag,
        "m_dev_ratio": abs(rec.m_N - rec.m) / rec.phi,
        "pair_budget": rec.pair_budget,
    }


def run_local_law(plan: ExperimentPlan, solutions=None) -> ExperimentReport:
    """Sample, decompose and compare resolvents with the SCE solution on the plan grid."""
    t0 = time.perf_counter()
    sols = validate_plan(plan) if solutions is None else solutions
    t1 = time.perf_counter()
    results = _map(lambda s: _local_law_sample(plan, sols, s), range(plan.samples), plan.threads)
    t2 = time.perf_counter()

    rows, failures, diags = [], [], []
    for s, recs, diag, err in results:
        if err is not None:
            failures.append({"sample": s, "seed": seed_for(plan.base_seed, s), "error": err})
            continue
        rows.extend(record_row(s, r) for r in recs)
        if diag is not None:
            diags.append(diag)
    rows.sort(key=lambda r: (r["E"], r["eta"], r["sample"]))
    report = aggregate_local_law(rows, plan, failures)
    if diags:
        report.summary["diagnostics"] = {
            "delocalization": _quantiles([d["delocalization"] for d in diags]),
            "dyadic_ratio": _quantiles([d["dyadic_ratio"] for d in diags]),
            "per_sample": diags,
        }
    report.runtime = {"solve_s": t1 - t0, "samples_s": t2 - t1, "total_s": time.perf_counter() - t0}
    return report


def aggregate_local_law(rows, plan: ExperimentPlan, failures=()) -> ExperimentReport:
    qlevel = plan.quantile
    by_z: dict[tuple, list] = {}
    for r in rows:
        by_z.setdefault((r["E"], r["eta"]), []).append(r)
    per_z = []
    for (E, eta), rs in sorted(by_z.items()):
        ratio = [r["ratio"] for r in rs]
        entry = {
            "E": E,
            "eta": eta,
            "n": len(rs),
            "phi": rs[0]["phi"],
            "ratio": _quantiles(ratio),
            "ratio_at_level": float(np.quantile(ratio, qlevel)),
            "lambda_median": float(np.median([r["lambda"] for r in rs])),
            "schur_ratio_at_level": float(np.quantile([r["schur_ratio"] for r in rs], qlevel)),
            "m_dev_ratio_at_level": float(np.quantile([r["m_dev_ratio"] for r in rs], qlevel)),
        }
        per_z.append(entry)

    def monotone(key):
        ok = True
        for E in {e["E"] for e in per_z}:
            seq = [e for e in per_z if e["E"] == E]
            seq.sort(key=lambda e: e["eta"])
            vals = [e[key] if key != "ratio_median" else e["ratio"]["q50"] for e in seq]
            ok &= all(vals[k + 1] <= vals[k] for k in range(len(vals) - 1))
        return bool(ok)

    n_total = plan.samples
    valid = len(failures) <= MAX_FAILURE_FRACTION * n_total
    checks = {
        "ratio_quantile_bounded": bool(per_z) and all(e["ratio_at_level"] <= plan.max_ratio for e in per_z),
        "schur_quantile_bounded": bool(per_z) and all(e["schur_ratio_at_level"] <= plan.max_ratio for e in per_z),
        "m_convergence": bool(per_z) and all(e["m_dev_ratio_at_level"] <= plan.max_ratio for e in per_z),
        "median_ratio_nonincreasing_in_eta": monotone("ratio_median"),
        "median_lambda_nonincreasing_in_eta": monotone("lambda_median"),
        "valid": valid,
    }
    summary = {
        "N": plan.spec.N,
        "kappa": plan.spec.kappa,
        "model": plan.model.value,
        "samples": plan.samples,
        "quantile": qlevel,
        "max_ratio": plan.max_ratio,
        "per_z": per_z,
        "worst_ratio_at_level": max((e["ratio_at_level"] for e in per_z), default=float("nan")),
        "worst_schur_ratio_at_level": max((e["schur_ratio_at_level"] for e in per_z), default=float("nan")),
        "valid": valid,
    }
    return ExperimentReport("local-law", all(checks.values()), checks, summary, list(rows), list(failures))


# gap ratios --------------------------------------------------------------------

def gap_ratio_statistics(eigenvalues, bulk_interval=None) -> np.ndarray:
    """``min(d_i, d_{i+1}) / max(d_i, d_{i+1})`` for consecutive gaps inside the interval."""
    lam = np.sort(np.asarray(getattr(eigenvalues, "eigenvalues", eigenvalues), dtype=float))
    if bulk_interval is not None:
        lo, hi = bulk_interval
        lam = lam[(lam >= lo) & (lam <= hi)]
    if len(lam) < 3:
        raise TooFewEigenvalues(f"need at least 3 eigenvalues, got {len(lam)}")
    d = np.diff(lam)
    num = np.minimum(d[:-1], d[1:])
    den = np.maximum(d[:-1], d[1:])
    with np.errstate(invalid="ignore"):
        r = np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)
    return r


def central_window(eigenvalues, fraction: float = 1.0 / 3.0) -> tuple[float, float]:
    """Interval spanned by the middle ``fraction`` of the sorted eigenvalues."""
    lam = np.sort(np.asarray(eigenvalues, dtype=float))
    N = len(lam)
    k = int(round(N * fraction))
    lo = (N - k) // 2
    return float(lam[lo]), float(lam[lo + k - 1])


@dataclass
class SpectrumPlan:
    """Eigenvalue-only sampling plan; ``spec`` may be ``None`` for GOE."""

    model: Model
    N: int
    samples: int
    base_seed: int = 0
    spec: EnsembleSpec | None = None
    bulk_fraction: float = 1.0 / 3.0
    threads: int = 1

    def __post_init__(self):
        self.model = Model(self.model)
        if self.model is not Model.GOE and self.spec is None:
            raise ValueError(f"model {self.model.value} needs an ensemble spec")


def pooled_gap_ratios(plan: SpectrumPlan) -> tuple[np.ndarray, list]:
    def one(s):
        seed = seed_for(plan.base_seed, s)
        H = ens.sample(plan.spec, plan.model, seed, N=plan.N)
        try:
            lam = eigen_decompose(H, keep_vectors=False).eigenvalues
        except DecompositionFailure as exc:
            return s, None, str(exc)
        return s, gap_ratio_statistics(lam, central_window(lam, plan.bulk_fraction)), None

    out, failures = [], []
    for s, r, err in _map(one, range(plan.samples), plan.threads):
        if err is not None:
            failures.append({"sample": s, "error": err})
        else:
            out.append(r)
    return (np.concatenate(out) if out else np.empty(0)), failures


def poisson_gap_ratios(N: int, samples: int, base_seed: int, bulk_fraction: float = 1.0 / 3.0) -> np.ndarray:
    """Gap ratios of sorted i.i.d. uniform points (uncorrelated control)."""
    out = []
    for s in range(samples):
        lam = np.sort(np.random.default_rng(seed_for(base_seed, s)).uniform(-1.0, 1.0, N))
        out.append(gap_ratio_statistics(lam, central_window(lam, bulk_fraction)))
    return np.concatenate(out)


def ks_distance(a, b) -> float:
    return float(stats.ks_2samp(a, b).statistic)


def run_universality(plan: SpectrumPlan, goe_plan: SpectrumPlan, ks_max: float = 0.02,
                     control_min: float = 0.1, null_seed_offset: int = 1) -> ExperimentReport:
    """Two-sample KS distances between pooled gap-ratio samples.

    Compares the ensemble against GOE, a second independent GOE pool against
    the first (null calibration), and an i.i.d. uniform spectrum against GOE
    (control, should be far).
    """
    t0 = time.perf_counter()
    r_ens, f_ens = pooled_gap_ratios(plan)
    r_goe, f_goe = pooled_gap_ratios(goe_plan)
    null_plan = SpectrumPlan(Model.GOE, goe_plan.N, goe_plan.samples, goe_plan.base_seed + null_seed_offset,
                             bulk_fraction=goe_plan.bulk_fraction, threads=goe_plan.threads)
    r_null, f_null = pooled_gap_ratios(null_plan)
    r_poi = poisson_gap_ratios(goe_plan.N, goe_plan.samples, goe_plan.base_seed + 2 * null_seed_offset + 7919,
                               goe_plan.bulk_fraction)
    ks_e = ks_distance(r_ens, r_goe)
    ks_n = ks_distance(r_null, r_goe)
    ks_p = ks_distance(r_poi, r_goe)
    failures = f_ens + f_goe + f_null
    valid = len(failures) <= MAX_FAILURE_FRACTION * (plan.samples + 2 * goe_plan.samples)
    checks = {
        "ensemble_vs_goe": ks_e <= ks_max,
        "null_goe_vs_goe": ks_n <= ks_max,
        "poisson_control_separated": ks_p >= control_min,
        "valid": valid,
    }
    summary = {
        "ks_ensemble_goe": ks_e,
        "ks_null": ks_n,
        "ks_poisson": ks_p,
        "n_ensemble": int(len(r_ens)),
        "n_goe": int(len(r_goe)),
        "n_null": int(len(r_null)),
        "n_poisson": int(len(r_poi)),
        "mean_r": {"ensemble": float(np.mean(r_ens)), "goe": float(np.mean(r_goe)), "poisson": float(np.mean(r_poi))},
        "ks_max": ks_max,
        "control_min": control_min,
        "valid": valid,
    }
    rows = [{"pool": name, "index": i, "r": float(v)}
            for name, arr in (("ensemble", r_ens), ("goe", r_goe), ("goe_null", r_null), ("poisson", r_poi))
            for i, v in enumerate(arr)]
    return ExperimentReport("universality", all(checks.values()), checks, summary, rows, failures,
                            {"total_s": time.perf_counter() - t0})


# degree tail ---------------------------------------------------------------------

@dataclass(frozen=True)
class DegreeFit:
    beta_hat: float
    ci: tuple[float, float]
    cutoff: float
    n_tail: int
    n_degrees: int
    # False when degrees above the cutoff span less than a factor 2: no tail to fit
    defined: bool


def hill_exponent(tail, d_min: float) -> float:
    """Discrete-corrected continuous MLE ``1 + n / sum log(d / (d_min - 1/2))``."""
    tail = np.asarray(tail, dtype=float)
    return 1.0 + len(tail) / float(np.sum(np.log(tail / (d_min - 0.5))))


def fit_degree_tail(degrees, cutoff_quantile: float = 0.8, n_boot: int = 200, ci_level: float = 0.95,
                    seed: int = 0) -> DegreeFit:
    d = np.asarray(degrees, dtype=float)
    cutoff = float(np.quantile(d, cutoff_quantile))
    tail = d[d > cutoff]
    if len(tail) < 2 or cutoff <= 0.5:
        raise DegenerateDegrees(f"only {len(tail)} degrees above the cutoff {cutoff}")
    d_min = float(tail.min())
    beta = hill_exponent(tail, d_min)
    rng = np.random.default_rng(seed)
    boots = np.empty(n_boot)
    for b in range(n_boot):
        t = rng.choice(tail, size=len(tail), replace=True)
        boots[b] = hill_exponent(t, float(t.min()))
    alpha = 0.5 * (1.0 - ci_level)
    ci = (float(np.quantile(boots, alpha)), float(np.quantile(boots, 1.0 - alpha)))
    defined = bool(tail.max() >= 2.0 * d_min)
    return DegreeFit(beta, ci, cutoff, int(len(tail)), int(len(d)), defined)


def sample_degrees(spec: EnsembleSpec, samples: int, base_seed: int = 0, threads: int = 1) -> np.ndarray:
    """Vertex degrees of ``samples`` adjacency matrices (no self-loops), concatenated."""
    def one(s):
        return ens.sample_adjacency(spec, seed_for(base_seed, s)).sum(axis=1, dtype=np.int64)

    return np.concatenate(_map(one, range(samples), threads))


def degree_tail_fit(spec: EnsembleSpec, samples: int, base_seed: int = 0, cutoff_quantile: float = 0.8,
                    n_boot: int = 200, threads: int = 1) -> DegreeFit:
    degrees = sample_degrees(spec, samples, base_seed, threads)
    return fit_degree_tail(degrees, cutoff_quantile, n_boot, seed=seed_for(base_seed, 2**31))


def run_degrees(spec: EnsembleSpec, samples: int, base_seed: int = 0, beta_range=None,
                cutoff_quantile: float = 0.8, n_boot: int = 200, threads: int = 1) -> ExperimentReport:
    t0 = time.perf_counter()
    degrees = sample_degrees(spec, samples, base_seed, threads)
    fit = fit_degree_tail(degrees, cutoff_quantile, n_boot, seed=seed_for(base_seed, 2**31))
    checks = {"tail_defined": fit.defined}
    if beta_range is not None:
        lo, hi = beta_range
        checks["beta_in_range"] = bool(lo <= fit.beta_hat <= hi)
    summary = asdict(fit)
    summary["ci"] = list(fit.ci)
    summary["beta_range"] = None if beta_range is None else list(beta_range)
    N = spec.N
    rows = [{"sample": k // N, "vertex": k % N, "degree": int(v)} for k, v in enumerate(degrees)]
    return ExperimentReport("degrees", all(checks.values()), checks, summary, rows, [],
                            {"total_s": time.perf_counter() - t0})

