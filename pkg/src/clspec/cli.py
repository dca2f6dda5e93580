"""Command-line entry point: ``clspec <subcommand> [--config PATH] [--out DIR] [--seed U64] [--threads N]``.

Each run writes ``report.json``, ``records.csv`` and ``manifest.json`` to the
output directory. Exit codes: 0 pass, 2 acceptance threshold violated, 1 error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from importlib import metadata
from pathlib import Path

import numpy as np

from . import ensemble as ens
from . import harness
from .config import RunConfig, load_document, parse_config
from .ensemble import Model
from .errors import ClspecError
from .qve import csv_kernel, low_rank_kernel, solve_qve_grid
from .sce import solve_grid, stability_certificate
from .spectral import eigen_decompose, local_law_record

log = logging.getLogger("clspec")

SUBCOMMANDS = ("solve", "qve", "sample", "stats", "local-law", "universality", "degrees")
EXIT_PASS, EXIT_ERROR, EXIT_FAIL = 0, 1, 2


def library_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        from . import __version__

        return __version__


# output --------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def records_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.writer(buf, lineterminator="\n")
        header = list(rows[0].keys())
        writer.writerow(header)
        for r in rows:
            writer.writerow([_fmt(r[k]) for k in header])
    return buf.getvalue()


def atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_default(obj):
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _clean(obj):
    """Replace non-finite floats so report.json stays strict JSON."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def write_outputs(out_dir: Path, subcommand: str, cfg: RunConfig, report: dict, rows: list[dict],
                  seeds: dict) -> None:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    manifest = {
        "subcommand": subcommand,
        "config": cfg.data,
        "config_hash": cfg.hash,
        "seeds": seeds,
        "version": library_version(),
        "numpy": np.__version__,
    }
    atomic_write(out_dir / "records.csv", records_csv(rows))
    atomic_write(out_dir / "report.json",
                 json.dumps(_clean(json.loads(json.dumps(report, default=_json_default))), indent=2, sort_keys=True))
    atomic_write(out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))


# subcommands ------------------------------------------------------------------

def _spec(cfg: RunConfig):
    N = cfg["N"]
    gammas = ens.profile_from_config(N, cfg["profile"])
    return ens.build_spec(N, cfg["kappa"], gammas, cfg["flatness_bound"])


def _E_values(cfg: RunConfig) -> np.ndarray:
    E = cfg["grid"]["E"]
    if isinstance(E, dict):
        return np.linspace(E["start"], E["stop"], E["num"])
    return np.asarray(E, dtype=float)


def _grid_by_E(cfg: RunConfig):
    etas = sorted(cfg["grid"]["eta"], reverse=True)
    return [[complex(E, eta) for eta in etas] for E in _E_values(cfg)]


def cmd_solve(cfg: RunConfig):
    spec = _spec(cfg)
    opts = cfg.solver_options
    rows, all_ok = [], True
    for line in _grid_by_E(cfg):
        for sol in solve_grid(spec, line, opts):
            cert = stability_certificate(sol)
            all_ok &= cert.ok
            row = {"E": sol.z.real, "eta": sol.z.imag, "re_m": sol.m.real, "im_m": sol.m.imag}
            for k, u in enumerate(sol.u):
                row[f"re_u{k}"] = u.real
                row[f"im_u{k}"] = u.imag
            row.update(residual=sol.residual, spectral_radius=cert.spectral_radius, iterations=sol.iterations)
            rows.append(row)
    rows.sort(key=lambda r: (r["E"], r["eta"]))
    report = {"kind": "solve", "passed": bool(all_ok), "status": "PASS" if all_ok else "FAIL",
              "checks": {"stability_certificate": bool(all_ok)}, "n_points": len(rows),
              "max_residual": max(r["residual"] for r in rows),
              "max_spectral_radius": max(r["spectral_radius"] for r in rows)}
    return report, rows, {}


def cmd_qve(cfg: RunConfig):
    qcfg = cfg["qve"]
    if "kernel_csv" in qcfg:
        kernel = csv_kernel(qcfg["kernel_csv"])
    else:
        spec = _spec(cfg)
        kernel = low_rank_kernel(spec.gammas, qcfg.get("n"))
    opts = cfg.solver_options
    rows = []
    for line in _grid_by_E(cfg):
        for sol in solve_qve_grid(kernel, line, opts):
            rows.append({"E": sol.z.real, "eta": sol.z.imag, "re_m": sol.m0.real, "im_m": sol.m0.imag,
                         "residual": sol.residual, "iterations": sol.iterations})
    rows.sort(key=lambda r: (r["E"], r["eta"]))
    report = {"kind": "qve", "passed": True, "status": "PASS", "checks": {}, "n": kernel.n,
              "kernel": kernel.kind.value, "n_points": len(rows),
              "max_residual": max(r["residual"] for r in rows)}
    return report, rows, {}


def _sample(cfg: RunConfig, seed: int):
    model = Model(cfg["model"])
    spec = None if model is Model.GOE else _spec(cfg)
    return spec, ens.sample(spec, model, seed, N=cfg["N"])


def cmd_sample(cfg: RunConfig):
    seed = cfg["seed"]
    _, H = _sample(cfg, seed)
    A = H.entries
    iu, ju = np.nonzero(np.triu(A))
    rows = [{"i": int(i), "j": int(j), "value": float(A[i, j])} for i, j in zip(iu, ju)]
    report = {"kind": "sample", "passed": True, "status": "PASS", "checks": {}, "N": H.N,
              "model": H.model.value, "nonzero_upper": len(rows),
              "frobenius_sq": float(np.sum(A * A))}
    return report, rows, {"sample": seed}


def cmd_stats(cfg: RunConfig):
    scfg = cfg["stats"]
    seed = cfg["seed"]
    spec = _spec(cfg)
    if "matrix" in scfg:
        H = np.load(scfg["matrix"])
        if H.shape != (spec.N, spec.N):
            raise ValueError(f"matrix {scfg['matrix']} has shape {H.shape}, expected N={spec.N}")
        spectrum = eigen_decompose(H)
    else:
        spectrum = eigen_decompose(ens.sample(spec, cfg["model"], seed))
    opts = cfg.solver_options
    rows = []
    for line in _grid_by_E(cfg):
        for sol in solve_grid(spec, line, opts):
            rows.append(harness.record_row(0, local_law_record(spectrum, sol, sol.z, scfg["pair_budget"])))
    rows.sort(key=lambda r: (r["E"], r["eta"]))
    report = {"kind": "stats", "passed": True, "status": "PASS", "checks": {}, "n_points": len(rows),
              "max_ratio": max(r["ratio"] for r in rows)}
    return report, rows, {"sample": None if "matrix" in scfg else seed}


def local_law_plan(cfg: RunConfig) -> harness.ExperimentPlan:
    p = cfg["plan"]
    spec = _spec(cfg)
    etas = list(p.get("eta", [])) + [float(spec.N) ** e for e in p.get("eta_exponents", [])]
    return harness.ExperimentPlan(
        spec=spec, model=cfg["model"], E_interval=tuple(p["E_interval"]), eta_list=sorted(set(etas)),
        samples=p["samples"], base_seed=cfg["seed"], n_E=p["n_E"], pair_budget=p["pair_budget"],
        delta=p["delta"], bulk_threshold=p["bulk_threshold"], quantile=p["quantile"],
        max_ratio=p["max_ratio"], threads=cfg["threads"], diagnostics=p["diagnostics"],
        solver=cfg.solver_options,
    )


def cmd_local_law(cfg: RunConfig):
    plan = local_law_plan(cfg)
    rep = harness.run_local_law(plan)
    seeds = {"base_seed": plan.base_seed,
             "samples": [harness.seed_for(plan.base_seed, s) for s in range(plan.samples)]}
    return rep.to_json(), rep.records, seeds


def cmd_universality(cfg: RunConfig):
    u = cfg["universality"]
    model = Model(cfg["model"])
    spec = None if model is Model.GOE else _spec(cfg)
    plan = harness.SpectrumPlan(model, cfg["N"], u["samples"], cfg["seed"], spec, u["bulk_fraction"],
                                cfg["threads"])
    goe = harness.SpectrumPlan(Model.GOE, cfg["N"], u["goe_samples"], u["goe_seed"],
                               bulk_fraction=u["bulk_fraction"], threads=cfg["threads"])
    rep = harness.run_universality(plan, goe, u["ks_max"], u["control_min"])
    return rep.to_json(), rep.records, {"base_seed": cfg["seed"], "goe_seed": u["goe_seed"]}


def cmd_degrees(cfg: RunConfig):
    d = cfg["degrees"]
    spec = _spec(cfg)
    rep = harness.run_degrees(spec, d["samples"], cfg["seed"], d.get("beta_range"), d["cutoff_quantile"],
                              d["n_boot"], cfg["threads"])
    return rep.to_json(), rep.records, {"base_seed": cfg["seed"]}


COMMANDS = {
    "solve": cmd_solve,
    "qve": cmd_qve,
    "sample": cmd_sample,
    "stats": cmd_stats,
    "local-law": cmd_local_law,
    "universality": cmd_universality,
    "degrees": cmd_degrees,
}


# entry point -----------------------------------------------------------------------

def _global_flags(parser, suppress):
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--config", metavar="PATH", help="JSON config or a manifest.json from an earlier run", **kw)
    parser.add_argument("--out", metavar="DIR", help="output directory", **kw)
    parser.add_argument("--seed", type=int, metavar="U64", help="base seed", **kw)
    parser.add_argument("--threads", type=int, metavar="N", help="worker threads for sampling", **kw)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr", **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clspec", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name, help=COMMANDS[name].__name__.removeprefix("cmd_").replace("_", "-"))
        _global_flags(sp, suppress=True)
    return parser


def run(subcommand: str, cfg: RunConfig, out_dir=None) -> int:
    """Execute one subcommand and write its artifacts. Returns the exit code."""
    out_dir = Path(out_dir if out_dir is not None else cfg["output"])
    report, rows, seeds = COMMANDS[subcommand](cfg)
    write_outputs(out_dir, subcommand, cfg, report, rows, seeds)
    return EXIT_PASS if report.get("passed") else EXIT_FAIL


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        text = "{}"
        if args.config:
            try:
                text = Path(args.config).read_text(encoding="utf-8")
            except OSError as exc:
                raise OSError(f"cannot read config {args.config}: {exc}") from exc
            _, recorded = load_document(text)
            if recorded is not None and recorded != args.subcommand:
                raise ValueError(f"manifest was written by '{recorded}', not '{args.subcommand}'")
        flags = {k: v for k, v in (("output", args.out), ("seed", args.seed), ("threads", args.threads))
                 if v is not None}
        cfg = parse_config(text, environ=os.environ, flags=flags)
        code = run(args.subcommand, cfg)
    except (ClspecError, OSError, ValueError) as exc:
        print(f"clspec {args.subcommand}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    status = "PASS" if code == EXIT_PASS else "FAIL"
    print(f"clspec {args.subcommand}: {status} -> {cfg['output']}")
    return code


if __name__ == "__main__":
    sys.exit(main())
