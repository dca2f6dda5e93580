import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from clspec import cli
from clspec.config import env_overrides, parse_config
from clspec.errors import SchemaViolation

from oracles import semicircle_m


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return path


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# config ------------------------------------------------------------------------

def test_defaults():
    cfg = parse_config("{}")
    assert cfg["solver"]["tol"] == 1e-12
    assert cfg.solver_options.tol == 1e-12
    assert cfg["plan"]["quantile"] == 0.95


def test_kappa_range_violation():
    with pytest.raises(SchemaViolation) as info:
        parse_config('{"kappa": 1.5}')
    paths = [p for p, _ in info.value.violations]
    assert paths == ["kappa"]
    assert "(0,1]" in str(info.value)


def test_unknown_key_named():
    with pytest.raises(SchemaViolation) as info:
        parse_config('{"colour": "red"}')
    assert info.value.violations[0][0] == "colour"
    assert "colour" in info.value.violations[0][1]


def test_all_violations_reported():
    text = json.dumps({"kappa": 0, "N": -3, "solver": {"tol": -1, "nope": 1}, "plan": {"E_interval": [1, 0]}})
    with pytest.raises(SchemaViolation) as info:
        parse_config(text)
    paths = {p for p, _ in info.value.violations}
    assert {"kappa", "N", "solver/tol", "solver/nope", "plan/E_interval"} <= paths


def test_profile_schema():
    with pytest.raises(SchemaViolation):
        parse_config('{"profile": {"kind": "power_law"}}')
    with pytest.raises(SchemaViolation):
        parse_config('{"profile": {"kind": "power_law", "mu": 0.5}}')
    cfg = parse_config('{"profile": [{"kind": "power_law", "mu": 0.25}, {"kind": "constant"}]}')
    assert len(cfg["profile"]) == 2


def test_invalid_json():
    with pytest.raises(SchemaViolation):
        parse_config("{nope")


def test_env_overrides_and_precedence():
    env = {"CLSPEC_KAPPA": "0.4", "CLSPEC_PLAN__SAMPLES": "3", "CLSPEC_MODEL": "centered",
           "CLSPEC_PLAN__E_INTERVAL": "[-0.1, 0.1]", "OTHER": "x"}
    assert env_overrides(env) == {"kappa": 0.4, "model": "centered",
                                  "plan": {"samples": 3, "E_interval": [-0.1, 0.1]}}
    cfg = parse_config('{"kappa": 0.2, "seed": 5, "plan": {"n_E": 2}}', environ=env, flags={"seed": 9})
    assert cfg["kappa"] == 0.4
    assert cfg["seed"] == 9
    assert cfg["plan"]["samples"] == 3 and cfg["plan"]["n_E"] == 2
    with pytest.raises(SchemaViolation):
        parse_config("{}", environ={"CLSPEC_SOLVER__TOL": "big"})


def test_config_hash_stable():
    a = parse_config('{"N": 10, "kappa": 0.5}')
    b = parse_config('{"kappa": 0.5, "N": 10}')
    assert a.hash == b.hash
    assert a.hash != parse_config('{"N": 11}').hash


# cli ---------------------------------------------------------------------------

SEMI = {"N": 50, "kappa": 0.5, "grid": {"E": {"start": -2.5, "stop": 2.5, "num": 7}, "eta": [1.0, 0.01]}}


def test_solve_semicircle(tmp_path):
    cfg = _write(tmp_path / "c.json", SEMI)
    assert cli.main(["solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = _read_csv(tmp_path / "o" / "records.csv")
    assert len(rows) == 14
    assert list(rows[0])[:4] == ["E", "eta", "re_m", "im_m"]
    assert {"re_u0", "im_u0", "residual", "spectral_radius"} <= set(rows[0])
    for r in rows:
        z = complex(float(r["E"]), float(r["eta"]))
        assert abs(float(r["im_m"]) - semicircle_m(z).imag) <= 1e-10
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["status"] == "PASS"
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["subcommand"] == "solve"
    assert set(manifest) >= {"config_hash", "seeds", "version", "config"}
    assert not [p for p in os.listdir(tmp_path / "o") if p.endswith(".tmp")]


def test_full_precision_csv(tmp_path):
    cli.main(["solve", "--config", str(_write(tmp_path / "c.json", SEMI)), "--out", str(tmp_path / "o")])
    rows = _read_csv(tmp_path / "o" / "records.csv")
    v = float(rows[3]["im_m"])
    assert "%.17g" % v == rows[3]["im_m"]


def test_rerun_and_manifest_reproduce(tmp_path):
    conf = dict(SEMI, N=80, plan={"E_interval": [-0.3, 0.3], "n_E": 2, "eta": [0.2], "samples": 2})
    cfg = _write(tmp_path / "c.json", conf)
    for d in ("a", "b"):
        assert cli.main(["local-law", "--config", str(cfg), "--out", str(tmp_path / d), "--seed", "11"]) in (0, 2)
    first = (tmp_path / "a" / "records.csv").read_bytes()
    assert first == (tmp_path / "b" / "records.csv").read_bytes()
    manifest = tmp_path / "a" / "manifest.json"
    cli.main(["local-law", "--config", str(manifest), "--out", str(tmp_path / "c")])
    assert (tmp_path / "c" / "records.csv").read_bytes() == first
    # a manifest from another subcommand is rejected
    assert cli.main(["solve", "--config", str(manifest), "--out", str(tmp_path / "d")]) == 1


def test_local_law_threshold_failure_exit_code(tmp_path):
    conf = {"N": 80, "kappa": 0.5, "profile": {"kind": "power_law", "mu": 0.25},
            "plan": {"E_interval": [-0.3, 0.3], "n_E": 2, "eta": [0.2], "samples": 2, "max_ratio": 1e-6}}
    code = cli.main(["local-law", "--config", str(_write(tmp_path / "c.json", conf)), "--out", str(tmp_path / "o")])
    assert code == 2
    assert json.loads((tmp_path / "o" / "report.json").read_text())["status"] == "FAIL"


def test_error_exit_code(tmp_path, capsys):
    bad = _write(tmp_path / "c.json", {"kappa": 1.5, "colour": 1})
    assert cli.main(["solve", "--config", str(bad)]) == 1
    err = capsys.readouterr().err
    assert "kappa" in err and "colour" in err
    assert cli.main(["solve", "--config", str(tmp_path / "missing.json")]) == 1
    # sparsity violation surfaces as an error, not a threshold failure
    assert cli.main(["solve", "--config", str(_write(tmp_path / "s.json", {"N": 4, "kappa": 1.0,
                     "profile": {"kind": "constant", "value": 2}})), "--out", str(tmp_path / "x")]) == 1


def test_other_subcommands(tmp_path):
    base = {"N": 64, "kappa": 0.5, "profile": {"kind": "power_law", "mu": 0.25},
            "grid": {"E": [0.0, 0.5], "eta": [0.1]}, "qve": {"n": 32},
            "universality": {"samples": 2, "goe_samples": 2},
            "degrees": {"samples": 2, "n_boot": 10}}
    cfg = str(_write(tmp_path / "c.json", base))
    for sub in ("qve", "sample", "stats", "universality", "degrees"):
        out = tmp_path / sub
        assert cli.main([sub, "--config", cfg, "--out", str(out), "--threads", "2"]) in (0, 2), sub
        assert (out / "records.csv").stat().st_size > 0
        json.loads((out / "report.json").read_text())
    rows = _read_csv(tmp_path / "sample" / "records.csv")
    assert {"i", "j", "value"} == set(rows[0])
    assert all(int(r["i"]) <= int(r["j"]) for r in rows)
    stats = _read_csv(tmp_path / "stats" / "records.csv")
    assert len(stats) == 2 and float(stats[0]["ratio"]) > 0


def test_stats_from_matrix_file(tmp_path):
    from clspec import ensemble as ens

    spec = ens.build_spec(64, 0.5, ens.power_law_profile(64, 0.25))
    np.save(tmp_path / "H.npy", ens.sample_random_sign(spec, 4).entries)
    conf = {"N": 64, "kappa": 0.5, "profile": {"kind": "power_law", "mu": 0.25},
            "grid": {"E": [0.0], "eta": [0.1]}, "stats": {"matrix": str(tmp_path / "H.npy")}}
    assert cli.main(["stats", "--config", str(_write(tmp_path / "c.json", conf)), "--out", str(tmp_path / "o")]) == 0


def test_env_override_through_main(tmp_path, monkeypatch):
    monkeypatch.setenv("CLSPEC_GRID__ETA", "[0.5]")
    cli.main(["solve", "--config", str(_write(tmp_path / "c.json", SEMI)), "--out", str(tmp_path / "o")])
    assert len(_read_csv(tmp_path / "o" / "records.csv")) == 7


def test_in_process_equals_subprocess(tmp_path):
    conf = {"N": 64, "kappa": 0.5, "seed": 3, "profile": {"kind": "power_law", "mu": 0.25}}
    cfg = str(_write(tmp_path / "c.json", conf))
    cli.main(["sample", "--config", cfg, "--out", str(tmp_path / "a")])
    cli.main(["sample", "--config", cfg, "--out", str(tmp_path / "b")])
    env = {k: v for k, v in os.environ.items() if not k.startswith("CLSPEC_")}
    subprocess.run([sys.executable, "-m", "clspec.cli", "sample", "--config", cfg, "--out", str(tmp_path / "c")],
                   check=True, env=env, capture_output=True)
    a = (tmp_path / "a" / "records.csv").read_bytes()
    assert a == (tmp_path / "b" / "records.csv").read_bytes() == (tmp_path / "c" / "records.csv").read_bytes()


def test_flags_before_subcommand(tmp_path):
    cfg = str(_write(tmp_path / "c.json", SEMI))
    assert cli.main(["--config", cfg, "--out", str(tmp_path / "o"), "solve"]) == 0
    assert (tmp_path / "o" / "records.csv").exists()
