import json

import pytest

from boltzlayer import io
from boltzlayer.cli import EXIT_CONFIG, EXIT_NUMERICAL, main

SMALL = {
    "equilibrium": {"rho_inf": 1.0, "u_inf": [-2.0, 0.0, 0.0], "T_inf": 0.6, "sigma0": 0.2},
    "velocity_grid": {"n_per_axis": 4},
    "dynamics": {"n_per_axis": 6, "nx": 30, "ratio": 1.15},
    "solver": {"k_max": 6, "periodic_tol": 1e-4, "horizon": 1.0, "eta": 1.0, "delta_sweep": [1e-3]},
    "stability": {"count": 2, "horizon": 4.0, "window_start": 1.0},
    "evolve": {"t_final": 4.0, "window_start": 1.0},
}


@pytest.fixture()
def cfg_path(tmp_path):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(SMALL))
    return p


@pytest.fixture(scope="module")
def cache(tmp_path_factory):
    return tmp_path_factory.mktemp("cache")


def _run(cmd, cfg_path, out, cache, *extra):
    return main([cmd, "--config", str(cfg_path), "--out-dir", str(out), "--cache-dir", str(cache), *extra])


def test_missing_rho_exit_2(tmp_path, capsys):
    bad = dict(SMALL, equilibrium={"u_inf": [-2, 0, 0], "T_inf": 0.6, "sigma0": 0.2})
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(bad))
    assert main(["slab", "--config", str(p), "--out-dir", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "equilibrium.rho_inf" in capsys.readouterr().err


def test_subsonic_exit_2(tmp_path):
    bad = dict(SMALL, equilibrium={"rho_inf": 1.0, "u_inf": [-0.5, 0, 0], "T_inf": 0.6, "sigma0": 0.2})
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(bad))
    assert main(["slab", "--config", str(p), "--out-dir", str(tmp_path / "o")]) == EXIT_CONFIG


def test_numerical_failure_exit_3(cfg_path, tmp_path, cache, capsys):
    assert _run("evolve", cfg_path, tmp_path / "o", cache, "--dt", "1.0") == EXIT_NUMERICAL
    assert "EvolutionError" in capsys.readouterr().err
    assert json.loads((tmp_path / "o" / "failure.json").read_text())["error"] == "EvolutionError"


def test_slab(cfg_path, tmp_path, cache):
    out = tmp_path / "slab"
    assert _run("slab", cfg_path, out, cache) == 0
    rep = json.loads((out / "slab_report.json").read_text())
    assert rep["gamma0"] > 0 and rep["bound_holds"]
    header, rows = io.read_csv(out / "moments.csv")
    assert header == ["x1", "rho", "m1", "m2", "m3", "energy"] and rows.shape[0] == 30
    man = json.loads((out / "manifest.json").read_text())
    assert man["config_hash"] == io.config_hash(io.load_config(cfg_path, environ={}))
    assert not any(k.startswith("cache") for k in man["files"])


def test_evolve_outputs(cfg_path, tmp_path, cache):
    out = tmp_path / "ev"
    assert _run("evolve", cfg_path, out, cache, "--t-final", "2.0", "--snapshot-every", "10", "--series-order", "6") == 0
    header, rows = io.read_csv(out / "norms.csv")
    assert header == ["t", "L2", "Linf_beta", "bracket_norm"]
    assert abs(rows[-1, 0] - 2.0) < 0.1
    assert (rows[:, 3] == rows[:, 1] + rows[:, 2]).all()
    rep = json.loads((out / "evolve_report.json").read_text())
    assert rep["series"]["relative_error"] < 1e-3
    assert (out / "snapshots" / "evolve_00000.bin").exists()


def test_verify_all_deterministic(cfg_path, tmp_path, cache):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run("verify-all", cfg_path, a, cache) == 0
    assert _run("verify-all", cfg_path, b, cache) == 0
    ra = (a / "constants_report.json").read_bytes()
    assert ra == (b / "constants_report.json").read_bytes()
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    rep = json.loads(ra)
    # nu2 is resolved only on finer operator grids; 4^3 is too coarse for its sign
    assert rep["constants"]["nu2"]["provenance"]
    for k in ("nu0", "nu1", "k0", "k1", "k5", "k3", "kappa_hat", "gamma0_hat", "A_pq"):
        assert rep["constants"][k]["value"] > 0 and rep["constants"][k]["provenance"]


def test_periodic_and_stability(cfg_path, tmp_path, cache):
    out = tmp_path / "per"
    assert _run("periodic", cfg_path, out, cache) == 0
    header, rows = io.read_csv(out / "cauchy.csv")
    assert header == ["k", "norm"] and rows.shape[0] >= 3
    out = tmp_path / "stab"
    assert _run("stability", cfg_path, out, cache) == 0
    header, rows = io.read_csv(out / "stability.csv")
    assert header == ["t", "diff_L2", "diff_Linf_beta", "bracket"]
    assert rows[-1, 3] < rows[0, 3]


def test_global(cfg_path, tmp_path, cache):
    out = tmp_path / "glob"
    assert _run("global", cfg_path, out, cache) == 0
    rep = json.loads((out / "global_report.json").read_text())
    run = rep["runs"][0]
    assert run["contraction_factor"] < 1 and run["residual"] <= 10 * run["tol"] * run["norm"]
