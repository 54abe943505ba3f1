import json

import numpy as np
import pytest

from boltzlayer import io
from boltzlayer.spatial import build_spatial_grid
from boltzlayer.velocity_grid import build_grid


def test_defaults_valid_and_hash_stable():
    a = io.load_config(environ={})
    b = io.load_config(environ={})
    assert a == b and io.config_hash(a) == io.config_hash(b)
    assert a["seed"] == 42
    c = io.load_config(environ={}, seed=7)
    assert c["seed"] == 7 and io.config_hash(c) != io.config_hash(a)


def test_missing_key_path(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"equilibrium": {"u_inf": [-2, 0, 0], "T_inf": 0.6, "sigma0": 0.2}}))
    with pytest.raises(io.ConfigError) as e:
        io.load_config(p, environ={})
    assert e.value.path == "equilibrium.rho_inf"


@pytest.mark.parametrize(
    "patch,path",
    [
        ({"velocity_grid": {"n_per_axis": 3}}, "velocity_grid.n_per_axis"),
        ({"solver": {"bogus": 1}}, "solver.bogus"),
        ({"equilibrium": {"rho_inf": -1.0, "u_inf": [-2, 0, 0], "T_inf": 0.6, "sigma0": 0.2}}, "equilibrium.rho_inf"),
        ({"equilibrium": {"rho_inf": 1.0, "u_inf": [-2, 0], "T_inf": 0.6, "sigma0": 0.2}}, "equilibrium.u_inf"),
    ],
)
def test_schema_paths(tmp_path, patch, path):
    cfg = {"equilibrium": {"rho_inf": 1.0, "u_inf": [-2, 0, 0], "T_inf": 0.6, "sigma0": 0.2}}
    cfg.update(patch)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    with pytest.raises(io.ConfigError) as e:
        io.load_config(p, environ={})
    assert e.value.path == path


def test_env_override():
    env = {"BOLTZLAYER_SOLVER__K_MAX": "12", "BOLTZLAYER_DYNAMICS__NX": "50", "BOLTZLAYER_THREADS": "1", "PATH": "/bin"}
    cfg = io.load_config(environ=env)
    assert cfg["solver"]["k_max"] == 12 and cfg["dynamics"]["nx"] == 50
    with pytest.raises(io.ConfigError) as e:
        io.load_config(environ={"BOLTZLAYER_SOLVER__NOPE": "1"})
    assert e.value.path == "solver.nope"


def test_operator_cache_roundtrip(tmp_path, op6, state, grid6):
    io.save_operator(op6, tmp_path)
    back = io.load_operator(state, grid6, tmp_path)
    assert np.array_equal(back.K_matrix, op6.K_matrix) and np.array_equal(back.nu, op6.nu)
    assert back.asymmetry == op6.asymmetry
    # a different grid misses the cache
    assert io.load_operator(state, build_grid(6, grid6.cutoff * 1.1), tmp_path) is None
    # a corrupted payload is rejected by the content hash
    bin_path, side = io.operator_cache_paths(tmp_path, state, grid6, 5)
    raw = bytearray(bin_path.read_bytes())
    raw[100] ^= 1
    bin_path.write_bytes(bytes(raw))
    assert io.load_operator(state, grid6, tmp_path) is None
    header = json.loads(side.read_text())
    assert header["grid_hash"] == grid6.digest() and header["dtype"] == "<f8"


def test_snapshot_roundtrip(tmp_path):
    vg = build_grid(4, 3.0)
    sg = build_spatial_grid(7, 5.0, ratio=1.1)
    rng = np.random.default_rng(0)
    v = rng.standard_normal(sg.shape + (vg.size,))
    io.write_snapshot(tmp_path / "snap", v, sg, vg, time=1.5)
    back, header = io.read_snapshot(tmp_path / "snap")
    assert np.array_equal(back, v)
    assert header["time"] == 1.5 and header["representation"] == "weighted"
    assert header["shape"] == list(v.shape)


def test_csv_roundtrip_and_manifest(tmp_path):
    rows = [(0.0, 1.0 / 3.0), (1.0, 2.0 / 7.0)]
    io.write_csv(tmp_path / "a.csv", ["t", "norm"], rows)
    header, arr = io.read_csv(tmp_path / "a.csv")
    assert header == ["t", "norm"] and np.array_equal(arr, np.array(rows))
    cfg = io.load_config(environ={})
    m1 = io.write_manifest(tmp_path, cfg, "x").read_bytes()
    m2 = io.write_manifest(tmp_path, cfg, "x").read_bytes()
    assert m1 == m2
    man = json.loads(m1)
    assert man["config_hash"] == io.config_hash(cfg) and "a.csv" in man["files"]


def test_moment_profiles(state, grid6):
    from boltzlayer.velocity_grid import maxwellian, weight_w0

    # f = W0 gives W0 f = M, whose density is rho_inf up to quadrature error
    f = weight_w0(state, grid6)[None, :].repeat(3, axis=0)
    rows = io.moment_profiles(f, np.arange(3.0), state, grid6)
    assert len(rows) == 3 and len(rows[0]) == 6
    assert rows[0][1] == pytest.approx(np.sum(grid6.weights * maxwellian(state, grid6)), rel=1e-12)
