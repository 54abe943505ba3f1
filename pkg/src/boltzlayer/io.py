"""Configuration, operator cache, field snapshots, CSV/JSON writers and run manifests."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import os
from pathlib import Path

import jsonschema
import numpy as np

from .collision import LinearizedOperator, assemble_linearized, build_quadrature
from .velocity_grid import EquilibriumState, VelocityGrid, build_null_basis, moments, weight_w0

ENV_PREFIX = "BOLTZLAYER_"
CACHE_VERSION = 1


class ConfigError(ValueError):
    """Schema violation; `path` is the dotted key of the offending entry."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int_pos = {"type": "integer", "minimum": 1}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["equilibrium"],
    "properties": {
        "equilibrium": {
            "type": "object",
            "additionalProperties": False,
            "required": ["rho_inf", "u_inf", "T_inf", "sigma0"],
            "properties": {
                "rho_inf": _pos,
                "u_inf": {"type": "array", "items": _num, "minItems": 3, "maxItems": 3},
                "T_inf": _pos,
                "sigma0": _pos,
            },
        },
        "velocity_grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_per_axis": {"type": "integer", "minimum": 4, "maximum": 16},
                "cutoff": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "sphere_degree": {"type": "integer", "enum": [3, 5, 7, 9, 11, 13, 15, 17]},
            },
        },
        "dynamics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_per_axis": {"type": "integer", "minimum": 4, "maximum": 12},
                "nx": {"type": "integer", "minimum": 3, "maximum": 200},
                "ratio": {"type": "number", "minimum": 1},
                "x_max_factor": {"type": "number", "minimum": 10},
                "dt_numax": {"type": "number", "exclusiveMinimum": 0, "maximum": 2},
                "beta": {"type": "number", "exclusiveMinimum": 1.5},
            },
        },
        "boundary": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "delta_tilde": {"type": "number", "minimum": 0},
                "eps": {"type": "number", "minimum": 0},
                "period": _pos,
                "amp": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "slab_tol": _pos,
                "picard_tol": _pos,
                "max_iter": _int_pos,
                "horizon": _pos,
                "k_max": _int_pos,
                "periodic_tol": _pos,
                "levels": {"type": "integer", "minimum": 1, "maximum": 4},
                "gamma_dtype": {"enum": ["float32", "float64"]},
                "eta": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "delta_sweep": {"type": "array", "items": _pos, "minItems": 1},
            },
        },
        "stability": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "count": {"type": "integer", "minimum": 1, "maximum": 8},
                "amplitude": _pos,
                "horizon": _pos,
                "window_start": {"type": "number", "minimum": 0},
            },
        },
        "evolve": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "t_final": _pos,
                "dt": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "series_order": {"type": ["integer", "null"], "minimum": 1, "maximum": 8},
                "window_start": {"type": "number", "minimum": 0},
            },
        },
        "seed": {"type": "integer", "minimum": 0},
        "snapshot_every": {"type": "integer", "minimum": 0},
    },
}

DEFAULTS = {
    "equilibrium": {"rho_inf": 1.0, "u_inf": [-2.0, 0.0, 0.0], "T_inf": 0.6, "sigma0": 0.2},
    "velocity_grid": {"n_per_axis": 8, "cutoff": None, "sphere_degree": 5},
    "dynamics": {"n_per_axis": 6, "nx": 100, "ratio": 1.05, "x_max_factor": 10.0, "dt_numax": 1.0, "beta": 4.0},
    "boundary": {"delta_tilde": 1e-3, "eps": 1e-3, "period": 4.0, "amp": 0.5},
    "solver": {
        "slab_tol": 1e-13,
        "picard_tol": 1e-12,
        "max_iter": 30,
        "horizon": 4.0,
        "k_max": 40,
        "periodic_tol": 1e-8,
        "levels": 3,
        "gamma_dtype": "float32",
        "eta": None,
        "delta_sweep": [1e-3, 1e-2, 1e-1],
    },
    # the farthest perturbation (centre x1 = 4) leaves its near-wall transient by t ~ 6
    "stability": {"count": 3, "amplitude": 1e-3, "horizon": 24.0, "window_start": 8.0},
    "evolve": {"t_final": 20.0, "dt": None, "series_order": None, "window_start": 5.0},
    "seed": 42,
    "snapshot_every": 0,
}


def _json_path(err: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in err.absolute_path)
    if err.validator == "required":
        missing = err.message.split("'")[1]
        path = f"{path}.{missing}" if path else missing
    elif err.validator == "additionalProperties":
        extra = err.message.split("'")[1]
        path = f"{path}.{extra}" if path else extra
    return path


def validate_config(cfg: dict) -> None:
    v = jsonschema.Draft202012Validator(SCHEMA)
    errs = sorted(v.iter_errors(cfg), key=lambda e: (len(list(e.absolute_path)), _json_path(e)))
    if errs:
        e = errs[0]
        raise ConfigError(_json_path(e), e.message)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def env_overrides(environ=None) -> dict:
    """BOLTZLAYER_SECTION__KEY=value (JSON literal or bare string) becomes
    {"section": {"key": value}}; keys match case-insensitively against the schema."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX) or name[len(ENV_PREFIX):] in ("CONFIG", "THREADS"):
            continue
        parts = name[len(ENV_PREFIX):].split("__")
        node, props, tgt = SCHEMA, None, out
        keys = []
        for i, p in enumerate(parts):
            props = node.get("properties", {})
            match = next((k for k in props if k.lower() == p.lower()), None)
            if match is None:
                raise ConfigError(".".join(keys + [p.lower()]), f"unknown key in environment variable {name}")
            keys.append(match)
            node = props[match]
            if i < len(parts) - 1:
                tgt = tgt.setdefault(match, {})
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        tgt[keys[-1]] = val
    return out


def load_config(path: str | os.PathLike | None = None, environ=None, seed: int | None = None) -> dict:
    """User config (validated as given), then environment overrides, then defaults for
    every optional key. Without a file the built-in defaults are used."""
    if path is None:
        user = {"equilibrium": copy.deepcopy(DEFAULTS["equilibrium"])}
    else:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError("", f"invalid JSON in {path}: {e}") from None
        except OSError as e:
            raise ConfigError("", f"cannot read config {path}: {e}") from None
    if not isinstance(user, dict):
        raise ConfigError("", "config must be a JSON object")
    user = _merge(user, env_overrides(environ))
    if seed is not None:
        user["seed"] = int(seed)
    validate_config(user)
    cfg = _merge(DEFAULTS, user)
    validate_config(cfg)
    return cfg


def canonical_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def state_from_config(cfg: dict) -> EquilibriumState:
    e = cfg["equilibrium"]
    return EquilibriumState(e["rho_inf"], tuple(e["u_inf"]), e["T_inf"], e["sigma0"])


# --------------------------------------------------------------------------- JSON / CSV

def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n")
    return path


def write_csv(path, header: list, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def read_csv(path) -> tuple[list, np.ndarray]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [[float(v) for v in row] for row in r]
    return header, np.array(rows, dtype=float).reshape(-1, len(header))


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --------------------------------------------------------------------------- operator cache

def _operator_key(state: EquilibriumState, grid: VelocityGrid, sphere_degree: int) -> dict:
    return {
        "version": CACHE_VERSION,
        "grid_hash": grid.digest(),
        "n_per_axis": grid.per_axis_count,
        "cutoff": grid.cutoff,
        "state": state.as_dict(),
        "sphere_degree": int(sphere_degree),
    }


def operator_cache_paths(cache_dir, state, grid, sphere_degree) -> tuple[Path, Path]:
    key = hashlib.sha256(canonical_json(_operator_key(state, grid, sphere_degree)).encode()).hexdigest()[:16]
    d = Path(cache_dir)
    return d / f"operator_{key}.bin", d / f"operator_{key}.json"


def save_operator(op: LinearizedOperator, cache_dir, sphere_degree: int = 5) -> tuple[Path, Path]:
    """Little-endian float64 dump of nu, nu_discrete and K with a JSON sidecar."""
    Path(cache_dir).mkdir(parents=True, exist_ok=True)
    bin_path, side = operator_cache_paths(cache_dir, op.state, op.grid, sphere_degree)
    n = op.grid.size
    nu_d = op.nu_discrete if op.nu_discrete is not None else np.full(n, np.nan)
    blob = np.concatenate([op.nu, nu_d, op.K_matrix.ravel()]).astype("<f8")
    bin_path.write_bytes(blob.tobytes())
    header = _operator_key(op.state, op.grid, sphere_degree)
    header.update(
        size=n,
        layout=["nu", "nu_discrete", "K_matrix(row-major)"],
        dtype="<f8",
        asymmetry=op.asymmetry,
        max_eigenvalue=op.max_eigenvalue,
        content_hash=file_digest(bin_path),
    )
    write_json(side, header)
    return bin_path, side


def load_operator(state: EquilibriumState, grid: VelocityGrid, cache_dir, sphere_degree: int = 5) -> LinearizedOperator | None:
    """Cached operator when the sidecar matches grid hash, state and rule, else None."""
    bin_path, side = operator_cache_paths(cache_dir, state, grid, sphere_degree)
    if not (bin_path.exists() and side.exists()):
        return None
    header = json.loads(side.read_text())
    key = _operator_key(state, grid, sphere_degree)
    if any(_plain(header.get(k)) != _plain(v) for k, v in key.items()):
        return None
    if file_digest(bin_path) != header.get("content_hash"):
        return None
    n = grid.size
    blob = np.frombuffer(bin_path.read_bytes(), dtype="<f8")
    if blob.size != 2 * n + n * n:
        return None
    nu, nu_d, K = blob[:n].copy(), blob[n : 2 * n].copy(), blob[2 * n :].reshape(n, n).copy()
    return LinearizedOperator(
        state=state,
        grid=grid,
        nu=nu,
        K_matrix=K,
        basis=build_null_basis(state, grid),
        asymmetry=float(header["asymmetry"]),
        nu_discrete=None if np.all(np.isnan(nu_d)) else nu_d,
        max_eigenvalue=float(header["max_eigenvalue"]),
    )


def cached_operator(state, grid, cache_dir=None, sphere_degree: int = 5, rebuild: bool = False):
    """(quadrature, operator, content hash); assembles and stores on a cache miss."""
    quad = build_quadrature(state, grid, sphere_degree)
    op = None
    if cache_dir is not None and not rebuild:
        op = load_operator(state, grid, cache_dir, sphere_degree)
    if op is None:
        op = assemble_linearized(state, grid, quad)
        if cache_dir is not None:
            save_operator(op, cache_dir, sphere_degree)
    if cache_dir is not None:
        _, side = operator_cache_paths(cache_dir, state, grid, sphere_degree)
        digest = json.loads(side.read_text())["content_hash"]
    else:
        digest = hashlib.sha256(np.ascontiguousarray(op.K_matrix, dtype="<f8").tobytes()).hexdigest()
    return quad, op, digest


# --------------------------------------------------------------------------- snapshots

def write_snapshot(path, values: np.ndarray, sgrid, vgrid: VelocityGrid, rep: str = "weighted", time: float = 0.0) -> tuple[Path, Path]:
    """Column-major (velocity-major) little-endian float64 block plus a JSON header."""
    path = Path(path)
    bin_path, side = path.with_suffix(".bin"), path.with_suffix(".json")
    arr = np.asarray(values, dtype="<f8")
    cols = np.moveaxis(arr, -1, 0)
    bin_path.write_bytes(np.ascontiguousarray(cols).tobytes())
    write_json(
        side,
        {
            "shape": list(arr.shape),
            "layout": "velocity-major",
            "dtype": "<f8",
            "representation": rep,
            "time": float(time),
            "x1": sgrid.x,
            "n2": sgrid.n2,
            "n3": sgrid.n3,
            "period": sgrid.period,
            "velocity_grid": {"n_per_axis": vgrid.per_axis_count, "cutoff": vgrid.cutoff, "hash": vgrid.digest()},
            "content_hash": file_digest(bin_path),
        },
    )
    return bin_path, side


def read_snapshot(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    shape = header["shape"]
    cols = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    cols = cols.reshape([shape[-1]] + shape[:-1])
    return np.ascontiguousarray(np.moveaxis(cols, 0, -1)), header


def moment_profiles(values: np.ndarray, x: np.ndarray, state: EquilibriumState, vgrid: VelocityGrid) -> list:
    """Rows (x1, rho, m1, m2, m3, energy) of the moments of W0 f at each x1 node
    (tangential mode zero)."""
    v = np.asarray(values)
    if v.ndim == 4:
        v = v[:, 0, 0, :]
    w0 = weight_w0(state, vgrid)
    rows = []
    for xi, f in zip(x, v):
        rows.append([float(xi)] + [float(m) for m in moments(w0 * f, vgrid)])
    return rows


def write_manifest(out_dir, cfg: dict, command: str, extra: dict | None = None, exclude=("manifest.json",), skip_dirs=()) -> Path:
    """Manifest with config hash and content hashes of every output file (sorted, no
    wall-clock data, so identical runs give identical manifests)."""
    out_dir = Path(out_dir)
    skip = [Path(d).resolve() for d in skip_dirs]
    files = {}
    for p in sorted(out_dir.rglob("*")):
        if any(d == p.resolve() or d in p.resolve().parents for d in skip):
            continue
        if p.is_file() and p.name not in exclude:
            files[str(p.relative_to(out_dir))] = file_digest(p)
    man = {"command": command, "config_hash": config_hash(cfg), "config": cfg, "files": files}
    if extra:
        man.update(extra)
    return write_json(out_dir / "manifest.json", man)
