"""Scenario pipelines behind the command line: each takes a resolved config, writes
its artifacts into an output directory and returns a JSON-ready report."""

from __future__ import annotations

from dataclasses import dataclass
import logging
import math
from pathlib import Path

import numpy as np

from . import io
from .collision import (
    a_matrix,
    coercivity_constant,
    gamma_constant,
    kernel_bound_check,
    p_xi1_bound,
    spectral_report,
)
from .kernel_estimates import kernel_estimates
from .nonlinear import (
    build_problem,
    calibrate_eta,
    contraction_factor,
    extract_periodic,
    orbit_residual,
    perturbation_family,
    solve_slab_stationary,
    solve_time_global,
    stability_experiment,
    verify_stationarity,
)
from .norms import bracket, l2_norm, linf_beta
from .semigroup import LinearEvolver, decay_fit, duhamel_series, evolve_linear, weighted_decay_check
from .spatial import DistributionField, build_spatial_grid, check_sigma, default_sigma, make_boundary_spec
from .velocity_grid import build_grid, default_cutoff

log = logging.getLogger(__name__)


@dataclass
class Setup:
    cfg: dict
    state: object
    vgrid: object
    quad: object
    op: object
    op_hash: str
    sigma: float
    sgrid: object
    ev: LinearEvolver
    beta: float
    cache_dir: Path | None = None

    @property
    def period(self) -> float:
        return float(self.cfg["boundary"]["period"])

    def describe(self) -> dict:
        return {
            "velocity_grid": {"n_per_axis": self.vgrid.per_axis_count, "cutoff": self.vgrid.cutoff, "hash": self.vgrid.digest()},
            "spatial_grid": {"nx": self.sgrid.nx, "x_max": self.sgrid.x_max, "ratio": self.sgrid.ratio},
            "sigma": self.sigma,
            "dt": self.ev.dt,
            "beta": self.beta,
            "operator_hash": self.op_hash,
        }


def _cutoff(cfg: dict, state) -> float:
    c = cfg["velocity_grid"]["cutoff"]
    return float(c) if c is not None else default_cutoff(state.T_inf, state.u)


def steps_per_period(period: float, numax: float, dt_numax: float) -> int:
    """Smallest multiple of 4 with period / m <= dt_numax / max(nu)."""
    return 4 * math.ceil(period * numax / (4.0 * dt_numax))


def build_setup(cfg: dict, cache_dir=None, rebuild: bool = False) -> Setup:
    """Dynamics grid, operator (cached), damping weight, slab grid and evolver."""
    state = io.state_from_config(cfg)
    state.require_supersonic_inflow()
    dyn = cfg["dynamics"]
    vgrid = build_grid(dyn["n_per_axis"], _cutoff(cfg, state))
    quad, op, digest = io.cached_operator(state, vgrid, cache_dir, cfg["velocity_grid"]["sphere_degree"], rebuild)
    sigma = default_sigma(op.nu, vgrid)
    check_sigma(sigma, op.nu, vgrid)
    sgrid = build_spatial_grid(dyn["nx"], dyn["x_max_factor"] / sigma, ratio=dyn["ratio"], sigma=sigma)
    numax = float(np.max(op.nu))
    P = float(cfg["boundary"]["period"])
    ev = LinearEvolver(op, sgrid, vgrid, sigma, dt=P / steps_per_period(P, numax, dyn["dt_numax"]))
    return Setup(cfg, state, vgrid, quad, op, digest, sigma, sgrid, ev, float(dyn["beta"]), cache_dir)


def _spec(s: Setup, delta_tilde=None, eps=None, periodic=True):
    b = s.cfg["boundary"]
    return make_boundary_spec(
        s.state,
        s.vgrid,
        s.sgrid,
        b["delta_tilde"] if delta_tilde is None else delta_tilde,
        b["eps"] if eps is None else eps,
        beta=s.beta,
        period=b["period"] if periodic else None,
        amp=b["amp"],
    )


def slab_profile(s: Setup, delta_tilde=None):
    spec = _spec(s, delta_tilde=delta_tilde, periodic=False)
    return solve_slab_stationary(
        spec.a0, s.op, s.quad, s.sgrid, s.vgrid, beta=s.beta, delta_tilde=spec.delta_tilde, tol=s.cfg["solver"]["slab_tol"]
    )


def problem(s: Setup, periodic: bool, delta=None, gamma_dtype=None, profile=None):
    spec = _spec(s, delta_tilde=delta, eps=delta, periodic=periodic)
    prof = profile if profile is not None else slab_profile(s, spec.delta_tilde)
    dtype = gamma_dtype or s.cfg["solver"]["gamma_dtype"]
    return build_problem(s.ev, s.quad, spec, prof, beta=s.beta, gamma_dtype=dtype), prof


def _snapshots(out: Path, name: str, samples: list, s: Setup, t0: float = 0.0, every: int = 1):
    if every <= 0:
        return []
    d = out / "snapshots"
    d.mkdir(exist_ok=True)
    paths = []
    for k in range(0, len(samples), every):
        p, _ = io.write_snapshot(d / f"{name}_{k:05d}", samples[k], s.sgrid, s.vgrid, time=t0 + k * s.ev.dt)
        paths.append(p.name)
    return paths


# --------------------------------------------------------------------------- slab

def run_slab(s: Setup, out: Path) -> dict:
    prof = slab_profile(s)
    env = prof.envelope(s.vgrid)
    io.write_csv(out / "slab_profile.csv", ["x1", "envelope_beta", "bound"], [
        (x, e, prof.delta_tilde * prof.M0 * math.exp(-prof.gamma0 * x)) for x, e in zip(prof.x, env)
    ])
    io.write_csv(out / "moments.csv", ["x1", "rho", "m1", "m2", "m3", "energy"], io.moment_profiles(prof.values, prof.x, s.state, s.vgrid))
    io.write_snapshot(out / "slab_profile", prof.values[:, None, None, :], s.sgrid, s.vgrid, rep="plain")
    rep = {
        "delta_tilde": prof.delta_tilde,
        "iterations": prof.iterations,
        "history": prof.history,
        "gamma0": prof.gamma0,
        "fit": prof.fit.as_dict(),
        "M0": prof.M0,
        "bound_holds": prof.bound_holds(s.vgrid),
        "slowest_mode_rate": prof.slowest_rate,
        "setup": s.describe(),
    }
    io.write_json(out / "slab_report.json", rep)
    return rep


# --------------------------------------------------------------------------- global

def _global_one(s: Setup, delta: float, horizon: float) -> tuple:
    prob, prof = problem(s, True, delta=delta, gamma_dtype="float64")
    g0 = perturbation_family(prob, 1, delta)[0]
    tol = s.cfg["solver"]["picard_tol"]
    traj, st = solve_time_global(prob, g0, horizon, tol=tol, max_iter=s.cfg["solver"]["max_iter"])
    cf = contraction_factor(prob, g0, horizon, scale=1e-3 * delta, base=traj, iters=3, seed=s.cfg["seed"])
    rec = {
        "delta": delta,
        "boundary_delta": prob.delta,
        "g0_bracket": bracket(g0, s.sgrid, s.vgrid, s.beta),
        "contraction_factor": cf,
        "ratio_vs_factor": (max(st.ratios[1:]) / cf) if len(st.ratios) > 1 and cf > 0 else None,
        "tol": tol,
        **st.as_dict(),
    }
    return rec, traj, st


def eta_builder(s: Setup):
    def build(d):
        prob, _ = problem(s, True, delta=d, gamma_dtype="float64")
        return prob, perturbation_family(prob, 1, d)[0]

    return build


def run_global(s: Setup, out: Path, calibrate: bool = True) -> dict:
    sol = s.cfg["solver"]
    horizon = sol["horizon"]
    eta = sol["eta"]
    cal = None
    if eta is None and calibrate:
        cal = calibrate_eta(eta_builder(s), s.period / 4.0, lo=1e-4, hi=1e2, steps=4, iters=2)
        eta = cal["eta"]
    sweep = [d for d in sol["delta_sweep"] if eta is None or d <= eta]
    records, rows = [], []
    traj = None
    for d in sweep:
        rec, tr, st = _global_one(s, d, horizon)
        records.append(rec)
        for k, diff in enumerate(st.diffs):
            rows.append((d, k + 1, diff, st.ratios[k - 1] if k >= 1 else float("nan")))
        if traj is None:
            traj = tr
    io.write_csv(out / "picard.csv", ["delta", "iteration", "diff", "ratio"], rows)
    _snapshots(out, "global", traj or [], s, every=s.cfg["snapshot_every"])
    Cs = [r["bound_constant"] for r in records]
    rep = {
        "horizon": horizon,
        "eta": eta,
        "calibration": cal,
        "runs": records,
        "bound_constant_spread": (max(Cs) / min(Cs)) if Cs else None,
        "setup": s.describe(),
    }
    io.write_json(out / "global_report.json", rep)
    return rep


# --------------------------------------------------------------------------- periodic / stationary

def periodic_orbit(s: Setup, periodic: bool = True, prob=None):
    if prob is None:
        prob, _ = problem(s, periodic)
    sol = s.cfg["solver"]
    orbit = extract_periodic(prob, s.period, k_max=sol["k_max"], tol=sol["periodic_tol"])
    return prob, orbit


def _cauchy_report(orbit) -> dict:
    fits = {}
    for skip in (0, 1, 2):
        if len(orbit.cauchy) - skip >= 3:
            f = orbit.cauchy_fit(skip)
            fits[str(skip)] = {"kappa_hat": 2.0 * f.rate, **f.as_dict()}
    return fits


def run_periodic(s: Setup, out: Path) -> dict:
    prob, orbit = periodic_orbit(s, True)
    io.write_csv(out / "cauchy.csv", ["k", "norm"], [(k, c) for k, c in enumerate(orbit.cauchy)])
    _snapshots(out, "orbit", orbit.samples, s, t0=orbit.t_start, every=s.cfg["snapshot_every"])
    mism = orbit.endpoint_mismatch(s.sgrid, s.vgrid, s.beta)
    rep = {
        "period": orbit.period,
        "converged": orbit.converged,
        "k_final": orbit.k_final,
        "cauchy": orbit.cauchy,
        "cauchy_fits": _cauchy_report(orbit),
        "scale": orbit.scale,
        "tol": orbit.tol,
        "endpoint_mismatch": mism,
        "relative_endpoint_mismatch": mism / orbit.scale if orbit.scale else 0.0,
        "orbit_residual": orbit_residual(prob, orbit),
        "setup": s.describe(),
    }
    io.write_json(out / "periodic_report.json", rep)
    return rep


def run_stationary(s: Setup, out: Path) -> dict:
    prob, _ = problem(s, False)
    sol = s.cfg["solver"]
    rep = verify_stationarity(prob, s.period, levels=sol["levels"], k_max=sol["k_max"], tol=sol["periodic_tol"])
    orbit = rep.pop("orbit")
    io.write_csv(out / "cauchy.csv", ["k", "norm"], [(k, c) for k, c in enumerate(orbit.cauchy)])
    _snapshots(out, "stationary", orbit.samples, s, t0=orbit.t_start, every=s.cfg["snapshot_every"])
    rep["cauchy_history"] = orbit.cauchy
    rep["cauchy_fits"] = _cauchy_report(orbit)
    rep["tol"] = orbit.tol
    rep["setup"] = s.describe()
    io.write_json(out / "stationary_report.json", rep)
    return rep


# --------------------------------------------------------------------------- stability

def run_stability(s: Setup, out: Path, prob=None, orbit=None) -> dict:
    st = s.cfg["stability"]
    if orbit is None:
        prob, orbit = periodic_orbit(s, True, prob)
    perts = perturbation_family(prob, st["count"], st["amplitude"])
    horizon = s.ev.dt * round(st["horizon"] / s.ev.dt)
    res = stability_experiment(prob, orbit, perts, horizon, window=(st["window_start"], None))
    header = ["t", "diff_L2", "diff_Linf_beta", "bracket"]
    io.write_csv(out / "stability.csv", header, res["series"][0])
    io.write_csv(out / "stability_all.csv", ["run"] + header, [(j,) + tuple(r) for j, rows in enumerate(res["series"]) for r in rows])
    series = res.pop("series")
    rep = {
        "horizon": horizon,
        "amplitude": st["amplitude"],
        "window_start": st["window_start"],
        **res,
        "kappa_hat": [2.0 * f["rate"] for f in res["fits"]],
        "samples": len(series[0]),
        "setup": s.describe(),
    }
    io.write_json(out / "stability_report.json", rep)
    return rep


# --------------------------------------------------------------------------- evolve

def wall_bump(s: Setup) -> DistributionField:
    """Smooth near-wall datum with zero inflow trace for the linear decay runs."""
    x = s.sgrid.x
    xi = s.vgrid.nodes
    prof = np.exp(-(((x - 2.0) / 1.5) ** 2))
    v = s.vgrid.bracket(-s.beta) * np.exp(-np.sum((xi - s.state.u) ** 2, axis=1) / (4.0 * s.state.T_inf))
    vals = prof[:, None, None, None] * v * (1.0 + 0.5 * np.cos(xi[:, 0]))
    vals = np.broadcast_to(vals, s.sgrid.shape + (s.vgrid.size,)).copy()
    vals[0, ..., xi[:, 0] > 0] = 0.0
    return DistributionField(vals / bracket(vals, s.sgrid, s.vgrid, s.beta))


def linear_decay(s: Setup, t_final: float, window_start: float, dt: float | None = None) -> dict:
    ev = s.ev if dt is None else LinearEvolver(s.op, s.sgrid, s.vgrid, s.sigma, dt=dt)
    t = ev.dt * round(t_final / ev.dt)
    every = max(1, round(0.25 / ev.dt))
    r = weighted_decay_check(wall_bump(s), t, ev, beta=s.beta, window=(window_start, None), every=every)
    r["dt"] = ev.dt
    return r


def run_evolve(s: Setup, out: Path, t_final=None, dt=None, snapshot_every=None, series_order=None) -> dict:
    e = s.cfg["evolve"]
    t_final = e["t_final"] if t_final is None else t_final
    dt = e["dt"] if dt is None else dt
    series_order = e["series_order"] if series_order is None else series_order
    every_snap = s.cfg["snapshot_every"] if snapshot_every is None else snapshot_every
    ev = s.ev if dt is None else LinearEvolver(s.op, s.sgrid, s.vgrid, s.sigma, dt=dt)
    n = round(t_final / ev.dt)
    t_final = n * ev.dt
    h0 = wall_bump(s)
    traj = evolve_linear(h0, t_final, ev)
    rows = []
    for f in traj:
        l2, lb = l2_norm(f.values, s.sgrid, s.vgrid), linf_beta(f.values, s.vgrid, s.beta)
        rows.append((f.time, l2, lb, l2 + lb))
    io.write_csv(out / "norms.csv", ["t", "L2", "Linf_beta", "bracket_norm"], rows)
    if every_snap:
        d = out / "snapshots"
        d.mkdir(exist_ok=True)
        for k in range(0, len(traj), every_snap):
            io.write_snapshot(d / f"evolve_{k:05d}", traj[k].values, s.sgrid, s.vgrid, time=traj[k].time)
    ts = np.array([r[0] for r in rows])
    start = e["window_start"] if t_final >= 2.0 * e["window_start"] else 0.0
    fit = decay_fit(ts, [r[1] for r in rows], (start, None), min_samples=3)
    rep = {"t_final": t_final, "dt": ev.dt, "steps": n, "fit_L2": fit.as_dict(), "setup": s.describe()}
    if series_order:
        ts_ = ev.dt * max(1, round((1.0 / float(np.max(s.op.nu))) / ev.dt))
        total, terms = duhamel_series(h0, ts_, int(series_order), ev, beta=s.beta)
        ref = evolve_linear(h0, ts_, ev)[-1].values
        rep["series"] = {
            "order": int(series_order),
            "t": ts_,
            "terms": terms,
            "relative_error": float(np.linalg.norm(total - ref) / np.linalg.norm(ref)),
        }
    io.write_json(out / "evolve_report.json", rep)
    return rep


# --------------------------------------------------------------------------- constants

def operator_constants(cfg: dict, cache_dir=None, rebuild: bool = False) -> dict:
    """Spectral and kernel constants on the operator-check velocity grid."""
    state = io.state_from_config(cfg)
    vg = cfg["velocity_grid"]
    grid = build_grid(vg["n_per_axis"], _cutoff(cfg, state))
    quad, op, digest = io.cached_operator(state, grid, cache_dir, vg["sphere_degree"], rebuild)
    spec = spectral_report(op)
    _, aev = a_matrix(state, grid, op.basis)
    kb = kernel_bound_check(op)
    beta = cfg["dynamics"]["beta"]
    refine = (1.25,) if (vg["n_per_axis"] * 5) % 4 == 0 else ()
    ke = kernel_estimates(
        op,
        refine=refine,
        sphere_degree=vg["sphere_degree"],
        assemble=lambda st, g: io.cached_operator(st, g, cache_dir, vg["sphere_degree"], rebuild)[1],
    )
    return {
        "grid": {"n_per_axis": grid.per_axis_count, "cutoff": grid.cutoff, "hash": grid.digest(), "operator_hash": digest},
        "spectral": spec,
        "A_eigenvalues": aev,
        "nu0": op.nu0(),
        "nu1": coercivity_constant(op),
        "nu2": float(-np.max(aev)),
        "k0": kb["k0"],
        "k1": kb["k1"],
        "kernel_fit": kb,
        "k5": p_xi1_bound(state, grid, op.basis, seed=cfg["seed"]),
        "k3": gamma_constant(quad, op, beta, seed=cfg["seed"]),
        "kernel_estimates": ke.as_dict(),
        "asymmetry": op.asymmetry,
    }


def constants_report(cfg: dict, cache_dir=None, rebuild: bool = False, setup: Setup | None = None) -> dict:
    """Every fitted constant with the experiment it came from."""
    oc = operator_constants(cfg, cache_dir, rebuild)
    s = setup or build_setup(cfg, cache_dir, rebuild)
    ev = cfg["evolve"]
    dec = linear_decay(s, ev["t_final"], ev["window_start"])
    prof = slab_profile(s)
    kappa = dec["fit_L2"]["rate"]
    nu0_dyn = s.op.nu0()
    og = f"{oc['grid']['n_per_axis']}^3 operator grid"
    dg = f"{s.vgrid.per_axis_count}^3 dynamics grid"

    def c(v, src):
        return {"value": v, "provenance": src}

    consts = {
        "nu0": c(oc["nu0"], f"min/max of nu/<xi> on the {og}"),
        "nu0_dynamics": c(nu0_dyn, f"min/max of nu/<xi> on the {dg}"),
        "nu1": c(oc["nu1"], f"generalized eigenproblem on the complement of N, {og}"),
        "nu2": c(oc["nu2"], f"minus the largest eigenvalue of A = P xi1 P, {og}"),
        "k0": c(oc["k0"], f"kernel envelope fit, {og}"),
        "k1": c(oc["k1"], f"kernel envelope fit, {og}"),
        "k5": c(oc["k5"], f"power iteration for ||P xi1||, {og}"),
        "k3": c(oc["k3"], f"randomized Gamma bound with seed {cfg['seed']}, {og}"),
        "kappa_hat": c(kappa, f"L2 decay fit of S(t) on t >= {ev['window_start']}, {dg}"),
        "kappa_hat_weighted": c(dec["fit_Linf_beta"]["rate"], f"weighted sup decay fit of S(t), {dg}"),
        "gamma0_hat": c(prof.gamma0, f"tail fit of the slab profile, delta~ = {prof.delta_tilde}, {dg}"),
        "M0_hat": c(prof.M0, "smallest constant making the slab profile bound hold"),
        "A_pq": c(oc["kernel_estimates"]["A_pq"], f"kernel quadrature at (p, q) = ({oc['kernel_estimates']['p']}, {oc['kernel_estimates']['q']}), {og}"),
    }
    positive = {k: v["value"] > 0 for k, v in consts.items()}
    checks = {
        "all_positive": all(positive.values()),
        "spectral_zero_count": oc["spectral"]["n_zero"] == 5,
        "kappa_le_nu0_half": kappa <= 0.5 * nu0_dyn * 1.1,
        "kappa_fit_r2": dec["fit_L2"]["r2"],
        "gamma0_fit_r2": prof.fit.r2,
        "slab_bound_holds": prof.bound_holds(s.vgrid),
        "A_saturation": oc["kernel_estimates"]["saturation"],
    }
    return {
        "constants": consts,
        "checks": checks,
        "operator": oc,
        "linear_decay": {k: v for k, v in dec.items() if k not in ("t", "L2", "Linf_beta")},
        "setup": s.describe(),
        "config_hash": io.config_hash(cfg),
        "config": cfg,
    }


def run_verify_all(s: Setup | None, cfg: dict, out: Path, cache_dir=None, rebuild: bool = False) -> dict:
    rep = constants_report(cfg, cache_dir, rebuild, setup=s)
    io.write_json(out / "constants_report.json", rep)
    return rep
