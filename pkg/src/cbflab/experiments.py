"""Scenario runners shared by the command line and the acceptance suite.

Every runner takes an :class:`ExperimentConfig` and returns a
:class:`ScenarioResult`; when an output directory is given it also writes
CSV/JSON/checkpoint artefacts there.  Runners never print.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attractor as att
from . import diagnostics as dg
from . import io as cio
from .config import ExperimentConfig, int_list, render_config
from .grid import (
    Grid,
    SpectralField,
    divergence,
    inner,
    lebesgue_norm,
    leray_project,
    random_field,
    shear_field,
    sobolev_norm,
    stokes_apply,
    stokes_spectrum,
    taylor_green,
)
from .integrators import BrownianPath, ForcingSpec, solve_adjoint, solve_cbf, solve_linearized, solve_stochastic
from .lagrangian import ParticleSet, advect_with_solver, continuity_experiment, separation_monitor
from .operators import (
    adjoint_linearized_B,
    bilinear_B,
    convection,
    damping_C,
    linearized_B,
    monotonicity_gap,
    trilinear_b,
)


@dataclass
class ScenarioResult:
    scenario: str
    ok: bool
    summary: dict
    failures: list = field(default_factory=list)


# --------------------------------------------------------------------------
# construction helpers


def make_initial(cfg: ExperimentConfig, rng: np.random.Generator) -> SpectralField:
    ini, g = cfg.initial, cfg.grid
    kind = ini["kind"]
    kmax = ini["kmax"] or None
    if kind == "taylor_green":
        return taylor_green(g, ini["amplitude"], ini["wavenumber"])
    if kind == "random":
        return random_field(g, rng, h_norm=ini["h_norm"], slope=ini["slope"], kmax=kmax)
    if kind == "shear":
        return shear_field(g, ini["amplitude"], ini["wavenumber"])
    if kind == "tg_random":
        return taylor_green(g, ini["amplitude"], ini["wavenumber"]) + random_field(
            g, rng, h_norm=ini["h_norm"], slope=ini["slope"], kmax=kmax
        )
    raise ValueError(f"unknown initial kind {kind!r}")


def make_forcing(cfg: ExperimentConfig) -> ForcingSpec:
    fo, g = cfg.forcing, cfg.grid
    if fo["kind"] == "zero":
        return ForcingSpec.zero()
    if fo["kind"] == "kolmogorov":
        return att.kolmogorov_forcing(g, fo["amplitude"], fo["wavenumber"])
    if fo["kind"] == "shear":
        return ForcingSpec.steady(shear_field(g, fo["amplitude"], fo["wavenumber"]))
    raise ValueError(f"unknown forcing kind {fo['kind']!r}")


def derived_constants(cfg: ExperimentConfig, M0: float | None = None) -> dict:
    dc = cfg.params.derived(cfg.grid)
    return {"lambda1": dc.lambda1, "vartheta": dc.vartheta, "M0": M0}


# --------------------------------------------------------------------------
# operator identity suite


def operator_identity_suite(
    grid: Grid,
    rng: np.random.Generator,
    n_fields: int = 200,
    rs=(1.0, 3.0, 3.5, 5.0),
) -> dict:
    """Largest relative defects of the structural identities over random fields."""
    anti = skew = enst = 0.0
    damp = {r: 0.0 for r in rs}
    mono = 0.0
    adj = 0.0
    div = 0.0
    for _ in range(n_fields):
        u, v, w = (random_field(grid, rng) for _ in range(3))
        b1, b2 = trilinear_b(u, v, w), trilinear_b(u, w, v)
        anti = max(anti, abs(b1 + b2) / max(abs(b1), abs(b2), 1e-300))
        Buv = bilinear_B(u, v)
        skew = max(skew, abs(inner(Buv, v)) / (sobolev_norm(Buv) * sobolev_norm(v)))
        if grid.d == 2:
            Bu, Au = convection(u), stokes_apply(u)
            enst = max(enst, abs(inner(Bu, Au)) / (sobolev_norm(Bu) * sobolev_norm(Au)))
        for r in rs:
            lhs = inner(damping_C(u, r), u)
            ref = lebesgue_norm(u, r + 1) ** (r + 1)
            damp[r] = max(damp[r], abs(lhs - ref) / ref)
        for r in (3.0, 5.0):
            l, r1, r2 = monotonicity_gap(u, v, r)
            scale = max(abs(l), 1e-300)
            mono = min(mono, (l - r1) / scale, (r1 - r2) / scale, r2 / scale)
        a = inner(adjoint_linearized_B(u, w), v)
        b = inner(w, linearized_B(u, v))
        adj = max(adj, abs(a - b) / max(abs(a), abs(b), 1e-300))
        div = max(div, float(np.max(np.abs(divergence(leray_project(u))))))
    return {
        "d": grid.d,
        "N": grid.N,
        "n_fields": n_fields,
        "antisymmetry": anti,
        "skew": skew,
        "enstrophy_2d": enst if grid.d == 2 else None,
        "damping_pairing": {str(r): v for r, v in damp.items()},
        "monotonicity_min_slack": mono,
        "adjoint": adj,
        "divergence": div,
    }


def identity_suite_passes(rep: dict) -> list[str]:
    fails = []
    if rep["antisymmetry"] > 1e-10:
        fails.append(f"antisymmetry {rep['antisymmetry']:.3e}")
    if rep["skew"] > 1e-10:
        fails.append(f"<B(u,v),v> {rep['skew']:.3e}")
    if rep["enstrophy_2d"] is not None and rep["enstrophy_2d"] > 1e-10:
        fails.append(f"(B(u),Au) {rep['enstrophy_2d']:.3e}")
    for r, v in rep["damping_pairing"].items():
        if v > 1e-8:
            fails.append(f"<C(u),u> r={r}: {v:.3e}")
    if rep["monotonicity_min_slack"] < -1e-10:
        fails.append(f"monotonicity slack {rep['monotonicity_min_slack']:.3e}")
    if rep["adjoint"] > 1e-10:
        fails.append(f"adjoint {rep['adjoint']:.3e}")
    if rep["divergence"] > 1e-10:
        fails.append(f"divergence {rep['divergence']:.3e}")
    return fails


# --------------------------------------------------------------------------
# scenarios


def _csv_comment(out: Path | None) -> str | None:
    return "manifest=manifest.json" if out is not None else None


def run_forward(cfg: ExperimentConfig, out: Path | None = None) -> ScenarioResult:
    rng = np.random.default_rng(cfg.seed)
    x = make_initial(cfg, rng)
    forcing = make_forcing(cfg)
    traj = solve_cbf(
        x, cfg.tg, cfg.params, forcing, stride=cfg.stride,
        max_halvings=cfg.max_halvings, unsafe_regime=cfg.unsafe_regime,
    )
    recs = dg.records_from_trajectory(traj)
    res = dg.energy_residual(traj)
    summary = {
        "H_initial": recs[0].H_norm,
        "H_final": recs[-1].H_norm,
        "energy_residual_max": float(np.max(np.abs(res))),
        "repair_max": traj.repair_max,
        "halvings": traj.halvings,
        "n_steps": cfg.tg.n_steps,
    }
    if out is not None:
        dg.write_records_csv(recs[:: cfg.stride] if cfg.stride > 1 else recs, out / "diagnostics.csv", _csv_comment(out))
        cio.write_checkpoint(out / "final.cbf", traj.final, cfg.params, traj.times[-1])
    return ScenarioResult("forward", True, summary)


def perturbed_pairs(cfg: ExperimentConfig, x: SpectralField, count: int) -> list:
    ex = cfg.experiment
    out = []
    for i in range(count):
        rng = np.random.default_rng([cfg.seed, 1000 + i])
        kmax = ex["perturbation_kmax"] or None
        dx = random_field(cfg.grid, rng, h_norm=ex["perturbation"], kmax=kmax)
        out.append((x, x + dx))
    return out


def run_buniq(cfg: ExperimentConfig, out: Path | None = None) -> ScenarioResult:
    rng = np.random.default_rng(cfg.seed)
    x = make_initial(cfg, rng)
    forcing = make_forcing(cfg)
    tol = cfg.experiment["tolerance"]
    pairs = perturbed_pairs(cfg, x, cfg.experiment["pairs"])
    per, fails = [], []
    first = None
    for i, (x1, x2) in enumerate(pairs):
        try:
            rep = dg.backward_uniqueness_experiment(x1, x2, cfg.tg, cfg.params, forcing, M0=cfg.M0)
        except dg.DegenerateSeparation as exc:
            fails.append(f"pair {i}: {exc}")
            per.append({"degenerate": True})
            continue
        s = rep.summary()
        per.append(s)
        if first is None:
            first = rep
        if not s["min_separation"] > 0:
            fails.append(f"pair {i}: separation vanished")
        if not math.isfinite(s["max_Lambda"]):
            fails.append(f"pair {i}: Lambda not finite")
        if s["max_discrepancy"] > tol:
            fails.append(f"pair {i}: log-rate discrepancy {s['max_discrepancy']:.3e} > {tol:g}")
    summary = {
        "pairs": per,
        "min_separation": min((p.get("min_separation", 0.0) for p in per), default=0.0),
        "max_discrepancy": max((p.get("max_discrepancy", math.inf) for p in per), default=math.inf),
        "Lambda_bound": max((p.get("Lambda_bound", math.nan) for p in per), default=math.nan),
        "tolerance": tol,
        "M0": first.M0 if first is not None else None,
    }
    if out is not None and first is not None:
        dg.write_records_csv(first.records[:: cfg.stride], out / "diagnostics.csv", _csv_comment(out))
    return ScenarioResult("backward-uniqueness", not fails, summary, fails)


def duality_errors(base, tg, params, grid: Grid, rng: np.random.Generator, count: int) -> list[float]:
    errs = []
    for _ in range(count):
        y, p = random_field(grid, rng), random_field(grid, rng)
        v = solve_linearized(base, y, tg, params)
        z = solve_adjoint(base, p, tg, params)
        errs.append(abs(inner(v.final, p) - inner(y, z.field(0))) / (sobolev_norm(y) * sobolev_norm(p)))
    return errs


def run_duality(cfg: ExperimentConfig, out: Path | None = None) -> ScenarioResult:
    rng = np.random.default_rng(cfg.seed)
    x = make_initial(cfg, rng)
    base = solve_cbf(x, cfg.tg, cfg.params, make_forcing(cfg), unsafe_regime=cfg.unsafe_regime)
    errs = duality_errors(base, cfg.tg, cfg.params, cfg.grid, rng, cfg.experiment["pairs"])
    tol = cfg.experiment["tolerance"]
    summary = {"errors": errs, "max_error": max(errs), "tolerance": tol}
    fails = [f"duality defect {max(errs):.3e} > {tol:g}"] if max(errs) > tol else []
    return ScenarioResult("duality-check", not fails, summary, fails)


def run_stochastic(cfg: ExperimentConfig, out: Path | None = None) -> ScenarioResult:
    rng = np.random.default_rng(cfg.seed)
    x = make_initial(cfg, rng)
    forcing = make_forcing(cfg)
    per, fails = [], []
    for i in range(cfg.experiment["paths"]):
        path = BrownianPath.sample(cfg.seed + i, cfg.tg, cfg.params.sigma)
        vtraj, utraj = solve_stochastic(
            x, cfg.tg, cfg.params, forcing, path, stride=cfg.stride,
            max_halvings=cfg.max_halvings, unsafe_regime=cfg.unsafe_regime,
        )
        eb = dg.stochastic_energy_bound(vtraj, path.z, cfg.params, forcing)
        per.append(
            {
                "seed": cfg.seed + i,
                "K_tilde": eb.K_tilde,
                "margin": eb.margin,
                "holds": eb.holds,
                "two_mu_gap_max": float(np.max(eb.two_mu_gap)),
                "u_H_final": sobolev_norm(utraj.final),
            }
        )
        if not eb.holds:
            fails.append(f"path seed {cfg.seed + i}: energy bound violated by {-eb.margin:.3e}")
        if i == 0 and out is not None:
            b = vtraj.budget
            recs = []
            for j in range(0, len(b["t"]), cfg.stride):
                recs.append(
                    dg.DiagnosticsRecord(
                        t=b["t"][j],
                        H_norm=math.sqrt(b["h2"][j]),
                        V_norm=math.sqrt(b["v2"][j]),
                        Lr1_norm=b["lr"][j] ** (1 / (cfg.params.r + 1)),
                    )
                )
            dg.write_records_csv(recs, out / "diagnostics.csv", _csv_comment(out))
            cio.write_checkpoint(out / "final_u.cbf", utraj.final, cfg.params, utraj.times[-1])
    summary = {"paths": per, "all_hold": not fails}
    return ScenarioResult("stochastic", not fails, summary, fails)


def _particles(cfg: ExperimentConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 7])
    P = max(1, cfg.experiment["particles"])
    return rng.uniform(0, cfg.grid.L, size=(P, cfg.grid.d))


def run_lagrangian(cfg: ExperimentConfig, out: Path | None = None) -> ScenarioResult:
    rng = np.random.default_rng(cfg.seed)
    x = make_initial(cfg, rng)
    X0 = _particles(cfg)
    partner = X0[:1] + cfg.experiment["pair_offset"] * np.eye(cfg.grid.d)[:1]
    ps = ParticleSet(np.vstack([X0, partner]), cfg.grid.L)
    tr, hs = advect_with_solver(ps, x, cfg.tg, cfg.params, make_forcing(cfg), unsafe_regime=cfg.unsafe_regime)
    rep = separation_monitor(tr.particle(0), tr.particle(len(X0)), tr.times, cfg.grid.L, hs, cfg.grid)
    summary = {
        "particles": len(X0),
        "separation_initial": float(rep.distance[0]),
        "separation_final": float(rep.distance[-1]),
        "C_rigorous": rep.C_rigorous,
        "C_fitted": rep.C_fitted,
        "bound_holds": rep.bound_holds,
        "merged": rep.merged_flag,
        "notes": rep.notes,
    }
    fails = [] if rep.bound_holds or rep.merged_flag else ["log-separation bound violated"]
    if out is not None:
        idx = np.arange(0, len(tr.times), cfg.stride)
        cio.write_trajectory_csv(out / "trajectory.csv", tr.times[idx], tr.ids, tr.positions[idx], _csv_comment(out))
    return ScenarioResult("lagrangian", not fails, summary, fails)


def run_continuity(cfg: ExperimentConfig, out: Path | None = None) -> ScenarioResult:
    rng = np.random.default_rng(cfg.seed)
    x = make_initial(cfg, rng)
    spec = stokes_spectrum(cfg.grid)
    ns = int_list(cfg.experiment["truncations"])
    xs = [att.project_Pn_Qn(x, n, spec)[0] for n in ns]
    rep = continuity_experiment(
        x, xs, _particles(cfg), cfg.tg, cfg.params, make_forcing(cfg), labels=ns, unsafe_regime=cfg.unsafe_regime
    )
    fails = [] if rep.monotone else ["deviations not monotone in n"]
    return ScenarioResult("continuity", rep.monotone, rep.to_json(), fails)


def run_attractor(cfg: ExperimentConfig, out: Path | None = None) -> ScenarioResult:
    ex = cfg.experiment
    forcing = make_forcing(cfg)
    sample = att.sample_attractor(
        cfg.grid,
        cfg.params,
        forcing,
        cfg.tg.dt,
        n_initial=ex["n_initial"],
        burn_in=ex["burn_in"] or None,
        n_snapshots=ex["n_snapshots"],
        spacing=ex["spacing"],
        seed=cfg.seed,
        initial_norm=cfg.initial["h_norm"],
        forcing_id=f"{cfg.forcing['kind']}(F={cfg.forcing['amplitude']}, m={cfg.forcing['wavenumber']})",
    )
    floor = 1e3 * dg.EPS * max(sobolev_norm(p) for p in sample.points)
    idx_pairs = att.sample_pairs(sample, floor)
    fails = []
    if not sample.stationary:
        fails.append(f"burn-in not stationary (drift {max(sample.drift):.3%})")
    summary = {
        "points": len(sample),
        "burn_in": sample.burn_in,
        "radius": sample.radius,
        "max_H": max(sobolev_norm(p) for p in sample.points),
        "drift": sample.drift,
        "stationary": sample.stationary,
        "pairs": len(idx_pairs),
    }
    if not idx_pairs:
        summary["note"] = "sample collapsed to a single state; no distinct pairs"
        return ScenarioResult("attractor", not fails, summary, fails)
    pairs = [(sample.points[i], sample.points[j]) for i, j in idx_pairs]
    rep = dg.log_lipschitz_ratios(pairs, M0=cfg.M0)
    spec = stokes_spectrum(cfg.grid)
    scales = []
    for n in int_list(ex["cutoffs"]):
        if n >= len(spec):
            continue
        sc = att.deviation_scale(rep, spec, n)
        kept = att.maximal_set_363(sample, n, spec)
        chk = att.check_deviation(sample, kept, n, sc, spec)
        scales.append({"n": n, "lambda_next": sc.lambda_next, "epsilon_n": sc.epsilon_n,
                       "half_bound_rigorous": sc.half_bound_rigorous, "kept": len(kept), **chk})
        if not chk["within_rigorous"]:
            fails.append(f"n={n}: Q_n deviation exceeds rigorous bound")
    if not rep.chain_holds:
        fails.append("log-Lipschitz chain not reproduced")
    wt = att.weyl_trend(spec)
    summary.update(
        {
            "log_lipschitz": {k: v for k, v in rep.to_json().items() if not k.startswith("per_pair")},
            "C0": att.fitted_C0(rep),
            "deviation": scales,
            "weyl": {"growth_exponent": wt["growth_exponent"], "expected_exponent": wt["expected_exponent"],
                     "eventually_decreasing": wt["eventually_decreasing"]},
        }
    )
    if out is not None:
        att.save_sample(sample, out / "sample", cfg.params,
                        {"C0": att.fitted_C0(rep), "M0": rep.M0, "epsilon_table": scales})
    return ScenarioResult("attractor", not fails, summary, fails)


def run_verify_operators(cfg: ExperimentConfig, out: Path | None = None) -> ScenarioResult:
    rng = np.random.default_rng(cfg.seed)
    reports, fails = [], []
    for d in (2, 3):
        g = Grid(d, cfg.grid.L, cfg.grid.N)
        rep = operator_identity_suite(g, rng, cfg.experiment["fields"])
        reports.append(rep)
        fails += [f"d={d}: {f}" for f in identity_suite_passes(rep)]
    return ScenarioResult("verify-operators", not fails, {"suites": reports}, fails)


RUNNERS = {
    "forward": run_forward,
    "backward-uniqueness": run_buniq,
    "duality-check": run_duality,
    "stochastic": run_stochastic,
    "lagrangian": run_lagrangian,
    "continuity": run_continuity,
    "attractor": run_attractor,
    "verify-operators": run_verify_operators,
}


def run(cfg: ExperimentConfig, out: Path | None = None) -> ScenarioResult:
    """Run the configured scenario; with ``out`` also write manifest and summary."""
    result = RUNNERS[cfg.scenario](cfg, out)
    if out is not None:
        M0 = cfg.M0
        if M0 is None and "log_lipschitz" in result.summary:
            M0 = result.summary["log_lipschitz"]["M0"]
        if M0 is None:
            M0 = result.summary.get("M0")
        cio.emit_manifest(
            out / "manifest.json",
            cfg.text if cfg.text else render_config(cfg.values),
            derived_constants(cfg, M0),
            {"ok": result.ok, "failures": result.failures},
            {"scenario": cfg.scenario, "seed": cfg.seed, "stride": cfg.stride,
             "dt": cfg.tg.dt, "N": cfg.grid.N, "resolved_config": render_config(cfg.values)},
        )
        cio.dump_json(out / "summary.json", result.summary)
    return result
