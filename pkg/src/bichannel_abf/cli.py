"""Command-line orchestration: validate, reference, solve, simulate, diagnose, spectral, report, run."""
from __future__ import annotations

import argparse
import glob
import math
import re
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import artifacts as io
from .config import ConfigError, RunConfig, load_config, preset
from .diagnostics import entropy_report, fit_decay_rate, fourier_amplitude
from .fokker_planck import (
    DensityField,
    coarsen,
    concentrated_initial,
    l1_distance,
    marginal_heat_residual,
    solver_for,
    tilted_stationary,
)
from .grid import Grid
from .model import H1_TOL, BiChannelSystem, estimate_constants, reference_free_energy, validate_h1
from .sde import SDEParams, run_sde, sample_density
from .spectral import H4Error, build_operator, lsi_estimate, optimal_alpha, rate_prediction, remark2_rate, spectral_gap

SUMSE_TOL = 1e-10
EC_TOL = 1e-12
MONOTONE_TOL = 1e-8
HEAT_RATE_TOL = 0.02
FISHER_RATE_TOL = 0.03
HEAT_RESIDUAL_TOL = 1e-10


# --------------------------------------------------------------------------- #
# Shared setup
# --------------------------------------------------------------------------- #


def identical_channels(system: BiChannelSystem, grid: Grid) -> bool:
    tab = system.tabulate(grid)
    return bool(np.abs(tab.V[0] - tab.V[1]).max() <= H1_TOL)


def remark2_regime(system: BiChannelSystem, grid: Grid) -> bool:
    """No excluded region, identical channels and a positive switching rate."""
    return system.exclusion.measure == 0.0 and system.lambda_rate > 0 and identical_channels(system, grid)


def initial_density(cfg: RunConfig, system: BiChannelSystem, grid: Grid) -> DensityField:
    ini = cfg["initial"]
    if ini["kind"] == "stationary":
        return solver_for(system, grid).stationary()
    if ini["kind"] == "cosine":
        amp, x0 = ini["amplitude"], ini["x0"]
        if not abs(amp) < 1:
            raise ConfigError("initial.amplitude must lie in (-1, 1) for a positive marginal")
        return tilted_stationary(system, grid, lambda x: 1.0 + amp * np.cos(2.0 * np.pi * (x - x0)))
    return concentrated_initial(system, grid, ini["x0"], ini["kappa"], ini["channel"])


def _clear(out: Path, pattern: str):
    for p in glob.glob(str(out / pattern)):
        Path(p).unlink()


# --------------------------------------------------------------------------- #
# Stages
# --------------------------------------------------------------------------- #


def stage_validate(cfg: RunConfig, out: Path) -> bool:
    system = cfg.system()
    grid = cfg.grid(system)
    viol = validate_h1(system, grid)
    io.write_csv(
        out / "violations.csv",
        ("message", "x", "y", "magnitude"),
        [(v.message, v.x, v.y, v.magnitude) for v in viol],
    )
    io.write_csv(
        out / "regime.csv",
        ("key", "value"),
        [("remark2", remark2_regime(system, grid)), ("exclusion_measure", system.exclusion.measure),
         ("lambda", system.lambda_rate), ("n_x", grid.n_x), ("n_y", grid.n_y), ("L", grid.L)],
    )
    return not viol


def stage_reference(cfg: RunConfig, out: Path):
    system = cfg.system()
    grid = cfg.grid(system)
    free = reference_free_energy(system, grid)
    io.write_columns(out / "free_energy.csv", ("x", "A", "A_prime"), free.x, free.energy, free.force)
    return free


def heat_tolerance(max_marginal: float, dt: float) -> float:
    """1e-10, or the rounding floor of a difference quotient (m(t+dt) - m(t))/dt if that is larger."""
    return max(HEAT_RESIDUAL_TOL, 10.0 * np.finfo(float).eps * max_marginal / dt)


ENTROPY_HEADER = ("t", "E", "E_M", "E_m", "E_c", "P", "F_macro", "bias_error", "mode1")


def stage_solve_pde(cfg: RunConfig, out: Path):
    system = cfg.system()
    grid = cfg.grid(system)
    solver = solver_for(system, grid)
    init = initial_density(cfg, system, grid)
    pde = cfg["pde"]
    for pat in ("psi_t*.csv", "bias_t*.csv", "marginal_t*.csv"):
        _clear(out, pat)
    stationary = solver.stationary()
    rows = []
    last = {}

    def on_record(t, f, bias):
        k = len(rows)
        rep = entropy_report(f, stationary, bias, solver.free.force, t)
        io.write_bias(out / f"bias_t{k}.csv", bias)
        io.write_marginal(out / f"marginal_t{k}.csv", grid.x, f.marginal())
        if pde["snapshots"] == "all":
            io.write_density(out / f"psi_t{k}.csv", f)
        last["k"], last["f"] = k, f
        rows.append(rep.as_row() + (fourier_amplitude(f.marginal()),))

    run = solver.run(
        init, pde["t_end"], pde["dt"], pde["record_every"], on_record=on_record, store=False,
        adaptive_bias=pde["adaptive_bias"],
    )
    if pde["snapshots"] == "final":
        io.write_density(out / f"psi_t{last['k']}.csv", last["f"])
    io.write_csv(out / "entropy.csv", ENTROPY_HEADER, rows)
    # the x-marginal follows the discrete heat equation only under the adaptive bias
    heat, heat_tol = math.nan, math.nan
    if pde["adaptive_bias"]:
        short = solver.run(init, 3 * run.dt, run.dt, 1, store=True)
        heat = float(marginal_heat_residual([f.marginal() for f in short.fields], run.dt, grid.dx).max())
        heat_tol = heat_tolerance(float(init.marginal().max()), run.dt)
    io.write_csv(
        out / "pde_run.csv",
        ("dt", "n_steps", "record_every", "n_records", "max_mass_drift", "min_density", "heat_residual",
         "heat_tolerance"),
        [(run.dt, run.n_steps, pde["record_every"], len(rows), run.max_mass_drift, run.min_density, heat, heat_tol)],
    )
    return run


def stage_simulate_sde(cfg: RunConfig, out: Path):
    system = cfg.system()
    grid = cfg.grid(system)
    s = cfg["sde"]
    init = initial_density(cfg, system, grid)
    params = SDEParams(
        N=s["N"], dt=s["dt"], t_end=s["t_end"], n_bins=s["n_bins"], n_min=s["n_min"], n_ramp=s["n_ramp"],
        seed=s["seed"], adaptive_bias=s["adaptive_bias"],
    )
    if grid.n_x % s["hist_nx"] or grid.n_y % s["hist_ny"]:
        raise ConfigError("sde.hist_nx and sde.hist_ny must divide the grid size")
    hist_grid = Grid(s["hist_nx"], s["hist_ny"], grid.L)
    ens = sample_density(init, s["N"], s["seed"])
    run = run_sde(system, params, ens, s["record_every"], hist_grid)
    for pat in ("bins_t*.csv", "hist_t*.csv"):
        _clear(out, pat)
    for k, (st, b, hst) in enumerate(zip(run.stats, run.biases, run.histograms)):
        io.write_columns(
            out / f"bins_t{k}.csv", ("bin", "x", "count", "force", "visited"),
            np.arange(st.n_bins), st.centers, st.counts, b.force if b.force.size == st.n_bins else np.zeros(st.n_bins),
            st.visited,
        )
    io.write_density(out / "hist_final.csv", run.histograms[-1])
    e = run.ensemble
    io.write_csv(
        out / "sde_summary.csv",
        ("t", "N", "occupancy0", "occupancy1", "switches", "n_steps"),
        [(e.t, e.size, float(np.mean(e.i == 0)), float(np.mean(e.i == 1)), int(e.switch_count.sum()), e.n_steps)],
    )
    rows = []
    if cfg.mode == "both":
        solver = solver_for(system, grid)
        pde_run = solver.run(init, s["t_end"], cfg["pde"]["dt"], 10**12, store=True, adaptive_bias=s["adaptive_bias"])
        pde_c = coarsen(pde_run.fields[-1], grid.n_x // hist_grid.n_x, grid.n_y // hist_grid.n_y)
        rows.append((e.t, l1_distance(run.histograms[-1], pde_c), int(s["adaptive_bias"])))
    io.write_csv(out / "sde_pde.csv", ("t", "l1", "adaptive_bias"), rows)
    return run


def _psi_index(p: str) -> int:
    return int(re.search(r"psi_t(\d+)\.csv$", p).group(1))


def stage_diagnose(cfg: RunConfig, out: Path):
    system = cfg.system()
    grid = cfg.grid(system)
    ent_path = out / "entropy.csv"
    if not ent_path.exists():
        files = sorted(glob.glob(str(out / "psi_t*.csv")), key=_psi_index)
        if not files:
            raise FileNotFoundError(f"no entropy.csv or psi_t*.csv snapshots in {out}")
        solver = solver_for(system, grid)
        st = solver.stationary()
        pr = io.read_table(out / "pde_run.csv")
        dt, every = pr["dt"][0], pr["record_every"][0]
        rows = []
        for p in files:
            f = io.read_density(p)
            t = min(_psi_index(p) * every, pr["n_steps"][0]) * dt
            rows.append(entropy_report(f, st, solver.bias(f), solver.free.force, t).as_row() + (fourier_amplitude(f.marginal()),))
        io.write_csv(ent_path, ENTROPY_HEADER, rows)
    ent = io.read_table(ent_path)
    d = cfg["diagnostics"]
    rows = []
    for q in ("E_m", "E", "E_c", "P", "F_macro", "mode1"):
        try:
            est = fit_decay_rate(ent["t"], ent[q], window=d["fit_fraction"], floor=d["floor"])
            rows.append((q, est.rate, est.t_start, est.t_end, est.r2, est.n_samples, "ok"))
        except ValueError as e:
            rows.append((q, math.nan, math.nan, math.nan, math.nan, 0, f"unfit: {e}"))
    io.write_csv(out / "rates.csv", ("quantity", "rate", "t_start", "t_end", "r2", "n_samples", "status"), rows)
    return rows


def stage_spectral(cfg: RunConfig, out: Path):
    system = cfg.system()
    grid = cfg.grid(system)
    gap = spectral_gap(build_operator(system, grid), k=4)
    io.write_csv(
        out / "spectral.csv", ("index", "eigenvalue"), [(n, v) for n, v in enumerate(gap.eigenvalues)]
    )
    lsi = lsi_estimate(system, grid)
    io.write_columns(
        out / "lsi.csv", ("x", "rho_poincare_0", "rho_poincare_1", "curvature_0", "curvature_1"),
        grid.x, lsi.poincare_map[0], lsi.poincare_map[1], lsi.curvature_map[0], lsi.curvature_map[1],
    )
    init = initial_density(cfg, system, grid)
    hyp = estimate_constants(system, grid, init.marginal(), rho=lsi.rho_for_rate, theta=gap.theta)
    hyp.rho_source = lsi.rho_source
    io.write_csv(
        out / "constants.csv",
        ("C", "M", "c", "M_tilde", "rho", "rho_source", "rho_poincare", "rho_lower", "R", "theta", "theta_min",
         "h1", "h2", "h3", "h4"),
        [(hyp.C, hyp.M, hyp.c, hyp.M_tilde, hyp.rho, hyp.rho_source, lsi.rho_poincare,
          math.nan if lsi.rho_lower is None else lsi.rho_lower, hyp.R, gap.theta, hyp.theta_min,
          hyp.h1, hyp.h2, hyp.h3, hyp.h4)],
    )
    sp = cfg["spectral"]
    r2 = remark2_rate(hyp.rho, system.lambda_rate) if remark2_regime(system, grid) else math.nan
    header = ("status", "rho", "C", "M", "c", "M_tilde", "R", "theta", "theta_min", "alpha", "lambda_plus",
              "lambda_minus", "rate_function", "epsilon", "em_rate", "remark2_rate")
    try:
        lam = rate_prediction(hyp).rate_function
        alpha = optimal_alpha(hyp.theta, hyp.rho, hyp.R, hyp.M_tilde, hyp.c) if sp["alpha"] == "optimal" else None
        pred = rate_prediction(hyp, epsilon=sp["epsilon_fraction"] * lam, alpha=alpha)
        row = pred.as_row()
        row["remark2_rate"] = r2
        io.write_csv(out / "prediction.csv", header, [("ok",) + tuple(row[k] for k in header[1:])])
    except H4Error as e:
        io.write_csv(
            out / "prediction.csv", header,
            [(f"h4-violated: {e}", hyp.rho, hyp.C, hyp.M, hyp.c, hyp.M_tilde, hyp.R, gap.theta, hyp.theta_min,
              hyp.M_tilde / hyp.c) + (math.nan,) * 5 + (r2,)],
        )
    return hyp, gap, lsi


# --------------------------------------------------------------------------- #
# Verdict
# --------------------------------------------------------------------------- #


@dataclass
class Check:
    name: str
    status: str  # pass | fail | skip
    value: float = math.nan
    threshold: float = math.nan
    detail: str = ""


@dataclass
class SummaryVerdict:
    measured_rate: float
    predicted_rate: float
    rate_kind: str
    bound_satisfied: Optional[bool]
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.status != "fail" for c in self.checks)

    def text(self) -> str:
        lines = [
            f"measured E_m rate : {self.measured_rate:.6g}",
            f"predicted rate    : {self.predicted_rate:.6g} ({self.rate_kind})",
            f"rate bound        : {'satisfied' if self.bound_satisfied else 'not satisfied' if self.bound_satisfied is False else 'n/a'}",
            "",
        ]
        for c in self.checks:
            lines.append(f"{c.status.upper():5s} {c.name:18s} value={c.value:.6g} threshold={c.threshold:.6g} {c.detail}")
        lines.append("")
        lines.append("VERDICT: " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines) + "\n"


def _one(path: Path) -> dict:
    rows = io.read_csv(path)
    return rows[0] if rows else {}


def build_verdict(out: Path, cfg: RunConfig) -> SummaryVerdict:
    """Recompute every check from the CSV artifacts in ``out``."""
    checks = []
    slack = cfg["spectral"]["slack"]
    regime = {r["key"]: r["value"] for r in io.read_csv(out / "regime.csv")} if (out / "regime.csv").exists() else {}
    is_r2 = regime.get("remark2") == "1"

    if (out / "violations.csv").exists():
        viol = io.read_csv(out / "violations.csv")
        tolerated = is_r2 and all("measure" in v["message"] for v in viol)
        status = "pass" if not viol or tolerated else "fail"
        detail = "identical channels exchanging everywhere" if viol and tolerated else f"{len(viol)} violation(s)"
        checks.append(Check("h1", status, float(len(viol)), 0.0, detail))

    measured, predicted, kind, bound_ok = math.nan, math.nan, "none", None
    if (out / "entropy.csv").exists():
        ent = io.read_table(out / "entropy.csv")
        res = np.abs(ent["E"] - ent["E_M"] - ent["E_m"])
        checks.append(Check("sum_E", "pass" if res.max() <= SUMSE_TOL else "fail", float(res.max()), SUMSE_TOL))
        gap = ent["E_c"] - ent["P"]
        checks.append(Check("E_c<=P", "pass" if gap.max() <= EC_TOL else "fail", float(gap.max()), EC_TOL))
        inc = np.diff(ent["E_M"]).max() if ent["E_M"].size > 1 else 0.0
        checks.append(Check("E_M_monotone", "pass" if inc <= MONOTONE_TOL else "fail", float(inc), MONOTONE_TOL))
        consts = _one(out / "constants.csv") if (out / "constants.csv").exists() else {}
        if consts and cfg["pde"]["adaptive_bias"]:
            R = float(consts["R"])
            excess = ent["bias_error"] - 2.0 * R * R * ent["E_m"]
            checks.append(
                Check("bias_bound", "pass" if excess.max() <= 1e-12 else "fail", float(excess.max()), 0.0,
                      f"R={R:.6g}")
            )
        rates = {r["quantity"]: r for r in io.read_csv(out / "rates.csv")} if (out / "rates.csv").exists() else {}
        pred = _one(out / "prediction.csv") if (out / "prediction.csv").exists() else {}
        em = rates.get("E_m")
        if em is not None and pred:
            if em["status"] != "ok":
                checks.append(Check("em_rate", "skip", detail=f"E_m not fitted ({em['status']})"))
            else:
                measured = float(em["rate"])
                if is_r2:
                    predicted, kind = float(pred["remark2_rate"]), "2 min(rho, 4 pi^2, lambda)"
                elif pred["status"] == "ok":
                    predicted, kind = float(pred["em_rate"]), "2 min(Lambda(theta) - eps, 4 pi^2)"
                if math.isnan(predicted):
                    kind = "unavailable"
                    checks.append(Check("em_rate", "fail", measured, math.nan, pred["status"]))
                else:
                    bound_ok = bool(measured >= slack * predicted)
                    checks.append(Check("em_rate", "pass" if bound_ok else "fail", measured, slack * predicted, kind))
        if cfg["initial"]["kind"] == "cosine" and rates:
            target = 4.0 * math.pi**2
            for q, tgt, tol in (("mode1", target, HEAT_RATE_TOL), ("F_macro", 2 * target, FISHER_RATE_TOL)):
                r = rates.get(q)
                if r is None or r["status"] != "ok":
                    checks.append(Check(f"heat_{q}", "fail", detail="not fitted"))
                    continue
                err = abs(float(r["rate"]) - tgt) / tgt
                checks.append(Check(f"heat_{q}", "pass" if err <= tol else "fail", float(r["rate"]), tgt,
                                    f"rel. error {err:.3g} (tol {tol})"))
    if (out / "pde_run.csv").exists():
        pr = _one(out / "pde_run.csv")
        drift = float(pr["max_mass_drift"])
        checks.append(Check("mass_drift", "pass" if drift <= 1e-12 else "fail", drift, 1e-12))
        mn = float(pr["min_density"])
        checks.append(Check("positivity", "pass" if mn >= -1e-12 else "fail", mn, -1e-12))
        hr = float(pr["heat_residual"])
        if not math.isnan(hr):
            tol = float(pr["heat_tolerance"])
            checks.append(Check("heat_residual", "pass" if hr <= tol else "fail", hr, tol))
    if (out / "sde_pde.csv").exists():
        rows = io.read_csv(out / "sde_pde.csv")
        tol = cfg["diagnostics"]["l1_tolerance"]
        for r in rows:
            l1 = float(r["l1"])
            checks.append(Check("sde_pde_l1", "pass" if l1 <= tol else "fail", l1, tol))
    return SummaryVerdict(measured, predicted, kind, bound_ok, checks)


def stage_report(cfg: RunConfig, out: Path) -> SummaryVerdict:
    v = build_verdict(out, cfg)
    io.write_csv(
        out / "summary.csv", ("check", "status", "value", "threshold", "detail"),
        [("measured_em_rate", "info", v.measured_rate, math.nan, ""),
         ("predicted_em_rate", "info", v.predicted_rate, math.nan, v.rate_kind)]
        + [(c.name, c.status, c.value, c.threshold, c.detail) for c in v.checks]
        + [("verdict", "pass" if v.passed else "fail", math.nan, math.nan, "")],
    )
    (out / "summary.txt").write_text(v.text())
    return v


def run_pipeline(cfg: RunConfig, out: Path) -> SummaryVerdict:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    for name in ("entropy.csv", "rates.csv", "sde_pde.csv", "pde_run.csv", "prediction.csv"):
        if (out / name).exists():
            (out / name).unlink()
    stage_validate(cfg, out)
    stage_reference(cfg, out)
    if cfg.mode in ("pde", "both"):
        stage_solve_pde(cfg, out)
        stage_diagnose(cfg, out)
    if cfg.mode in ("sde", "both"):
        stage_simulate_sde(cfg, out)
    stage_spectral(cfg, out)
    return stage_report(cfg, out)


# --------------------------------------------------------------------------- #
# Entry point
# --------------------------------------------------------------------------- #


def _load(args) -> RunConfig:
    cfg = preset(args.preset) if args.preset else None
    saved = Path(args.out) / "config.ini"
    if cfg is None and not args.config and args.command == "report" and saved.exists():
        # the verdict is rebuilt from the artifacts with the configuration that produced them
        return load_config(saved)
    if args.config:
        cfg = load_config(args.config, base=cfg)
    if cfg is None:
        cfg = preset("bichannel-default")
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be a 64-bit unsigned integer")
        cfg = cfg.with_overrides(**{"sde.seed": args.seed})
    return cfg


def _error_record(out: Path, stage: str, exc: BaseException):
    try:
        out.mkdir(parents=True, exist_ok=True)
        io.write_csv(out / "error.csv", ("stage", "type", "message"), [(stage, type(exc).__name__, str(exc))])
    except OSError:
        pass


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="bichannel-abf", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("validate", "reference", "solve-pde", "simulate-sde", "diagnose", "spectral", "report", "run"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI run configuration (applied on top of --preset)")
        p.add_argument("--preset", help="built-in scenario name")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, help="master seed for the particle simulation")
    args = ap.parse_args(argv)
    out = Path(args.out)
    try:
        cfg = _load(args)
        out.mkdir(parents=True, exist_ok=True)
        cmd = args.command
        if cmd == "validate":
            ok = stage_validate(cfg, out)
            for v in io.read_csv(out / "violations.csv"):
                print(f"violation: {v['message']} x={v['x']} y={v['y']} magnitude={v['magnitude']}")
            return 0 if ok else 1
        if cmd == "reference":
            stage_reference(cfg, out)
            return 0
        if cmd == "solve-pde":
            stage_solve_pde(cfg, out)
            return 0
        if cmd == "simulate-sde":
            stage_simulate_sde(cfg, out)
            return 0
        if cmd == "diagnose":
            stage_diagnose(cfg, out)
            return 0
        if cmd == "spectral":
            stage_spectral(cfg, out)
            print((out / "prediction.csv").read_text(), end="")
            return 0
        if cmd == "report":
            v = stage_report(cfg, out)
        else:
            v = run_pipeline(cfg, out)
        print(v.text(), end="")
        return 0 if v.passed else 1
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        _error_record(out, args.command, exc)
        print(f"error [{args.command}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        if not isinstance(exc, (ConfigError, ValueError, RuntimeError)):
            traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
