"""Command-line front end.

    phasegate run --experiment rb --seed 7 --out runs/rb7
    phasegate run --config my.toml --set gate.f_khz=52 --set fringe.shots=20
    phasegate run --config runs/rb7/rb.manifest.json      # replay a run
    phasegate verify
"""

from __future__ import annotations

import hashlib
import json
import math
import sys
import traceback
from pathlib import Path

import click
import numpy as np

from . import __version__
from . import config as C
from . import experiments as ex
from .analysis import fit_gaussians, fit_rb, fit_sinusoid


def _pattern_targets(cfg: dict):
    from .lattice import read_pattern

    path = cfg["pattern"]["file"]
    if not path:
        return None, b""
    data = read_pattern(path)
    return data["targets"], Path(path).read_bytes()


def _fringe_report(records, cfg) -> dict:
    out = {}
    a = cfg["analysis"]
    for cls in ("target", "line", "spectator", "nontarget"):
        rs = [r for r in records if r.cls == cls and r.n_atoms > 0]
        if len({round(r.alpha, 12) for r in rs}) < 5:
            continue
        fit = fit_sinusoid([r.alpha for r in rs], [r.mean_p1 for r in rs], a["norm_max"], a["norm_min"])
        out[cls] = {"n": fit.n, "theta": fit.theta, "phi": fit.phi, "contrast": fit.contrast,
                    "residual": fit.residual, "flagged": fit.flagged}
    return out


def _rb_report(records, cfg, seed) -> dict:
    out = {}
    for cls in sorted({r.cls for r in records}):
        rs = [r for r in records if r.cls == cls]
        if len(rs) < 3:
            continue
        f = fit_rb(rs, n_boot=cfg["analysis"]["bootstrap"], seed=seed)
        out[cls] = {"E2": f.E2, "E2_sigma": f.E2_sigma, "E2_ci": list(f.E2_ci), "d_if": f.d_if,
                    "d_if_sigma": f.d_if_sigma, "d_if_ci": list(f.d_if_ci), "flagged": f.flagged}
    return out


def execute(cfg: dict):
    """Run the configured experiment.

    Returns (records, report dict, extra text files {suffix: text}, input bytes).
    """
    setup = C.setup_of(cfg)
    name = cfg["run"]["experiment"]
    seed = cfg["run"]["seed"]
    extra: dict = {}
    report: dict = {}
    inputs = b""
    if name == "fringe":
        c = cfg["fringe"]
        alphas = np.arange(c["alpha_points"]) * (2 * math.pi / c["alpha_points"])
        recs = ex.run_fringe(setup, c["theta_rad"], n_targets=c["n_targets"], alphas=alphas, shots=c["shots"])
        report = {"fits": _fringe_report(recs, cfg)}
        extra[".dat"] = ex.to_dat(recs, "alpha", "mean_p1")
    elif name == "rb":
        c = cfg["rb"]
        rb = ex.RBConfig(tuple(c["lengths"]), c["cg_randomizations"], c["pg_randomizations"],
                         c["pg_randomizations_nontarget"], c["shots"], tuple(tuple(t) for t in c["targets"]))
        recs = ex.run_rb(setup, rb, classes=tuple(c["classes"]))
        report = {"fits": _rb_report(recs, cfg, seed)}
        extra[".dat"] = ex.to_dat(recs, "length", "mean_p1")
    elif name == "robustness":
        c = cfg["robustness"]
        fracs = np.linspace(c["frac_min"], c["frac_max"], c["points"])
        recs = ex.run_robustness(setup, fracs, c["theta_rad"], c["shots"], vary=c["vary"],
                                 p_max=cfg["analysis"]["norm_max"], p_min=cfg["analysis"]["norm_min"])
        extra[".dat"] = ex.to_dat(recs, "frac", "f2", group="")
    elif name == "spectrum":
        c = cfg["spectrum"]
        det = np.arange(c["min_khz"], c["max_khz"] + c["step_khz"] / 2, c["step_khz"]) * 1e3
        recs = ex.run_spectrum(setup, det, c["probe_us"] * 1e-6, c["shots"])
        try:
            peaks = fit_gaussians(det, {cls: np.array([r.transfer for r in recs if r.cls == cls])
                                        for cls in ("spectator", "line", "cross")})
            report = {"peaks": {k: (v.__dict__ if hasattr(v, "__dict__") else v) for k, v in peaks.items()}}
        except (RuntimeError, ValueError, TypeError) as exc:  # too few points or no peak
            report = {"peaks": None, "fit_error": str(exc)}
        extra[".dat"] = ex.to_dat(recs, "detuning", "transfer")
    elif name == "phase-curve":
        c = cfg["phase_curve"]
        g = setup.compile
        grid = ex.default_delta_grid(g.f, g.k, c["step_khz"] * 1e3, c["guard_khz"] * 1e3)
        recs = ex.run_phase_curve(setup, grid, c["theta_rad"])
        report = {"extrema_khz": [r.delta / 1e3 for r in recs if r.extremum]}
        extra[".dat"] = ex.to_dat(recs, "delta", "phase", group="segment")
    elif name == "pattern":
        c = cfg["pattern"]
        targets, inputs = _pattern_targets(cfg)
        recs = ex.run_pattern(setup, targets, c["theta_rad"], c["shots"])
        t = [r.fraction for r in recs if r.target and r.occupied_shots]
        n = [r.fraction for r in recs if not r.target and r.occupied_shots]
        report = {"target_fraction": float(np.mean(t)) if t else None,
                  "nontarget_fraction": float(np.mean(n)) if n else None}
    elif name == "echo-stress":
        c = cfg["echo_stress"]
        errs = np.linspace(-c["rabi_error_max"], c["rabi_error_max"], c["points"])
        recs = ex.run_echo_stress(c["n_pulses"], errs, tuple(c["schemes"]), setup.noise.inhom_broadening,
                                  c["spacing_us"] * 1e-6)
        extra[".dat"] = ex.to_dat(recs, "rabi_error", "contrast", group="scheme")
    elif name == "budget":
        c = cfg["budget"]
        measured = None
        if c["measure"]:
            m = ex.measure_target_error(setup, ex.RBConfig(tuple(cfg["rb"]["lengths"]),
                                                           shots_per_point=cfg["rb"]["shots"]))
            measured = {"target": m.Et}
            report["measured"] = m.__dict__
        budget, mc = ex.run_budget(setup, c["theta_rad"], measured, c["mc_shots"])
        recs = [ex.BudgetRecord(r, cls, v) for r, row in budget.rows.items() for cls, v in row.items()
                if v is not None]
        if mc:
            report["monte_carlo"] = mc
        extra[".txt"] = budget.table()
        extra[".table.csv"] = budget.to_csv()
    else:  # validated earlier
        raise C.ConfigError(f"unknown experiment {name!r}")
    return recs, report, extra, inputs


def write_run(cfg: dict, out: Path) -> dict:
    """Run and write CSV, report, extra files and the manifest; returns the manifest."""
    name = cfg["run"]["experiment"]
    out.mkdir(parents=True, exist_ok=True)
    stem = out / name
    manifest = {"experiment": name, "seed": cfg["run"]["seed"], "version": __version__, "config": cfg,
                "status": "running", "outputs": {}}
    try:
        recs, report, extra, inputs = execute(cfg)
    except Exception as exc:  # numerical failure: flag and keep what exists
        manifest.update(status="failed", error=f"{type(exc).__name__}: {exc}",
                        input_hash=C.config_hash(cfg))
        (out / f"{name}.manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        raise
    files = {".csv": ex.to_csv(recs)}
    if report:
        files[".report.json"] = json.dumps(report, indent=1, sort_keys=True, default=_jsonable) + "\n"
    files.update(extra)
    for suffix, text in files.items():
        p = Path(str(stem) + suffix)
        p.write_text(text)
        manifest["outputs"][p.name] = hashlib.sha256(text.encode()).hexdigest()
    manifest.update(status="ok", input_hash=C.config_hash(cfg, inputs))
    (out / f"{name}.manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    return str(o)


@click.group()
@click.version_option(__version__)
def main():
    """Targeted single-qubit phase gates in a 3D lattice: simulation and analysis."""


@main.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help=f"TOML config or run manifest (default: ${C.ENV_VAR}, then built-in defaults).")
@click.option("--experiment", type=click.Choice(C.EXPERIMENTS), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--workers", type=int, default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")
@click.option("--set", "overrides", multiple=True, metavar="BLOCK.KEY=VALUE", help="Override a config value.")
def run(config_path, experiment, seed, workers, out, overrides):
    """Run one experiment and write CSV, report and manifest."""
    try:
        cfg = C.load(config_path, overrides)
        cfg = C.with_run(cfg, experiment=experiment, seed=seed, workers=workers, out=out)
    except (C.ConfigError, OSError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    try:
        manifest = write_run(cfg, Path(cfg["run"]["out"]))
    except Exception as exc:
        click.echo(f"run failed: {type(exc).__name__}: {exc}", err=True)
        if "--debug" in sys.argv:
            traceback.print_exc()
        sys.exit(3)
    for name in manifest["outputs"]:
        click.echo(str(Path(cfg["run"]["out"]) / name))
    txt = Path(cfg["run"]["out"]) / f"{cfg['run']['experiment']}.txt"
    if txt.exists():
        click.echo(txt.read_text(), nl=False)


@main.command()
@click.option("--tol", type=float, default=None, help="Integrator tolerance used by the cancellation check.")
@click.option("--only", multiple=True, help="Run only the named checks (repeatable).")
def verify(tol, only):
    """Fast acceptance subset on built-in defaults."""
    from .dynamics import INTEGRATOR_TOL
    from .verify import CHECKS, run_checks

    unknown = set(only) - set(CHECKS)
    if unknown:
        click.echo(f"unknown check(s): {', '.join(sorted(unknown))}; choose from {', '.join(CHECKS)}", err=True)
        sys.exit(2)
    results = run_checks(tol if tol is not None else INTEGRATOR_TOL, set(only) or None)
    for r in results:
        click.echo(r.line())
    sys.exit(0 if all(r.passed for r in results) else 1)


@main.command("show-config")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--set", "overrides", multiple=True)
def show_config(config_path, overrides):
    """Print the fully resolved config as JSON."""
    try:
        cfg = C.load(config_path, overrides)
    except (C.ConfigError, OSError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    click.echo(json.dumps(cfg, indent=1, sort_keys=True))


if __name__ == "__main__":
    main()
