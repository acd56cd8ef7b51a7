"""Command-line entry point: ``homlab [global flags] <subcommand> [options]``.

Every subcommand writes ``manifest.json`` (plus ``results.csv`` and plots
where meaningful) under ``--out`` and exits with 0 iff all its pass flags
are true. Input errors exit with 2.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .constitutive import ViscosityLaw
from .darcy import Forcing, darcy_reference
from .flowsolver import SolveConfig, StaggeredField, solve_stationary, write_checkpoint
from .geometry import GridSpec, HoleShape, PerforationSpec, SpecError, build_mask, save_mask, validate_spec
from .harness import (ExperimentConfig, RateFit, RateReport, fit_rate, manifest, plot_rates, results_csv,
                      run_sweep, strictly_decreasing, versions, write_outputs, _jsonable)
from .micro import PermeabilityTensor, build_corrector, corrector_norms, permeability
from .probes import (PROBE_COLUMNS, bogovskii_probe, cell_mask, korn_probe, poincare_probe, probe_csv)
from .stokes import SolverError

log = logging.getLogger("homlab")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SpecError(f"cannot read config {path}: {exc}") from exc


def _write_manifest(out: Path, payload: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "manifest.json"
    path.write_text(json.dumps(payload, indent=2, default=_jsonable))
    return path


def _finish(out: Path, command: str, cfg: dict, passes: dict, extra: dict, t0: float) -> int:
    ok = all(v for v in passes.values() if v is not None)
    _write_manifest(out, {"command": command, "config": cfg, "versions": versions(), "pass": passes,
                          "all_passed": ok, "runtime_seconds": time.perf_counter() - t0, **extra})
    for k, v in passes.items():
        print(f"{command}:{k}: {'PASS' if v else ('SKIP' if v is None else 'FAIL')}")
    return 0 if ok else 1


def _hole(cfg: dict, rho=None) -> HoleShape:
    if rho is not None:
        return HoleShape.ball(rho)
    return HoleShape.from_dict(cfg["hole"]) if "hole" in cfg else HoleShape.ball(1.0)


# --- subcommands ----------------------------------------------------------------------------

def cmd_perm(args, cfg, out) -> int:
    t0 = time.perf_counter()
    hole = _hole(cfg, args.rho)
    R_list = args.R or cfg.get("R_list", [16.0, 32.0])
    n = args.n or cfg.get("n", 48)
    k = args.cells_per_radius or cfg.get("cells_per_radius", 4)
    pt = permeability(hole, R_list, n, k)
    pt.save(out / "permeability.json")
    passes = {"spd": bool(pt.degenerate or pt.eigenvalues.min() > 0)}
    extra = {"permeability": pt.to_dict()}
    if hole.kind == "ball" and not pt.degenerate:
        ref = 6 * np.pi * hole.rho
        diag = np.diag(pt.m)
        off = pt.m - np.diag(diag)
        extra["ball_reference"] = ref
        passes["ball_within_10pct"] = bool(np.all(np.abs(diag - ref) <= 0.1 * ref))
        passes["off_diagonal_2pct"] = bool(np.abs(off).max() <= 0.02 * diag.min())
    print("M0 =\n" + np.array2string(pt.m, precision=6))
    return _finish(out, "perm", cfg, passes, extra, t0)


def cmd_corrector(args, cfg, out) -> int:
    t0 = time.perf_counter()
    alpha = cfg.get("alpha", 1.5)
    eps = cfg.get("epsilons", [0.25, 0.125, 0.0625])
    hole = _hole(cfg, args.rho)
    k = cfg.get("grid", {}).get("k", 4)
    q = args.q or cfg.get("q", 2.0)
    rows = []
    for e in eps:
        spec = PerforationSpec(e, alpha, hole)
        cf = build_corrector(spec, GridSpec.cells_per_radius(spec, k, window=(1, 1, 1), minimum=2))
        nm = corrector_norms(cf, q)
        scaled = e ** ((3 - alpha) / 2) * nm.grad_w
        rows.append({"epsilon": e, "w_minus_id": nm.w_minus_id, "grad_w": nm.grad_w, "scaled_grad_w": scaled,
                     "q_norm": nm.q_norm, "n": cf.grid.shape[0]})
        print(f"eps={e:g}  |W-Id|_{q:g}={nm.w_minus_id:.6g}  eps^((3-alpha)/2) |grad W|={scaled:.6g}")
    passes = {"w_minus_id_decreasing": strictly_decreasing([r["w_minus_id"] for r in rows]) if q < np.inf else None}
    extra = {"rows": rows}
    if q < np.inf and len(rows) > 1:
        fit = fit_rate(eps, [r["w_minus_id"] for r in rows])
        extra["w_minus_id_slope"] = fit.slope
        ratios = [a["scaled_grad_w"] / b["scaled_grad_w"] for a, b in zip(rows, rows[1:])]
        extra["grad_ratios"] = ratios
        passes["grad_ratio_in_band"] = bool(all(0.5 <= r <= 2.0 for r in ratios))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sweep", "epsilon", "metric", "value"])
    for r in rows:
        for key in ("w_minus_id", "grad_w", "scaled_grad_w", "q_norm"):
            w.writerow(["corrector", f"{r['epsilon']:.10g}", key, f"{r[key]:.12e}"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(buf.getvalue())
    return _finish(out, "corrector", cfg, passes, extra, t0)


def _single_case(cfg: dict):
    exp = ExperimentConfig.from_dict({"epsilons": [cfg.get("epsilon", 0.25)], **cfg})
    eps = cfg.get("epsilon", exp.epsilons[0])
    spec = exp.spec(eps)
    grid = exp.grid_for(spec) if "n" not in cfg else GridSpec(int(cfg["n"]), exp.forcing.reduced_window(
        spec.cells_per_axis) if exp.reduce_window else None)
    return exp, spec, grid


def cmd_solve(args, cfg, out) -> int:
    t0 = time.perf_counter()
    exp, spec, grid = _single_case(cfg)
    for msg in validate_spec(spec, grid):
        log.warning("%s", msg)
    mask = build_mask(spec, grid)
    save_mask(mask, out / "mask")
    every = args.checkpoint_every

    def checkpoint(label, k, u, p):
        if every and k % every == 0:
            write_checkpoint(StaggeredField.from_stacked(u, p, mask), out / f"checkpoint_{k:04d}",
                             {"iteration": k, "label": label})

    scfg = SolveConfig(exp.lam, exp.law, exp.forcing, tol=exp.tol, saddle=exp.saddle, callback=checkpoint)
    fld, diag = solve_stationary(spec, grid, scfg, mask)
    write_checkpoint(fld, out / "solution", {"iterations": diag.iterations, "lambda": exp.lam})
    passes = {"converged": diag.converged, "energy_identity": diag.energy_residual <= 1e-6}
    extra = {"diagnostics": {"iterations": diag.iterations, "residual_history": diag.residual_history,
                             "energy_residual": diag.energy_residual, "divergence": diag.divergence,
                             "bound_checks": diag.bound_checks}, "porosity": mask.porosity,
             "dims": list(mask.shape)}
    return _finish(out, "solve", cfg, passes, extra, t0)


def cmd_darcy(args, cfg, out) -> int:
    t0 = time.perf_counter()
    src = args.permeability or cfg.get("m0")
    if src is None:
        hole = _hole(cfg)
        m0 = 6 * np.pi * hole.rho * np.eye(3)
    elif isinstance(src, (dict,)):
        m0 = PermeabilityTensor.from_dict(src).m
    else:
        m0 = PermeabilityTensor.load(src).m
    law = ViscosityLaw.from_dict(cfg["law"]) if "law" in cfg else ViscosityLaw.newtonian(1.0)
    forcing = Forcing.from_dict(cfg.get("forcing", {"kind": "single-mode"}))
    N = args.N or cfg.get("N", 16)
    sol = darcy_reference(m0, law.eta0, forcing, N)
    out.mkdir(parents=True, exist_ok=True)
    head = {"N": N, "M0": np.asarray(m0).ravel().tolist(), "eta0": law.eta0, "forcing": forcing.to_dict(),
            "dtype": "<f8", "layout": "u (3,N,N,N) then p (N,N,N) at cell centres (j+1/2)/N"}
    (out / "darcy.json").write_text(json.dumps(head, indent=2))
    (out / "darcy.u.bin").write_bytes(np.asarray(sol.u, "<f8").tobytes())
    (out / "darcy.p.bin").write_bytes(np.asarray(sol.p, "<f8").tobytes())
    res = sol.residual(forcing.sample(N))
    passes = {"band_limited": sol.band_limited, "residual": max(res) <= 1e-10}
    return _finish(out, "darcy", cfg, passes, {"residual": list(res)}, t0)


def cmd_probe(args, cfg, out) -> int:
    t0 = time.perf_counter()
    alpha = cfg.get("alpha", 1.5)
    eps = cfg.get("epsilons", [0.25, 0.125])
    hole = _hole(cfg, args.rho if args.rho is not None else (None if "hole" in cfg else 0.25))
    kinds = ["poincare", "korn", "bogovskii"] if args.kind == "all" else [args.kind]
    reports = []
    for kind in kinds:
        if kind == "poincare":
            reports.append(poincare_probe(alpha, eps, hole, cfg.get("cells_per_radius", 4.0)))
        elif kind == "korn":
            reports.append(korn_probe(cell_mask(alpha, eps[0], hole, cfg.get("cells_per_radius", 4.0)),
                                      cfg.get("n_samples", 100), args.seed))
        else:
            reports.append(bogovskii_probe(alpha, eps, hole, cfg.get("bogovskii_cells_per_radius", 3.0),
                                           cfg.get("n_samples", 20), args.seed))
    out.mkdir(parents=True, exist_ok=True)
    (out / "probes.csv").write_text(probe_csv(reports))
    (out / "results.csv").write_text(probe_csv(reports))
    passes = {r.kind: bool(r.passed) for r in reports}
    return _finish(out, "probe", cfg, passes, {"probes": [r.to_dict() for r in reports],
                                              "columns": list(PROBE_COLUMNS)}, t0)


def cmd_sweep(args, cfg, out) -> int:
    t0 = time.perf_counter()
    exp = ExperimentConfig.from_dict(cfg)
    exp.workers = args.workers
    exp.seed = args.seed
    exp.out = str(out)
    report = run_sweep(exp, progress=lambda r: print(
        f"eps={r['epsilon']:g} n={r['n']} velocity_error={r['velocity_error']:.6e}"
        + (f" pressure_error={r['pressure_error']:.6e}" if "pressure_error" in r else "")))
    write_outputs(report, out, exp.name, {"runtime_seconds": time.perf_counter() - t0})
    for k, v in report.passes.items():
        print(f"sweep:{k}: {'PASS' if v else ('SKIP' if v is None else 'FAIL')}")
    if report.velocity_fit is not None:
        print(f"velocity slope {report.velocity_fit.slope:.4f} (predicted {report.predicted_velocity})")
    if report.pressure_fit is not None:
        print(f"pressure slope {report.pressure_fit.slope:.4f} (predicted {report.predicted_pressure})")
    if report.aborted:
        print(f"aborted: {report.aborted}", file=sys.stderr)
    return 0 if report.all_passed else 1


def cmd_report(args, cfg, out) -> int:
    """Re-render the plot and summary of an existing sweep directory."""
    data = json.loads((out / "manifest.json").read_text())
    if "rows" in data and "config" in data and data.get("rows") and "velocity_error" in data["rows"][0]:
        rows = data["rows"]
        eps = [r["epsilon"] for r in rows]
        vfit = fit_rate(eps, [r["velocity_error"] for r in rows]) if len(rows) > 1 else None
        pfit = (fit_rate(eps, [r["pressure_error"] for r in rows])
                if len(rows) > 1 and "pressure_error" in rows[0] else None)
        rep = RateReport(data["config"], rows, vfit, pfit, data.get("predicted_velocity_exponent"),
                         data.get("predicted_pressure_exponent"), data.get("pass", {}), data.get("degenerate", False),
                         data.get("aborted"), data.get("permeability", []))
        plot_rates(rep, out / "plots" / f"{data['config'].get('name', 'sweep')}.svg")
        (out / "results.csv").write_text(results_csv(rep, data["config"].get("name", "sweep")))
        for r in rows:
            print(f"eps={r['epsilon']:g} " + " ".join(f"{k}={r[k]:.6e}" for k in ("velocity_error", "pressure_error")
                                                     if k in r))
    passes = data.get("pass", {})
    for k, v in passes.items():
        print(f"report:{k}: {'PASS' if v else ('SKIP' if v is None else 'FAIL')}")
    ok = all(v for v in passes.values() if v is not None) and not data.get("aborted")
    return 0 if ok else 1


# --- parser -----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="homlab", description="Perforated-domain flow and Darcy-limit experiments.")
    ap.add_argument("--config", help="JSON configuration file")
    ap.add_argument("--out", default="out", help="output directory (default: out)")
    ap.add_argument("--workers", type=int, default=1, help="parallel eps cases in a sweep")
    ap.add_argument("--seed", type=int, default=0, help="seed for sampled probes")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("perm", help="permeability tensor of the model hole")
    p.add_argument("--rho", type=float, help="ball radius (overrides the config hole)")
    p.add_argument("--R", type=float, nargs="+", help="truncation radii in hole radii")
    p.add_argument("--n", type=int, help="cells per axis of each exterior solve")
    p.add_argument("--cells-per-radius", type=float)
    p.set_defaults(func=cmd_perm)

    p = sub.add_parser("corrector", help="corrector norms over an eps-sweep")
    p.add_argument("--rho", type=float)
    p.add_argument("--q", type=float, help="Lebesgue exponent (inf allowed)")
    p.set_defaults(func=cmd_corrector)

    p = sub.add_parser("solve", help="single stationary solve")
    p.add_argument("--checkpoint-every", type=int, default=0, help="write a checkpoint every k Picard iterations")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("darcy", help="spectral Darcy reference")
    p.add_argument("--permeability", help="permeability.json from `perm`")
    p.add_argument("--N", type=int)
    p.set_defaults(func=cmd_darcy)

    p = sub.add_parser("probe", help="Poincare, Korn and Bogovskii probes")
    p.add_argument("--kind", choices=("poincare", "korn", "bogovskii", "all"), default="all")
    p.add_argument("--rho", type=float)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("sweep", help="eps-sweep against the Darcy limit")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="re-render plots and summary from an output directory")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        cfg = _load_config(args.config)
        return args.func(args, cfg, out)
    except (SpecError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
