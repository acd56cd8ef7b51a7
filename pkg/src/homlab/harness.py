"""eps-sweeps against the Darcy limit: errors, fitted rates, predicted exponents and outputs."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from .constitutive import ViscosityLaw
from .darcy import Forcing, darcy_reference
from .flowsolver import (SolveConfig, StaggeredField, extend_by_zero, initial_state, leray_project,
                         solve_stationary, step_evolutionary)
from .geometry import GridSpec, HoleShape, PerforationSpec, build_mask
from .mac import AXES
from .micro import PermeabilityTensor, discrete_permeability, permeability
from .stokes import SolverError

log = logging.getLogger(__name__)

SLOPE_TOLERANCE = 0.3
LEDGER_TOLERANCE = 1e-8
SETTINGS = ("torus-stationary", "torus-evolutionary", "bounded-stationary", "bounded-evolutionary")


class RangeError(ValueError):
    """Parameters outside the range covered by a rate theorem."""


class FitError(ValueError):
    """Rate fit on invalid data."""


# --- predicted exponents ---------------------------------------------------------------

def _check_alpha(alpha: float, newtonian: bool, what: str):
    hi = 3.0 if newtonian else 1.5
    if not (1.0 < alpha < hi):
        kind = "Newtonian" if newtonian else "non-Newtonian"
        raise RangeError(f"alpha={alpha} outside ({1}, {hi:g}) required by the {what} for {kind} laws")


def predicted_exponent(alpha: float, newtonian: bool, setting: str = "torus-stationary") -> float:
    """Exponent of the squared L2 velocity error.

    Torus: ``min(alpha-1, 3-alpha, 2(3-2alpha))``; bounded domains replace
    ``3-alpha`` by ``(3-alpha)/2``. The last term is dropped for Newtonian
    laws. Evolutionary settings share the stationary exponent (the initial
    datum term is reported separately).
    """
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}")
    bounded = setting.startswith("bounded")
    _check_alpha(alpha, newtonian, ("bounded-domain" if bounded else "torus") + " velocity-rate theorem")
    terms = [alpha - 1.0, (3.0 - alpha) / 2.0 if bounded else 3.0 - alpha]
    if not newtonian:
        terms.append(2.0 * (3.0 - 2.0 * alpha))
    return float(min(terms))


def predicted_pressure_exponent(alpha: float, lam: float, r: float = 2.0, newtonian: bool = False,
                                margin: float = 0.01) -> float:
    """Exponent of the L1 error of the zero-extended pressure (stationary torus).

    ``min((alpha-1)/2, (3-alpha)/2, (lam-alpha)^-, (3-2alpha)^-, (3-2alpha)(r-2)/r 1_{r>2})``
    where ``s^-`` is taken as ``s - margin``; Newtonian laws drop the last two terms.
    """
    _check_alpha(alpha, newtonian, "pressure-rate theorem")
    if not lam > alpha:
        raise RangeError(f"lambda={lam} must exceed alpha={alpha}")
    terms = [(alpha - 1.0) / 2.0, (3.0 - alpha) / 2.0, (lam - alpha) - margin]
    if not newtonian:
        terms.append((3.0 - 2.0 * alpha) - margin)
        if r > 2:
            terms.append((3.0 - 2.0 * alpha) * (r - 2.0) / r)
    return float(min(terms))


# --- fitting ---------------------------------------------------------------------------

@dataclass
class RateFit:
    slope: float
    pair_slopes: list
    intercept: float


def fit_rate(eps_list, errors) -> RateFit:
    """Least-squares slope of ``log(error)`` against ``log(eps)`` plus slopes between neighbours."""
    e = np.asarray(eps_list, float)
    y = np.asarray(errors, float)
    if e.size != y.size or e.size < 2:
        raise FitError("need at least two (eps, error) pairs")
    if np.any(y <= 0) or np.any(~np.isfinite(y)):
        raise FitError("errors must be positive and finite")
    if np.any(e <= 0):
        raise FitError("eps must be positive")
    lx, ly = np.log(e), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    pairs = [float((ly[i + 1] - ly[i]) / (lx[i + 1] - lx[i])) for i in range(e.size - 1)]
    return RateFit(float(slope), pairs, float(intercept))


def strictly_decreasing(values) -> bool:
    v = list(values)
    return all(b < a for a, b in zip(v, v[1:]))


def relative_energy(u_eps, U, lam: float, epsilon: float | None = None) -> float:
    """``int_fluid 1/2 eps^lam |u_eps - U|^2`` for two :class:`StaggeredField` on the same mask."""
    if isinstance(u_eps, StaggeredField):
        mask = u_eps.mask
        if isinstance(U, StaggeredField):
            if U.mask.shape != mask.shape or U.mask.h != mask.h:
                raise ValueError("fields live on different grids")
            U = U.u
        U = [np.asarray(c, float) for c in U]
        if any(c.shape != mask.shape for c in U):
            raise ValueError("fields live on different grids")
        eps = mask.spec.epsilon if epsilon is None else epsilon
        tg = mask.tensor_grid()
        total = 0.0
        for c, (a, b, s) in enumerate(zip(u_eps.u, U, mask.face_solid)):
            d = np.where(s, 0.0, a - b)
            total += float(np.sum(tg.face_volumes(c) * d * d))
        return 0.5 * eps ** lam * total / tg.volume
    raise TypeError("relative_energy expects StaggeredField inputs")


# --- configuration -----------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    alpha: float
    epsilons: list
    hole: HoleShape = field(default_factory=lambda: HoleShape.ball(1.0))
    x0: tuple = (0.0, 0.0, 0.0)
    grid: dict = field(default_factory=lambda: {"rule": "cells_per_radius", "k": 2})
    law: ViscosityLaw = field(default_factory=lambda: ViscosityLaw.newtonian(1.0))
    lam: float | None = None
    forcing: Forcing = field(default_factory=lambda: Forcing("single-mode", (1.0, 1.0)))
    mode: str = "stationary"
    dt: float | None = None
    t_end: float | None = None
    u0: str = "darcy"
    tol: float = 1e-8
    m0: str | dict = "discrete"
    permeability: dict = field(default_factory=lambda: {"R_list": [16.0, 32.0], "n": 48})
    reduce_window: bool = True
    saddle: str = "minres"
    out: str | None = None
    seed: int = 0
    workers: int = 1
    name: str = "sweep"

    def __post_init__(self):
        if self.lam is None:
            self.lam = self.alpha + 1.0
        self.epsilons = [float(e) for e in self.epsilons]
        self.x0 = tuple(float(v) for v in self.x0)

    @property
    def lambda_prime(self) -> float:
        return self.lam - 2.0 * (3.0 - self.alpha)

    def validate(self) -> list:
        problems = []
        e = self.epsilons
        if len(e) < 2:
            problems.append("a rate fit needs at least two eps values")
        if any(b >= a for a, b in zip(e, e[1:])):
            problems.append("eps values must be strictly decreasing")
        for v in e:
            m = round(1 / v)
            if abs(1 / v - m) > 1e-9 * m:
                problems.append(f"1/eps must be an integer (eps={v})")
        if not self.lam > self.alpha:
            problems.append(f"lambda={self.lam} must exceed alpha={self.alpha}")
        if self.mode not in ("stationary", "evolutionary"):
            problems.append(f"unknown mode {self.mode!r}")
        if self.mode == "evolutionary" and not (self.dt and self.t_end):
            problems.append("evolutionary runs need dt and t_end")
        return problems

    def spec(self, eps: float) -> PerforationSpec:
        return PerforationSpec(eps, self.alpha, self.hole, self.x0)

    def grid_for(self, spec: PerforationSpec) -> GridSpec:
        window = self.forcing.reduced_window(spec.cells_per_axis) if self.reduce_window else None
        rule = self.grid.get("rule", "cells_per_radius")
        if rule == "cells_per_radius":
            return GridSpec.cells_per_radius(spec, self.grid.get("k", 2), window, self.grid.get("minimum", 0))
        if rule == "default":
            return GridSpec.default_rule(spec, window)
        if rule == "explicit":
            return GridSpec(int(self.grid["n"][self.epsilons.index(spec.epsilon)]), window)
        raise ValueError(f"unknown grid rule {rule!r}")

    def to_dict(self) -> dict:
        return {"name": self.name, "alpha": self.alpha, "epsilons": self.epsilons, "hole": self.hole.to_dict(),
                "x0": list(self.x0), "grid": self.grid, "law": self.law.to_dict(), "lambda": self.lam,
                "lambda_prime": self.lambda_prime, "forcing": self.forcing.to_dict(), "mode": self.mode,
                "dt": self.dt, "t_end": self.t_end, "u0": self.u0, "tol": self.tol, "m0": self.m0,
                "permeability": self.permeability, "reduce_window": self.reduce_window, "saddle": self.saddle,
                "out": self.out, "seed": self.seed, "workers": self.workers}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = dict(d)
        kw = {}
        for key in ("alpha", "epsilons", "grid", "mode", "dt", "t_end", "u0", "tol", "m0", "permeability",
                    "reduce_window", "saddle", "out", "seed", "workers", "name", "x0"):
            if key in known:
                kw[key] = known[key]
        if "hole" in known:
            kw["hole"] = HoleShape.from_dict(known["hole"])
        if "law" in known:
            kw["law"] = ViscosityLaw.from_dict(known["law"])
        if "lambda" in known or "lam" in known:
            kw["lam"] = known.get("lambda", known.get("lam"))
        if "forcing" in known:
            kw["forcing"] = Forcing.from_dict(known["forcing"])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --- sweep -------------------------------------------------------------------------------

@dataclass
class RateReport:
    config: dict
    rows: list
    velocity_fit: RateFit | None
    pressure_fit: RateFit | None
    predicted_velocity: float | None
    predicted_pressure: float | None
    passes: dict
    degenerate: bool = False
    aborted: str | None = None
    permeabilities: list = field(default_factory=list)

    @property
    def all_passed(self) -> bool:
        flags = [v for v in self.passes.values() if v is not None]
        return self.aborted is None and all(flags)


def reference_permeability(config: ExperimentConfig, spec: PerforationSpec, grid: GridSpec) -> PermeabilityTensor:
    src = config.m0
    opts = config.permeability
    if isinstance(src, dict):
        return PermeabilityTensor.from_dict(src)
    if src == "discrete":
        return discrete_permeability(spec, grid, opts.get("R_list", (16.0, 32.0)), opts.get("n", 48))
    if src == "extrapolated":
        return permeability(spec.hole, opts.get("R_list", (16.0, 32.0)), opts.get("n", 48),
                            opts.get("cells_per_radius", 4))
    if src == "ball":
        if spec.hole.kind != "ball":
            raise ValueError("analytic permeability only for balls")
        m = 6 * math.pi * spec.hole.rho * np.eye(3)
        return PermeabilityTensor(m, spec.hole.to_dict(), [], [], 0.0, spec.hole.rho == 0, {"source": "6 pi rho"})
    return PermeabilityTensor.load(src)


def sweep_case(config: ExperimentConfig, eps: float) -> dict:
    """All work for one eps: mask, reference, flow solve(s), error norms."""
    t0 = time.perf_counter()
    spec = config.spec(eps)
    grid = config.grid_for(spec)
    mask = build_mask(spec, grid)
    tg = mask.tensor_grid()
    law = config.law
    row = {"epsilon": eps, "n": grid.n, "dims": list(mask.shape), "window": list(grid.window_cells(spec)),
           "porosity": mask.porosity}
    if config.forcing.is_zero:
        m0 = PermeabilityTensor(np.eye(3), spec.hole.to_dict(), [], [], 0.0, True, {"source": "unused"})
    else:
        m0 = reference_permeability(config, spec, grid)
    ref = darcy_reference(m0.m if not m0.degenerate else np.eye(3), law.eta0, config.forcing)
    U = ref.velocity_on_faces([tg.face_coords(c) for c in AXES])
    P = ref.evaluate(*tg.cell_coords())[1]
    cfg = SolveConfig(config.lam, law, config.forcing, tol=config.tol, saddle=config.saddle)
    fw = [np.broadcast_to(tg.face_volumes(c), tg.shape) for c in AXES]
    vol = np.broadcast_to(tg.cell_volumes, tg.shape)
    V = tg.volume

    def velocity_error(fld):
        z = extend_by_zero(fld)
        return float(sum(np.sum(w * (a - b) ** 2) for w, a, b in zip(fw, z.u, U)) / V)

    if config.mode == "stationary":
        fld, diag = solve_stationary(spec, grid, cfg, mask)
        z = extend_by_zero(fld)
        p = z.p - np.sum(vol * z.p) / V
        row.update(velocity_error=velocity_error(fld),
                   pressure_error=float(np.sum(vol * np.abs(p - P)) / V),
                   relative_energy=relative_energy(fld, U, config.lam),
                   picard_iterations=diag.iterations, energy_residual=diag.energy_residual,
                   divergence=diag.divergence, **{f"bound_{k}": v for k, v in diag.bound_checks.items()})
    else:
        cfg.dt = config.dt
        if config.u0 == "darcy":
            u0 = StaggeredField.from_stacked(leray_project(mask, U), np.zeros(mask.shape), mask)
        else:
            u0 = StaggeredField.zeros(mask)
        state = initial_state(spec, cfg, u0)
        steps = int(round(config.t_end / config.dt))
        integ = 0.0
        worst = -math.inf
        prev = velocity_error(state.field)
        for _ in range(steps):
            state = step_evolutionary(state, spec, grid, cfg)
            cur = velocity_error(state.field)
            integ += 0.5 * config.dt * (prev + cur)
            prev = cur
            led = state.ledger[-1]
            scale = max(state.kinetic0, abs(led["work"]), led["dissipated"], 1e-300)
            worst = max(worst, led["defect"] / scale)
        row.update(velocity_error=integ, final_velocity_error=prev, ledger_defect_max=worst,
                   initial_error=velocity_error(u0), steps=steps)
    row["m0_trace_over_3"] = float(np.trace(m0.m) / 3)
    row["seconds"] = time.perf_counter() - t0
    return {"row": row, "m0": m0.to_dict()}


def _case_worker(args):
    cfg_dict, eps = args
    return sweep_case(ExperimentConfig.from_dict(cfg_dict), eps)


def run_sweep(config: ExperimentConfig, progress=None) -> RateReport:
    """Run every eps of the sweep, fit rates and decide the pass flags."""
    problems = config.validate()
    if problems:
        raise ValueError("; ".join(problems))
    newtonian = config.law.is_newtonian
    setting = "torus-stationary" if config.mode == "stationary" else "torus-evolutionary"
    try:
        pred_v = predicted_exponent(config.alpha, newtonian, setting)
    except RangeError as exc:
        log.warning("%s", exc)
        pred_v = None
    pred_p = None
    if config.mode == "stationary":
        try:
            pred_p = predicted_pressure_exponent(config.alpha, config.lam, config.law.r, newtonian)
        except RangeError as exc:
            log.warning("%s", exc)
    rows, perms, aborted = [], [], None
    if config.workers > 1:
        args = [(config.to_dict(), e) for e in config.epsilons]
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(_case_worker, a) for a in args]
            for fut in futures:
                try:
                    res = fut.result()
                except (SolverError, ValueError) as exc:
                    aborted = f"{type(exc).__name__}: {exc}"
                    break
                rows.append(res["row"])
                perms.append(res["m0"])
    else:
        for e in config.epsilons:
            try:
                res = sweep_case(config, e)
            except (SolverError, ValueError) as exc:
                aborted = f"eps={e:g}: {type(exc).__name__}: {exc}"
                break
            rows.append(res["row"])
            perms.append(res["m0"])
            if progress:
                progress(res["row"])
    eps = [r["epsilon"] for r in rows]
    ev = [r["velocity_error"] for r in rows]
    passes, vfit, pfit = {}, None, None
    degenerate = config.forcing.is_zero
    if aborted is None and not degenerate:
        vfit = fit_rate(eps, ev)
        thresh = max((pred_v if pred_v is not None else 0.0) - SLOPE_TOLERANCE, 0.0)
        passes["velocity_rate"] = bool(strictly_decreasing(ev) and vfit.slope >= thresh)
        if config.mode == "stationary":
            ep = [r["pressure_error"] for r in rows]
            pfit = fit_rate(eps, ep)
            passes["pressure_decrease"] = bool(strictly_decreasing(ep))
        else:
            passes["energy_ledger"] = bool(all(r["ledger_defect_max"] <= LEDGER_TOLERANCE for r in rows))
    elif degenerate:
        passes["velocity_rate"] = None
    else:
        passes["completed"] = False
    return RateReport(config.to_dict(), rows, vfit, pfit, pred_v, pred_p, passes, degenerate, aborted, perms)


# --- outputs -----------------------------------------------------------------------------

def versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("numpy", "scipy", "pyamg", "matplotlib", "artifact"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


RESULT_METRICS = ("velocity_error", "pressure_error", "relative_energy", "energy_residual", "divergence",
                  "bound_scaled_grad_l2", "bound_l2", "bound_scaled_grad_lr", "final_velocity_error",
                  "ledger_defect_max", "porosity", "m0_trace_over_3")


def results_csv(report: RateReport, name: str = "sweep") -> str:
    """One row per eps per metric with fixed formatting (runtimes excluded so output is reproducible)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sweep", "epsilon", "metric", "value"])
    for r in report.rows:
        for k in RESULT_METRICS:
            if k in r:
                w.writerow([name, f"{r['epsilon']:.10g}", k, f"{r[k]:.12e}"])
    for label, fit in (("velocity_slope", report.velocity_fit), ("pressure_slope", report.pressure_fit)):
        if fit is not None:
            w.writerow([name, "", label, f"{fit.slope:.12e}"])
    return buf.getvalue()


def manifest(report: RateReport, extra: dict | None = None) -> dict:
    out = {"config": report.config, "versions": versions(), "permeability": report.permeabilities,
           "predicted_velocity_exponent": report.predicted_velocity,
           "predicted_pressure_exponent": report.predicted_pressure,
           "velocity_slope": None if report.velocity_fit is None else report.velocity_fit.slope,
           "velocity_pair_slopes": None if report.velocity_fit is None else report.velocity_fit.pair_slopes,
           "pressure_slope": None if report.pressure_fit is None else report.pressure_fit.slope,
           "pass": report.passes, "all_passed": report.all_passed, "degenerate": report.degenerate,
           "aborted": report.aborted, "rows": report.rows,
           "footer": f"slope tolerance {SLOPE_TOLERANCE}: three-point sweeps resolve exponents to about +-0.2-0.3"}
    if extra:
        out.update(extra)
    return out


def plot_rates(report: RateReport, path) -> Path | None:
    """Log-log error curves with guide lines of the predicted slopes."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not report.rows or report.degenerate:
        return None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    eps = np.array([r["epsilon"] for r in report.rows])
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    series = [("velocity_error", r"$\|\tilde u_\varepsilon - u\|_2^2$", report.predicted_velocity, "o-"),
              ("pressure_error", r"$\|\tilde p_\varepsilon - p\|_1$", report.predicted_pressure, "s-")]
    for key, label, pred, style in series:
        if key not in report.rows[0]:
            continue
        y = np.array([r[key] for r in report.rows])
        if np.any(y <= 0):
            continue
        ax.loglog(eps, y, style, label=label)
        if pred is not None:
            ax.loglog(eps, y[0] * (eps / eps[0]) ** pred, "--", color="gray", lw=0.8)
            ax.annotate(f"slope {pred:.2f}", (eps[-1], y[0] * (eps[-1] / eps[0]) ** pred), fontsize=7, color="gray")
    ax.set_xlabel(r"$\varepsilon$")
    ax.set_ylabel("error")
    ax.legend(fontsize=8)
    ax.grid(True, which="both", lw=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def write_outputs(report: RateReport, out_dir, name: str = "sweep", extra: dict | None = None) -> dict:
    """``manifest.json``, ``results.csv`` and ``plots/<name>.svg`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(results_csv(report, name))
    (out / "manifest.json").write_text(json.dumps(manifest(report, extra), indent=2, default=_jsonable))
    svg = plot_rates(report, out / "plots" / f"{name}.svg")
    return {"manifest": out / "manifest.json", "results": out / "results.csv", "plot": svg}


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")
