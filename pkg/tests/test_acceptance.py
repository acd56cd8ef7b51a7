"""Acceptance criteria 1-11 at their stated tolerances and runtime budgets.

Each test records one PASS/FAIL line (see ``conftest.py``) before asserting,
so the summary lists every criterion even when some fail.
"""

import math
import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from homlab.constitutive import ViscosityLaw, check_growth, check_monotonicity, stress
from homlab.darcy import Forcing, TrigMode, darcy_reference, manufactured_check
from homlab.flowsolver import (SolveConfig, StaggeredField, initial_state, l2_norm, leray_project,
                               solve_stationary, step_evolutionary)
from homlab.geometry import GridSpec, HoleShape, PerforationSpec, build_mask
from homlab.harness import ExperimentConfig, fit_rate, run_sweep, strictly_decreasing
from homlab.mac import AXES
from homlab.micro import build_corrector, corrector_norms, discrete_permeability, permeability
from homlab.probes import bogovskii_probe, cell_mask, korn_identity_check, poincare_probe

TP = 2 * np.pi


def test_c01_permeability_oracle(criterion):
    t0 = time.perf_counter()
    rho = 0.1
    pt = permeability(HoleShape.ball(rho), (16.0, 32.0), n=48, cells_per_radius=4)
    secs = time.perf_counter() - t0
    ref = 6 * math.pi * rho
    diag = np.diag(pt.m)
    off = np.abs(pt.m - np.diag(diag)).max()
    rel = np.abs(diag / ref - 1).max()
    ok = rel <= 0.10 and off <= 0.02 * diag.min() and secs <= 300
    assert criterion(1, ok, f"M0 diag/(6 pi rho) = {np.round(diag / ref, 4).tolist()}, "
                            f"max off-diag/diag = {off / diag.min():.1e}, {secs:.0f} s")


def test_c02_constitutive_properties(criterion):
    t0 = time.perf_counter()
    mins, growth, equi = {}, {}, 0.0
    rots = Rotation.random(50, random_state=0).as_matrix()
    rng = np.random.default_rng(0)
    for r in (1.3, 2.0, 2.7):
        law = ViscosityLaw.carreau_yasuda(2.0, 1.0, 1.0, r)
        mins[r] = check_monotonicity(law, 1.0, 10_000, 42).min_ratio
        growth[r] = check_growth(law).constant
        for R in rots:
            X = rng.standard_normal((3, 3))
            D = X + X.T
            rhs = R @ stress(law, D) @ R.T
            equi = max(equi, np.abs(stress(law, R @ D @ R.T) - rhs).max() / max(1.0, np.abs(rhs).max()))
    secs = time.perf_counter() - t0
    ok = (all(v > 0 for v in mins.values()) and all(np.isfinite(v) for v in growth.values())
          and growth[2.0] == 0.0 and equi <= 1e-12 and secs <= 10)
    assert criterion(2, ok, f"min coercivity {', '.join(f'r={r}: {v:.4f}' for r, v in mins.items())}; "
                            f"growth C {', '.join(f'r={r}: {v:.4g}' for r, v in growth.items())}; "
                            f"equivariance {equi:.1e}; {secs:.1f} s")


def _manufactured(n):
    eps, alpha, lam = 0.25, 2.0, 3.0
    beta, inertia = eps ** (3 - alpha), eps ** lam

    def ustar(x, y, z):
        return np.sin(TP * y), np.sin(TP * z), np.sin(TP * x)

    def f(x, y, z):
        u = ustar(x, y, z)
        conv = (TP * np.sin(TP * z) * np.cos(TP * y), TP * np.sin(TP * x) * np.cos(TP * z),
                TP * np.sin(TP * y) * np.cos(TP * x))
        gp = (-TP * np.sin(TP * x) * np.cos(TP * y), -TP * np.cos(TP * x) * np.sin(TP * y), 0 * x)
        return tuple(beta * 0.5 * TP ** 2 * u[i] + inertia * conv[i] + gp[i] for i in range(3))

    spec = PerforationSpec(eps, alpha, HoleShape.ball(0.0))
    fld, _ = solve_stationary(spec, GridSpec(n), SolveConfig(lam, ViscosityLaw.newtonian(1.0), f, tol=1e-8))
    tg = fld.grid
    exact = tg.stack([ustar(*tg.face_coords(c))[c] for c in AXES])
    return l2_norm(tg, fld.stacked() - exact)


def test_c03_solver_verification(criterion):
    t0 = time.perf_counter()
    ns = [16, 32, 64]
    errs = [_manufactured(n) for n in ns]
    order = fit_rate([1 / n for n in ns], errs).slope
    pairs = [math.log2(a / b) for a, b in zip(errs, errs[1:])]
    spec = PerforationSpec(0.25, 2.0, HoleShape.ball(1.0))
    grid = GridSpec.cells_per_radius(spec, 2, window=(1, 1, 4))
    _, diag = solve_stationary(spec, grid, SolveConfig(3.5, ViscosityLaw.newtonian(1.0), Forcing("single-mode"),
                                                       tol=1e-8))
    secs = time.perf_counter() - t0
    ok = order >= 1.8 and diag.energy_residual <= 1e-6 and secs <= 600
    assert criterion(3, ok, f"order {order:.3f} (pairwise {', '.join(f'{p:.3f}' for p in pairs)}), "
                            f"energy residual {diag.energy_residual:.1e}, {secs:.0f} s")


def test_c04_darcy_reference(criterion):
    t0 = time.perf_counter()
    M = np.array([[3.0, 0.4, 0.1], [0.4, 2.0, -0.3], [0.1, -0.3, 1.5]])
    res = manufactured_check(M, 0.9, [TrigMode((1, 0, 1), 1.0, 0.2), TrigMode((0, 3, 1), -0.4, 1.1)],
                             [TrigMode((1, 1, 0), 0.8, 0.5, (1.0, -1.0, 0.0))], N=16)
    f = np.array([1.0, -2.0, 0.5])
    sol = darcy_reference(M, 1.7, Forcing("constant", f))
    expect = (2 / 1.7) * np.linalg.solve(M, f)
    closed = max(np.abs(sol.u[c] - expect[c]).max() / np.abs(expect).max() for c in range(3))
    secs = time.perf_counter() - t0
    ok = res.error_u <= 1e-10 and res.error_p <= 1e-10 and closed <= 1e-14 and secs <= 10
    assert criterion(4, ok, f"manufactured errors u {res.error_u:.1e}, p {res.error_p:.1e}; "
                            f"constant-forcing relative error {closed:.1e}; {secs:.2f} s")


NEWTONIAN_SWEEP = dict(alpha=2.0, epsilons=[0.25, 0.125, 0.0625], hole=HoleShape.ball(1.0),
                       grid={"rule": "cells_per_radius", "k": 2}, law=ViscosityLaw.newtonian(1.0), lam=3.5,
                       forcing=Forcing("single-mode", (1.0, 1.0)), tol=1e-8, m0="discrete", name="newtonian")


@pytest.fixture(scope="module")
def newtonian_sweep():
    t0 = time.perf_counter()
    rep = run_sweep(ExperimentConfig(**NEWTONIAN_SWEEP))
    return rep, time.perf_counter() - t0


def test_c05_velocity_rate_newtonian(criterion, newtonian_sweep):
    rep, secs = newtonian_sweep
    errs = [r["velocity_error"] for r in rep.rows]
    slope = rep.velocity_fit.slope if rep.velocity_fit else float("nan")
    ok = rep.aborted is None and strictly_decreasing(errs) and slope >= 0.6 and secs <= 3600
    assert criterion(5, ok, f"squared L2 errors {', '.join(f'{e:.3e}' for e in errs)}; slope {slope:.3f} "
                            f"(predicted {rep.predicted_velocity}, need >= 0.6); {secs:.0f} s")


def test_c06_velocity_rate_carreau_yasuda(criterion):
    t0 = time.perf_counter()
    cfg = ExperimentConfig(alpha=1.25, epsilons=[0.25, 0.125, 0.0625], hole=HoleShape.ball(0.25),
                           grid={"rule": "cells_per_radius", "k": 3},
                           law=ViscosityLaw.carreau_yasuda(2.0, 1.0, 1.0, 1.5), lam=2.5,
                           forcing=Forcing("single-mode", (1.0, 1.0)), tol=1e-8, m0="discrete", name="carreau_yasuda")
    rep = run_sweep(cfg)
    secs = time.perf_counter() - t0
    errs = [r["velocity_error"] for r in rep.rows]
    slope = rep.velocity_fit.slope if rep.velocity_fit else float("nan")
    need = max(rep.predicted_velocity - 0.3, 0.0)
    ok = rep.aborted is None and strictly_decreasing(errs) and slope >= need and secs <= 5400
    assert criterion(6, ok, f"squared L2 errors {', '.join(f'{e:.3e}' for e in errs)}; slope {slope:.3f} "
                            f"(predicted {rep.predicted_velocity}, need >= {need}); {secs:.0f} s")


def test_c07_corrector_norms(criterion):
    t0 = time.perf_counter()
    alpha, eps = 1.5, [0.25, 0.125, 0.0625]
    wid, grad = [], []
    for e in eps:
        spec = PerforationSpec(e, alpha, HoleShape.ball(0.25))
        nm = corrector_norms(build_corrector(spec, GridSpec.cells_per_radius(spec, 4)), 2)
        wid.append(nm.w_minus_id)
        grad.append(e ** ((3 - alpha) / 2) * nm.grad_w)
    secs = time.perf_counter() - t0
    slope = fit_rate(eps, wid).slope
    ratios = [a / b for a, b in zip(grad, grad[1:])]
    ok = abs(slope - 0.5) <= 0.2 and all(0.5 <= r <= 2 for r in ratios) and secs <= 1200
    assert criterion(7, ok, f"|W-Id|_2 slope {slope:.3f} (0.5 +- 0.2); scaled |grad W|_2 ratios "
                            f"{', '.join(f'{r:.3f}' for r in ratios)}; {secs:.0f} s")


def test_c08_poincare_scaling(criterion):
    t0 = time.perf_counter()
    rep = poincare_probe(1.5, [0.25, 0.125], HoleShape.ball(0.25), cells_per_radius=4)
    secs = time.perf_counter() - t0
    ratio = rep.values[0] / rep.values[1]
    target = 2 ** 0.75
    ok = abs(ratio / target - 1) <= 0.3 and secs <= 600
    assert criterion(8, ok, f"C(1/4)/C(1/8) = {ratio:.4f} vs 2^0.75 = {target:.4f} "
                            f"({100 * (ratio / target - 1):+.1f}%); {secs:.0f} s")


def test_c09_korn_and_bogovskii(criterion):
    t0 = time.perf_counter()
    korn = korn_identity_check(cell_mask(1.5, 0.25, HoleShape.ball(0.25), 4), 100, seed=7)
    bog = bogovskii_probe(1.5, [0.25, 0.125], HoleShape.ball(0.25), cells_per_radius=3, n_samples=20, seed=0)
    secs = time.perf_counter() - t0
    growth = bog.extra["growth"][0]
    bound = 1.3 * 2 ** 0.75
    ok = korn.max_ratio <= math.sqrt(2) + 0.05 and growth <= bound and secs <= 900
    assert criterion(9, ok, f"Korn max ratio {korn.max_ratio:.4f} (<= {math.sqrt(2) + 0.05:.4f}); Bogovskii growth "
                            f"{growth:.4f} (<= {bound:.4f}); {secs:.0f} s")


def test_c10_pressure_rate(criterion, newtonian_sweep):
    rep, _ = newtonian_sweep
    errs = [r["pressure_error"] for r in rep.rows]
    slope = rep.pressure_fit.slope if rep.pressure_fit else float("nan")
    ok = rep.aborted is None and strictly_decreasing(errs)
    assert criterion(10, ok, f"L1 pressure errors {', '.join(f'{e:.3e}' for e in errs)}; slope {slope:.3f} "
                             f"(predicted {rep.predicted_pressure})")


def test_c11_evolutionary_sanity(criterion):
    t0 = time.perf_counter()
    spec = PerforationSpec(0.125, 2.0, HoleShape.ball(1.0))
    forcing = Forcing("single-mode")
    grid = GridSpec.cells_per_radius(spec, 2, window=forcing.reduced_window(spec.cells_per_axis))
    mask = build_mask(spec, grid)
    tg = mask.tensor_grid()
    m0 = discrete_permeability(spec, grid)
    U = darcy_reference(m0.m, 1.0, forcing).velocity_on_faces([tg.face_coords(c) for c in AXES])
    # relaxation time eps^lam / ((eta0/2) M0) is about 2e-4; four steps of 1e-4
    cfg = SolveConfig(3.0, ViscosityLaw.newtonian(1.0), forcing, tol=1e-10, dt=1e-4)
    stationary, _ = solve_stationary(spec, grid, cfg, mask)
    state = initial_state(spec, cfg, StaggeredField.from_stacked(leray_project(mask, U), np.zeros(mask.shape), mask))
    w = tg.face_weights()
    dist, defects = [], []
    for _ in range(4):
        state = step_evolutionary(state, spec, grid, cfg)
        led = state.ledger[-1]
        defects.append(led["defect"] / max(state.kinetic0, led["dissipated"], abs(led["work"])))
        dist.append(math.sqrt(w @ (state.field.stacked() - stationary.stacked()) ** 2))
    secs = time.perf_counter() - t0
    ok = max(defects) <= 1e-8 and dist[-1] < dist[1] and secs <= 1800
    assert criterion(11, ok, f"energy inequality max (lhs - rhs)/scale {max(defects):.2e} (need <= 1e-8); distance to stationary "
                             f"mid {dist[1]:.3e} -> final {dist[-1]:.3e}; {secs:.0f} s")
