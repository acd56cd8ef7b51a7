import numpy as np
import pytest

from homlab.constitutive import ViscosityLaw
from homlab.darcy import Forcing
from homlab.flowsolver import (SolveConfig, StaggeredField, convection, energy_identity_residual, extend_by_zero,
                               initial_state, l2_norm, leray_project, read_checkpoint, solve_stationary,
                               step_evolutionary, uniform_bound_report, write_checkpoint)
from homlab.geometry import GridSpec, HoleShape, PerforationSpec, build_mask

TP = 2 * np.pi
NEWTON = ViscosityLaw.newtonian(1.0)


def manufactured(eps=0.25, alpha=2.0, lam=3.0):
    beta, inertia = eps ** (3 - alpha), eps ** lam

    def ustar(x, y, z):
        return np.sin(TP * y), np.sin(TP * z), np.sin(TP * x)

    def f(x, y, z):
        u = ustar(x, y, z)
        conv = (TP * np.sin(TP * z) * np.cos(TP * y), TP * np.sin(TP * x) * np.cos(TP * z),
                TP * np.sin(TP * y) * np.cos(TP * x))
        gp = (-TP * np.sin(TP * x) * np.cos(TP * y), -TP * np.cos(TP * x) * np.sin(TP * y), 0 * x)
        return tuple(beta * 0.5 * TP ** 2 * u[i] + inertia * conv[i] + gp[i] for i in range(3))

    return ustar, f


def manufactured_error(n):
    ustar, f = manufactured()
    spec = PerforationSpec(0.25, 2.0, HoleShape.ball(0.0))
    fld, diag = solve_stationary(spec, GridSpec(n), SolveConfig(3.0, NEWTON, f, tol=1e-8))
    tg = fld.grid
    exact = tg.stack([ustar(*tg.face_coords(c))[c] for c in range(3)])
    return l2_norm(tg, fld.stacked() - exact), diag


def test_manufactured_second_order():
    e8, _ = manufactured_error(8)
    e16, diag = manufactured_error(16)
    assert diag.converged
    assert np.log2(e8 / e16) >= 1.8


def perforated(law=NEWTON, lam=3.5, window=(1, 1, 4), forcing=Forcing("single-mode"), tol=1e-8):
    spec = PerforationSpec(0.25, 2.0, HoleShape.ball(1.0))
    grid = GridSpec.cells_per_radius(spec, 2, window=window)
    cfg = SolveConfig(lam, law, forcing, tol=tol)
    fld, diag = solve_stationary(spec, grid, cfg)
    return spec, grid, cfg, fld, diag


def test_perforated_energy_identity_newtonian():
    spec, _, cfg, fld, diag = perforated()
    assert diag.converged
    assert diag.energy_residual <= 1e-6
    assert energy_identity_residual(fld, cfg, spec).value <= 1e-6
    assert diag.divergence <= 1e-8
    assert np.all(np.concatenate([c[s] for c, s in zip(fld.u, fld.mask.face_solid)]) == 0)


def test_perforated_energy_identity_carreau_yasuda():
    law = ViscosityLaw.carreau_yasuda(2.0, 1.0, 1.0, 1.5)
    spec, _, cfg, fld, diag = perforated(law=law, tol=1e-9)
    assert diag.converged
    assert energy_identity_residual(fld, cfg, spec).value <= 1e-6


def test_column_reduction_is_exact():
    _, _, _, col, _ = perforated(window=(1, 1, 4))
    _, _, _, full, _ = perforated(window=None)
    m = col.mask.shape[0]
    for a, b in zip(col.u, full.u):
        np.testing.assert_allclose(a, b[:m, :m, :], atol=1e-7)


def test_zero_forcing_gives_zero_solution():
    _, _, _, fld, diag = perforated(forcing=Forcing("zero"))
    assert diag.converged and not np.any(fld.stacked())


def test_lambda_must_exceed_alpha():
    with pytest.raises(ValueError):
        perforated(lam=2.0)


def test_leray_projection():
    spec = PerforationSpec(0.25, 2.0, HoleShape.ball(1.0))
    mask = build_mask(spec, GridSpec(32, (1, 1, 4)))
    tg = mask.tensor_grid()
    rng = np.random.default_rng(0)
    u = leray_project(mask, [rng.standard_normal(mask.shape) for _ in range(3)])
    assert np.abs(tg.divergence(u)[mask.fluid]).max() <= 1e-9
    again = leray_project(mask, tg.unstack(u))
    np.testing.assert_allclose(again, u, atol=1e-9)
    # convection does no work on discretely divergence-free fields
    N = tg.stack(convection(tg.unstack(u), mask.h))
    work = float(np.dot(tg.face_weights(), u * N))
    assert abs(work) <= 1e-10 * float(np.dot(tg.face_weights(), np.abs(u * N)))


def test_checkpoint_roundtrip(tmp_path):
    _, _, _, fld, _ = perforated()
    paths = write_checkpoint(fld, tmp_path / "chk", {"note": "x"})
    assert [p.name for p in paths] == ["chk.json", "chk.u.bin", "chk.p.bin"]
    back = read_checkpoint(tmp_path / "chk")
    head, u, p = back
    np.testing.assert_array_equal(np.concatenate([c.ravel() for c in u]), fld.stacked())
    np.testing.assert_array_equal(p, fld.p)
    assert head["note"] == "x" and head["window"] == [1, 1, 4]


def test_evolution_energy_ledger():
    spec = PerforationSpec(0.25, 2.0, HoleShape.ball(1.0))
    grid = GridSpec.cells_per_radius(spec, 2, window=(1, 1, 4))
    mask = build_mask(spec, grid)
    cfg = SolveConfig(3.5, NEWTON, Forcing("single-mode"), tol=1e-10, dt=0.05)
    tg = mask.tensor_grid()
    rng = np.random.default_rng(1)
    u0 = StaggeredField.from_stacked(leray_project(mask, [rng.standard_normal(mask.shape) for _ in range(3)]),
                                     np.zeros(mask.shape), mask)
    state = initial_state(spec, cfg, u0)
    for _ in range(4):
        state = step_evolutionary(state, spec, grid, cfg)
        scale = max(state.kinetic0, state.dissipated, abs(state.work))
        assert state.ledger_defect <= 1e-8 * scale
    assert state.t == pytest.approx(0.2) and len(state.ledger) == 4


def test_extend_by_zero_and_bounds():
    spec, _, _, fld, diag = perforated()
    z = extend_by_zero(fld)
    assert not np.any(z.p[fld.mask.solid])
    assert set(diag.bound_checks) == {"scaled_grad_l2", "l2"}
    rep = uniform_bound_report([(spec, fld, NEWTON), (spec, fld, NEWTON)])
    assert rep.passed and len(rep.rows) == 2
