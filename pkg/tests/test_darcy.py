import math

import numpy as np
import pytest

from homlab.darcy import (BandLimitError, Forcing, TrigMode, darcy_reference, manufactured_check, solve_darcy)

BALL = 6 * math.pi * np.eye(3)
ANISO = np.array([[3.0, 0.4, 0.1], [0.4, 2.0, -0.3], [0.1, -0.3, 1.5]])


def test_constant_forcing_closed_form():
    f = np.array([1.0, -2.0, 0.5])
    sol = darcy_reference(ANISO, 1.7, Forcing("constant", f))
    expect = (2 / 1.7) * np.linalg.solve(ANISO, f)
    for c in range(3):
        assert np.abs(sol.u[c] - expect[c]).max() <= 1e-14
    assert np.abs(sol.p).max() <= 1e-14
    # ball of radius 1, unit force, eta0 = 2: u = 1 / (6 pi)
    ball = darcy_reference(BALL, 2.0, Forcing("constant", (1.0, 0.0, 0.0)))
    assert ball.u[0].mean() == pytest.approx(1 / (6 * math.pi), rel=1e-14)


def test_pure_gradient_forcing_gives_zero_velocity():
    pm = TrigMode((1, 2, 0), 0.7, 0.3)
    res = manufactured_check(ANISO, 1.0, p_star=[pm], N=16)
    assert res.error <= 1e-10 and res.band_limited


def test_manufactured_mixed_modes():
    p = [TrigMode((1, 0, 1), 1.0, 0.2), TrigMode((0, 3, 1), -0.4, 1.1)]
    u = [TrigMode((1, 1, 0), 0.8, 0.5, (1.0, -1.0, 0.0)), TrigMode((0, 0, 2), 1.3, 0.0, (0.3, 1.0, 0.0))]
    res = manufactured_check(ANISO, 0.9, p, u, N=16)
    assert res.error_u <= 1e-10 and res.error_p <= 1e-10


def test_non_solenoidal_manufactured_mode_rejected():
    with pytest.raises(ValueError):
        manufactured_check(BALL, 1.0, u_star=[TrigMode((1, 0, 0), 1.0, 0.0, (1.0, 0.0, 0.0))])


def test_aliased_data_flagged():
    res = manufactured_check(ANISO, 1.0, p_star=[TrigMode((8, 0, 0), 1.0, 0.0)], N=16)
    assert not res.band_limited
    f = np.zeros((3, 8, 8, 8))
    f[0] = np.cos(np.pi * np.arange(8))[:, None, None]
    assert not solve_darcy(BALL, 1.0, f).band_limited
    with pytest.raises(BandLimitError):
        solve_darcy(BALL, 1.0, f, strict=True)


def test_single_mode_evaluation_matches_analytic():
    # f = (sin 2 pi z, 0, cos 2 pi z), M0 = m Id: the z-forcing is a gradient, u = (2/(eta0 m)) (sin 2 pi z, 0, 0)
    m, eta0 = 6 * math.pi * 0.5, 1.3
    sol = darcy_reference(m * np.eye(3), eta0, Forcing("single-mode", (1.0, 1.0)))
    z = np.linspace(0, 1, 11)
    u, p = sol.evaluate(0.3 + 0 * z, 0.1 + 0 * z, z)
    np.testing.assert_allclose(u[0], 2 / (eta0 * m) * np.sin(2 * np.pi * z), atol=1e-13)
    np.testing.assert_allclose(u[2], 0.0, atol=1e-13)
    np.testing.assert_allclose(p, np.sin(2 * np.pi * z) / (2 * np.pi), atol=1e-13)


def test_residual_and_divergence():
    f = Forcing("smooth-bump", (2.0,))
    sol = darcy_reference(ANISO, 1.0, f, N=16)
    law, div = sol.residual(f.sample(16))
    assert law <= 1e-12 and div <= 1e-12


def test_input_errors():
    with pytest.raises(ValueError):
        solve_darcy(-BALL, 1.0, np.zeros((3, 4, 4, 4)))
    with pytest.raises(ValueError):
        solve_darcy(BALL, 0.0, np.zeros((3, 4, 4, 4)))
    with pytest.raises(ValueError):
        solve_darcy(BALL, 1.0, np.zeros((3, 4, 4)))
    with pytest.raises(ValueError):
        Forcing("gaussian")


def test_forcing_windows_and_roundtrip():
    assert Forcing("single-mode").reduced_window(8) == (1, 1, 8)
    assert Forcing("constant", (1, 0, 0)).reduced_window(8) == (1, 1, 1)
    assert Forcing("smooth-bump").reduced_window(8) is None
    f = Forcing("single-mode", (2.0, -1.0))
    assert Forcing.from_dict(f.to_dict()) == f
    assert Forcing("zero").is_zero and Forcing("constant", (0, 0, 0)).is_zero
