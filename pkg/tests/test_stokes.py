import numpy as np
import pytest

from homlab.geometry import GridSpec, HoleShape, PerforationSpec, build_mask
from homlab.mac import TensorGrid
from homlab.stokes import MaskedStokes


def perforated_system():
    mask = build_mask(PerforationSpec(0.25, 2.0, HoleShape.ball(1.0)), GridSpec(32, (1, 1, 2)))
    tg = mask.tensor_grid()
    rng = np.random.default_rng(2)
    rhs = tg.face_weights() * rng.standard_normal(3 * tg.size)
    return mask, tg, MaskedStokes(tg, mask.fluid), tg.laplacian_form(1.0), rhs


def test_minres_and_uzawa_agree():
    mask, tg, st, K, rhs = perforated_system()
    a = st.solve(K, rhs, tol=1e-10)
    b = st.solve(K, rhs, tol=1e-10, method="uzawa")
    assert a.residual <= 1e-8 and b.residual <= 1e-8
    np.testing.assert_allclose(a.u, b.u, atol=1e-7 * np.abs(a.u).max())
    assert np.abs(tg.divergence(a.u)[mask.fluid]).max() <= 1e-7
    with pytest.raises(ValueError):
        st.solve(K, rhs, method="gmres")


def test_strain_form_matches_laplacian_on_divergence_free_fields():
    # for div u = 0 the strain and Laplacian forms give the same energy: |grad u|^2 = 2|Du|^2
    mask, tg, st, K, rhs = perforated_system()
    u = st.solve(K, rhs, tol=1e-12).u
    one = np.ones(tg.shape)
    S = tg.strain_form(one, {(c, d): one for c in range(3) for d in range(3) if c < d})
    assert u @ (S @ u) == pytest.approx(0.5 * u @ (K @ u), rel=1e-8)


def test_uniform_grid_geometry():
    tg = TensorGrid.uniform((4, 6, 8), 0.125)
    assert tg.volume == pytest.approx(0.5 * 0.75 * 1.0)
    assert tg.face_weights().sum() == pytest.approx(3 * tg.volume)
    x = tg.face_coords(0)[0]
    assert x[0, 0, 0] == 0.0 and x[1, 0, 0] == 0.125


def test_hole_free_torus_kernel_is_deflated():
    # constant velocities are undetermined on a hole-free torus; the solver returns the zero-mean solution
    mask = build_mask(PerforationSpec(0.25, 2.0, HoleShape.ball(0.0)), GridSpec(16))
    tg = mask.tensor_grid()
    x = tg.face_coords(0)
    f = np.zeros((3,) + tg.shape)
    f[0] = np.sin(2 * np.pi * x[1])
    st = MaskedStokes(tg, mask.fluid)
    res = st.solve(tg.laplacian_form(1.0), tg.face_weights() * f.ravel(), tol=1e-10)
    u = tg.unstack(res.u)
    assert abs(u[0].mean()) <= 1e-12
    k2 = (2 / 0.0625 * np.sin(np.pi / 16)) ** 2     # discrete symbol of -d2/dy2 for sin(2 pi y)
    np.testing.assert_allclose(u[0], f[0] / k2, atol=1e-8)
