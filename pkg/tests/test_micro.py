import math

import numpy as np
import pytest

from homlab.geometry import GridSpec, HoleShape, PerforationSpec, SpecError
from homlab.micro import (ANNULUS, HOLE, IDENTITY, PermeabilityTensor, build_corrector, corrector_norms,
                          pairing_matrix, permeability, richardson, save_corrector)


def test_richardson_recovers_linear_model():
    A = np.array([[2.0, 0.1], [0.1, 3.0]])
    C = np.array([[5.0, -1.0], [-1.0, 4.0]])
    for R in ([8.0, 16.0], [8.0, 16.0, 32.0]):
        vals = [A + C / r for r in R]
        np.testing.assert_allclose(richardson(R, vals), A, rtol=1e-13)
    with pytest.raises(ValueError):
        richardson([16.0, 8.0], [A, A])


@pytest.fixture(scope="module")
def coarse_ball():
    return permeability(HoleShape.ball(0.5), (8.0, 16.0), n=24, cells_per_radius=4)


def test_coarse_ball_permeability(coarse_ball):
    ref = 6 * math.pi * 0.5
    m = coarse_ball.m
    assert np.all(np.abs(np.diag(m) - ref) <= 0.1 * ref)
    assert np.abs(m - np.diag(np.diag(m))).max() <= 0.02 * ref
    np.testing.assert_allclose(m, m.T)
    assert coarse_ball.eigenvalues.min() > 0


def test_permeability_scales_linearly_with_radius(coarse_ball):
    # the exterior solve is posed in hole units, so M0(2 rho) = 2 M0(rho)
    big = permeability(HoleShape.ball(1.0), (8.0, 16.0), n=24, cells_per_radius=4)
    np.testing.assert_allclose(big.m, 2 * coarse_ball.m, rtol=1e-6, atol=1e-6)


def test_permeability_json_roundtrip(tmp_path, coarse_ball):
    path = coarse_ball.save(tmp_path / "perm.json")
    back = PermeabilityTensor.load(path)
    np.testing.assert_allclose(back.m, coarse_ball.m)
    assert back.R_list == [8.0, 16.0]


def test_empty_hole_is_degenerate():
    pt = permeability(HoleShape.ball(0.0))
    assert pt.degenerate and not np.any(pt.m)


@pytest.fixture(scope="module")
def corrector():
    spec = PerforationSpec(0.25, 1.5, HoleShape.ball(0.25))
    return build_corrector(spec, GridSpec.cells_per_radius(spec, 2))


def test_corrector_structure(corrector):
    cf = corrector
    g = cf.grid
    assert cf.divergence <= 1e-7
    labels = cf.labels
    for i in range(3):
        comps = cf.column(i)
        for c in range(3):
            a, b = labels, np.roll(labels, 1, axis=c)
            hole = (a == HOLE) | (b == HOLE)
            ident = (a == IDENTITY) & (b == IDENTITY)
            assert not np.any(comps[c][hole])
            np.testing.assert_array_equal(comps[c][ident], 1.0 if c == i else 0.0)
    live = labels != HOLE
    for q in cf.Q:
        assert abs(q[live].mean()) <= 1e-10
    assert np.any(labels == ANNULUS)


def test_corrector_norms_and_periodicity(corrector):
    n2 = corrector_norms(corrector, 2)
    tiled = corrector_norms(corrector.tiled((1, 2, 2)), 2)
    assert tiled.w_minus_id == pytest.approx(n2.w_minus_id, rel=1e-12)
    assert tiled.grad_w == pytest.approx(n2.grad_w, rel=1e-12)
    assert corrector_norms(corrector, math.inf).w_minus_id == pytest.approx(1.0)
    assert corrector_norms(corrector, 3).note
    with pytest.raises(ValueError):
        corrector_norms(corrector, 0.5)


def test_pairing_matrix_is_symmetric_positive(corrector):
    P = pairing_matrix(corrector)
    np.testing.assert_allclose(P, P.T, atol=1e-8 * np.abs(P).max())
    assert np.linalg.eigvalsh(P).min() > 0


def test_save_corrector(tmp_path, corrector):
    paths = save_corrector(corrector, tmp_path / "w")
    n = corrector.grid.size
    assert paths[2].stat().st_size == 9 * n * 8
    assert paths[3].stat().st_size == 3 * n * 8


def test_odd_cell_grid_rejected():
    spec = PerforationSpec(0.25, 1.5, HoleShape.ball(0.25))
    with pytest.raises(SpecError):
        build_corrector(spec, GridSpec(4 * 15))
