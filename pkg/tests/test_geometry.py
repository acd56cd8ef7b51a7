import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from homlab.geometry import (DomainMask, GridSpec, HoleShape, PerforationSpec, ResolutionError, SpecError,
                             analytic_solid_fraction, build_mask, hole_centers, load_mask, required_n, save_mask,
                             validate_spec)


def brute_force_solid(spec, n):
    """Independent voxelization: every cell centre against every hole centre (with periodic images)."""
    x = (np.arange(n) + 0.5) / n
    X = np.stack(np.meshgrid(x, x, x, indexing="ij"), axis=-1)
    solid = np.zeros((n, n, n), bool)
    for c in hole_centers(spec):
        d = X - c
        d -= np.round(d)
        solid |= (d ** 2).sum(-1) < spec.hole_radius ** 2
    return solid


def test_cells_per_axis_and_scale():
    spec = PerforationSpec(0.125, 1.5, HoleShape.ball(0.1))
    assert spec.cells_per_axis == 8
    assert spec.scale == pytest.approx(0.125 ** 1.5)
    with pytest.raises(SpecError):
        PerforationSpec(0.3, 1.5).cells_per_axis


def test_mask_matches_brute_force_voxelization():
    spec = PerforationSpec(0.25, 1.5, HoleShape.ball(1.0), (0.1, -0.2, 0.05))
    mask = build_mask(spec, GridSpec(32))
    np.testing.assert_array_equal(mask.solid, brute_force_solid(spec, 32))
    assert mask.n_holes == 64


def test_porosity_against_analytic_fraction():
    # eps=1/4, alpha=1.5, rho=1: solid fraction 4/3 pi eps^(3 alpha - 3) = 0.5236
    spec = PerforationSpec(0.25, 1.5, HoleShape.ball(1.0))
    assert analytic_solid_fraction(spec) == pytest.approx(4 / 3 * math.pi * 0.25 ** 1.5)
    mask = build_mask(spec, GridSpec(64))
    assert abs(mask.porosity - (1 - analytic_solid_fraction(spec))) < 0.01


def test_window_tiles_the_cell_pattern():
    spec = PerforationSpec(0.25, 2.0, HoleShape.ball(1.0))
    full = build_mask(spec, GridSpec(32))
    col = build_mask(spec, GridSpec(32, (1, 1, 4)))
    assert col.shape == (8, 8, 32)
    np.testing.assert_array_equal(col.solid, full.solid[:8, :8, :])


def test_diagnostics_are_reported_not_raised():
    spec = PerforationSpec(0.25, 1.5, HoleShape.ball(1.0))
    codes = {d.split(":")[0] for d in validate_spec(spec, GridSpec(32))}
    assert codes == {"containment", "separation"}
    build_mask(spec, GridSpec(32))
    with pytest.raises(SpecError):
        build_mask(spec, GridSpec(32), strict=True)


def test_hard_errors():
    with pytest.raises(SpecError):
        build_mask(PerforationSpec(0.25, 3.5, HoleShape.ball(0.1)), GridSpec(32))
    with pytest.raises(SpecError):
        build_mask(PerforationSpec(0.25, 1.5, HoleShape.ball(0.1)), GridSpec(30))
    with pytest.raises(SpecError):
        build_mask(PerforationSpec(0.25, 1.1, HoleShape.ball(1.0)), GridSpec(32))
    with pytest.raises(ResolutionError) as exc:
        build_mask(PerforationSpec(0.25, 1.5, HoleShape.ball(0.1)), GridSpec(32))
    spec = PerforationSpec(0.25, 1.5, HoleShape.ball(0.1))
    assert exc.value.required_n == required_n(spec)
    assert 2 * spec.hole_radius >= 4 / exc.value.required_n
    assert required_n(spec) % 4 == 0


def test_empty_hole_gives_full_fluid():
    mask = build_mask(PerforationSpec(0.25, 1.5, HoleShape.ball(0.0)), GridSpec(16))
    assert mask.porosity == 1.0


def test_grid_rules():
    spec = PerforationSpec(0.25, 2.0, HoleShape.ball(1.0))
    g = GridSpec.cells_per_radius(spec, 2)
    assert g.n == 32 and spec.hole_radius / g.h == pytest.approx(2.0)
    d = GridSpec.default_rule(spec)
    assert d.n % 4 == 0 and d.n >= max(64, 8 / spec.scale)


def test_mask_file_roundtrip(tmp_path):
    spec = PerforationSpec(0.25, 2.0, HoleShape.ball(1.0), (0.1, 0.0, 0.0))
    mask = build_mask(spec, GridSpec(32, (1, 1, 4)))
    bin_path, json_path = save_mask(mask, tmp_path / "m")
    assert bin_path.stat().st_size == mask.solid.size
    back = load_mask(tmp_path / "m")
    np.testing.assert_array_equal(back.solid, mask.solid)
    assert back.spec.x0 == spec.x0 and back.grid.window == (1, 1, 4)


def test_mask_hole_shape_voxelizes():
    m = np.zeros((8, 8, 8), bool)
    m[2:6, 2:6, 2:6] = True
    hole = HoleShape.from_mask(m, extent=0.125)
    assert hole.volume() == pytest.approx((0.125) ** 3)
    assert hole.contains(np.array(0.0), np.array(0.0), np.array(0.0))
    assert not hole.contains(np.array(0.1), np.array(0.0), np.array(0.0))


@settings(max_examples=25, deadline=None)
@given(st.floats(0.5, 1.5), st.floats(0.0, 0.4))
def test_porosity_monotone_in_radius(r, dr):
    spec_a = PerforationSpec(0.25, 2.0, HoleShape.ball(r))
    spec_b = PerforationSpec(0.25, 2.0, HoleShape.ball(r + dr))
    g = GridSpec(64)
    assert build_mask(spec_b, g).porosity <= build_mask(spec_a, g).porosity
