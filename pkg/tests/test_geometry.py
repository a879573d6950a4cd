import numpy as np
import pytest

from singular_heat.geometry import boundary_defining_function, boundary_frame_2d, build_grid


def test_uniform_partition():
    g = build_grid(8, 1.0)
    np.testing.assert_allclose(g.nodes, np.arange(9) * 0.125)
    assert g.h == 0.125
    assert build_grid(100, 1.0).h == pytest.approx(0.01)


@pytest.mark.parametrize("n", [4, 7, 0])
def test_resolution_too_low(n):
    with pytest.raises(ValueError, match="resolution too low"):
        build_grid(n)


def test_non_positive_length():
    with pytest.raises(ValueError):
        build_grid(16, 0.0)


@pytest.mark.parametrize("n", [20, 100, 333])
def test_bdf_matches_distance_near_ends(n):
    g = build_grid(n)
    b = boundary_defining_function(g)
    assert b.values[1] == pytest.approx(g.h)
    assert b.values[-2] == pytest.approx(g.h)
    near = b.in_margin()
    np.testing.assert_allclose(b.values[near], b.distance()[near], atol=1e-15)
    np.testing.assert_allclose(np.abs(b.first[near]), 1.0)
    np.testing.assert_allclose(b.second[near], 0.0, atol=1e-9)


def test_bdf_positive_and_symmetric():
    b = boundary_defining_function(build_grid(200))
    assert np.all(b.values[1:-1] > 0)
    np.testing.assert_allclose(b.values, b.values[::-1], atol=1e-14)


def test_bdf_c2_at_blend_edges():
    b = boundary_defining_function(build_grid(64), blend_width=0.2)
    edge = 0.5 - 0.1
    eps = 1e-9
    for k in range(3):
        lo = b.derivatives(edge - eps)[k]
        hi = b.derivatives(edge + eps)[k]
        assert lo == pytest.approx(hi, abs=1e-6)


def test_second_difference_bounded_under_refinement():
    # exact blend curvature at the centre is -3/(2c) = -15 for c = 0.1
    vals = []
    for n in (100, 200, 400):
        g = build_grid(n)
        b = boundary_defining_function(g)
        vals.append(np.max(np.abs(np.diff(b.values, 2))) / g.h**2)
    np.testing.assert_allclose(vals, [14.975, 14.99375, 14.9984375], rtol=1e-9)
    assert max(vals) - min(vals) < 0.05


def test_blend_width_validated():
    with pytest.raises(ValueError):
        boundary_defining_function(build_grid(16), blend_width=0.3)


def test_frame_flat_bottom():
    fr = boundary_frame_2d(side="bottom", depth=0.2, n_normal=8, n_tangent=10)
    a, bb = fr.points[..., 0], fr.points[..., 1]
    np.testing.assert_allclose(fr.y, bb, atol=1e-15)
    np.testing.assert_allclose(fr.w, a - 0.5, atol=1e-15)


@pytest.mark.parametrize("side", ["bottom", "top", "left", "right"])
def test_frame_orthogonality_and_hessian(side):
    fr = boundary_frame_2d(side=side, depth=0.2, n_normal=8, n_tangent=12)
    gy, gw = fr.gradients()
    np.testing.assert_allclose(np.sum(gy * gw, axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(np.sum(gy * gy, axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(fr.hessian_yy(), 0.0, atol=1e-9)


def test_frame_rejects_deep_strip():
    with pytest.raises(ValueError):
        boundary_frame_2d(depth=0.6)
