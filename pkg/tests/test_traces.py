import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import Setup
from singular_heat.evolution import BoundaryData, Trajectory, solve_adjoint, solve_controlled
from singular_heat.traces import (dirichlet_trace, flux_neumann_trace, neumann_trace, trace_convergence_rate,
                                  trace_series, two_branch_fit)


def steady(s, phi):
    return Trajectory(fields=np.tile(phi, (s.time.m_steps + 1, 1)), op=s.op, time=s.time)


def test_two_branch_exact():
    k, h = 0.25, 0.01
    y = np.array([h, 2 * h, 3 * h])
    assert two_branch_fit(y, 2 * y**k + 3 * y ** (1 - k), k) == pytest.approx((2, 3), abs=1e-10)
    assert two_branch_fit(y, y**k, k) == pytest.approx((1, 0), abs=1e-12)


@pytest.mark.parametrize("k", [-0.45, -0.25, 0.0, 0.25, 0.45])
def test_two_branch_recovery(k):
    y = np.linspace(0.01, 0.05, 5)
    vd, vn = 1.3, -0.7
    got = two_branch_fit(y, vd * y**k + vn * y ** (1 - k), k)
    assert got == pytest.approx((vd, vn), abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_two_branch_noise(seed):
    k = -0.25
    y = np.linspace(0.05, 0.3, 6)
    rng = np.random.default_rng(seed)
    u = 0.4 * y**k + 2.0 * y ** (1 - k) + 1e-8 * rng.uniform(-1, 1, y.size)
    got = two_branch_fit(y, u, k)
    assert got == pytest.approx((0.4, 2.0), abs=1e-5)


def test_two_branch_rejects_degenerate():
    with pytest.raises(ValueError):
        two_branch_fit([0.1, 0.1], [1.0, 1.0], 0.0)
    with pytest.raises(ValueError):
        two_branch_fit([0.0, 0.1], [1.0, 1.0], 0.0)
    with pytest.raises(np.linalg.LinAlgError):
        two_branch_fit([0.1, 0.1 + 1e-13], [1.0, 1.0], 0.2)


def test_dirichlet_trace_cases():
    s = Setup(-0.3, 100)
    tr = solve_adjoint(s.op.adjoint(), s.twisted(np.sin(np.pi * s.grid.nodes)), None, s.time)
    assert np.all(dirichlet_trace(tr, "left") == 0) and np.all(dirichlet_trace(tr, "right") == 0)
    t = s.time.times
    pulse = np.where((t > 0.2) & (t < 0.6), np.sin(np.pi * (t - 0.2) / 0.4), 0.0)
    vd = BoundaryData.from_levels(s.time, left=pulse)
    v = solve_controlled(s.op, np.zeros(101), vd, s.time)
    np.testing.assert_array_equal(dirichlet_trace(v, "left"), pulse)
    np.testing.assert_array_equal(dirichlet_trace(steady(s, np.ones(101)), "left"), 1.0)


def test_neumann_trace_closed_form():
    s = Setup(0.1875, 400)
    assert s.params.kappa == pytest.approx(0.25)
    phi = 3 * s.bdf.values ** (1 - 2 * s.params.kappa)
    np.testing.assert_allclose(neumann_trace(steady(s, phi), "left"), 1.5, rtol=1e-8)


def test_neumann_trace_branch_exactness():
    # A2 companion: u = b y^(1-kappa) gives (1 - 2 kappa) b
    s = Setup(-0.3, 400)
    k = s.params.kappa
    phi = 0.8 * s.bdf.values ** (1 - 2 * k)
    np.testing.assert_allclose(neumann_trace(steady(s, phi), "left"), (1 - 2 * k) * 0.8, rtol=1e-8)


def test_neumann_trace_flat_case():
    s = Setup(0.0, 200)
    x = s.grid.nodes
    tr = steady(s, x * (1 - x))
    np.testing.assert_allclose(neumann_trace(tr, "left"), 1.0, rtol=1e-10)
    np.testing.assert_allclose(neumann_trace(tr, "right"), 1.0, rtol=1e-10)


def test_neumann_stencil_robust():
    s = Setup(-0.3, 400)
    x = s.grid.nodes
    u = np.sin(np.pi * x) ** 2 * (1 + x)
    tr = solve_adjoint(s.op.adjoint(), s.twisted(u), None, s.time)
    mid = s.time.m_steps // 2
    vals = np.array([neumann_trace(tr, "left", d)[mid] for d in (2, 3, 4)])
    assert np.ptp(vals) <= 1e-3 * np.abs(vals).max()


def test_flux_trace_close_to_fitted_trace():
    s = Setup(-0.3, 400)
    tr = solve_adjoint(s.op.adjoint(), s.twisted(np.sin(np.pi * s.grid.nodes) ** 2), None, s.time)
    fitted = neumann_trace(tr, "left")[:-1]
    flux = flux_neumann_trace(tr, "left")
    assert np.linalg.norm(flux - fitted) <= 0.05 * np.linalg.norm(fitted)


def test_trace_series_rows():
    s = Setup(-0.3, 100)
    tr = solve_adjoint(s.op.adjoint(), s.twisted(np.sin(np.pi * s.grid.nodes) ** 2), None, s.time)
    ts = trace_series(tr, "right")
    assert len(list(ts.rows())) == s.time.m_steps + 1


def test_side_validated():
    s = Setup(-0.3, 100)
    with pytest.raises(ValueError):
        dirichlet_trace(steady(s, np.ones(101)), "top")


def test_rate_exact_two_branch_data():
    s = Setup(-0.3, 400)
    k = s.params.kappa
    tr = steady(s, 0.0 * s.bdf.values + 0.5 * s.bdf.values ** (1 - 2 * k))
    assert trace_convergence_rate(tr, "left") == math.inf


@pytest.mark.parametrize("sigma", [-0.3, 0.2])
def test_rate_regression(sigma):
    s = Setup(sigma, 400)
    x = s.grid.nodes
    u = np.sin(np.pi * x) ** 2 * (1 + x)
    tr = solve_adjoint(s.op.adjoint(), s.twisted(u), None, s.time)
    assert trace_convergence_rate(tr, "left") >= 0.5 * (1 + 2 * s.params.kappa) - 0.1
