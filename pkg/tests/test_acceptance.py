"""Acceptance criteria A1-A12, one printed PASS/FAIL line each.

Run alone with ``pytest tests/test_acceptance.py -v -s`` or ``python tests/test_acceptance.py``.
"""

import json
import sys
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, Setup, smooth_profile
from singular_heat import carleman as cm
from singular_heat.cli import main as cli_main
from singular_heat.evolution import (BoundaryData, Trajectory, build_time_grid, duality_residual, solve_adjoint,
                                     solve_controlled)
from singular_heat.geometry import boundary_defining_function, build_grid
from singular_heat.hum import (ControlProblem, dot_product_test, epsilon_sweep, field_inner, minimize,
                               normalized_sine_target, smooth_gradient, smooth_part, variational_check)
from singular_heat.singular_operator import h_minus1_norm, hardy_min_constant, kappa_from_sigma
from singular_heat.traces import neumann_trace, trace_convergence_rate, two_branch_fit


def record(key, title, ok, detail, elapsed=None, limit=None):
    if limit is not None:
        ok = ok and elapsed < limit
    timing = f" [{elapsed:.2f}s < {limit:g}s]" if limit is not None else ""
    line = f"{key} {title}: {'PASS' if ok else 'FAIL'} ({detail}){timing}"
    ACCEPTANCE[key] = line
    print(line)
    assert ok, line


def a5_problem(sigma):
    g = build_grid(200)
    return ControlProblem(g, boundary_defining_function(g), kappa_from_sigma(sigma), build_time_grid(1.0, 400),
                          normalized_sine_target(g), epsilon=0.1)


@pytest.fixture(scope="module")
def a5_runs():
    out = {}
    for sigma in (-0.3, 0.2):
        pr = a5_problem(sigma)
        t0 = time.perf_counter()
        it, res = minimize(pr)
        out[sigma] = (pr, it, res, time.perf_counter() - t0)
    return out


@pytest.fixture(scope="module")
def carleman_sweep():
    params = kappa_from_sigma(-0.3)
    t0 = time.perf_counter()
    fld = cm.manufactured_field(params)
    cw = cm.default_weight(params, 1.0, fld.y)
    res = cm.pointwise_check(fld, cw)
    return params, fld, cw, res, time.perf_counter() - t0


def test_a1_kappa_roundtrip():
    t0 = time.perf_counter()
    sig = np.random.default_rng(0).uniform(-0.7499, 0.2499, 1000)
    worst = max(abs(k * (1 - k) - s) for s in sig for k in [kappa_from_sigma(s).kappa])
    rejected = 0
    for s in (-0.75, 0.25, -0.8, 0.3):
        try:
            kappa_from_sigma(s)
        except ValueError:
            rejected += 1
    record("A1", "kappa roundtrip", worst <= 1e-12 and rejected == 4,
           f"max |k(1-k)-sigma| = {worst:.2e}, {rejected}/4 out-of-range rejected",
           time.perf_counter() - t0, 1.0)


def test_a2_trace_exactness():
    t0 = time.perf_counter()
    y = np.linspace(0.01, 0.04, 4)
    fit_err, trace_err = 0.0, 0.0
    for k in (-0.45, -0.25, 0.0, 0.25, 0.45):
        vd, vn = two_branch_fit(y, 1.5 * y**k - 0.5 * y ** (1 - k), k)
        fit_err = max(fit_err, abs(vd - 1.5), abs(vn + 0.5))
        s = Setup(k * (1 - k), 400, 16)
        phi = 0.7 * s.bdf.values ** (1 - 2 * k)
        tr = Trajectory(fields=np.tile(phi, (17, 1)), op=s.op, time=s.time)
        N = neumann_trace(tr, "left")
        trace_err = max(trace_err, float(np.max(np.abs(N - (1 - 2 * k) * 0.7))) / abs((1 - 2 * k) * 0.7))
    record("A2", "trace exactness", fit_err <= 1e-10 and trace_err <= 1e-8,
           f"fit error {fit_err:.1e}, Neumann relative error {trace_err:.1e}", time.perf_counter() - t0, 1.0)


def test_a3_discrete_hardy():
    t0 = time.perf_counter()
    c512, _ = hardy_min_constant(build_grid(512))
    c1024, _ = hardy_min_constant(build_grid(1024))
    same = f"{c512:.3g}" == f"{c1024:.3g}"
    record("A3", "discrete Hardy", c512 < 0 and same, f"c_h(512) = {c512:.6f}, c_h(1024) = {c1024:.6f}",
           time.perf_counter() - t0, 10.0)


def test_a4_duality_identity():
    t0 = time.perf_counter()
    parts, ok = [], True
    for sigma in (-0.5, -0.3, 0.2):
        res = []
        for n in (100, 200, 400):
            s = Setup(sigma, n)
            t = s.time.times
            u = solve_adjoint(s.op.adjoint(), s.twisted(smooth_profile(s.grid.nodes, 2)), None, s.time)
            pulse = np.where((t > 0.2) & (t < 0.7), np.sin(np.pi * (t - 0.2) / 0.5) ** 2, 0.0)
            vd = BoundaryData.from_levels(s.time, left=pulse)
            v = solve_controlled(s.op, np.zeros(n + 1), vd, s.time)
            res.append(duality_residual(u, v, vd))
        ratios = [a / b for a, b in zip(res, res[1:])]
        ok &= all(r >= 1.5 for r in ratios)
        parts.append(f"sigma={sigma}: " + "/".join(f"{r:.2f}" for r in ratios))
    record("A4", "duality identity", ok, "refinement ratios " + "; ".join(parts), time.perf_counter() - t0, 60.0)


def test_a5_approximate_control(a5_runs):
    parts, ok, slow = [], True, 0.0
    for sigma, (pr, it, res, elapsed) in a5_runs.items():
        v = solve_controlled(pr.forward_op, np.zeros(pr.grid.n_nodes), res.v_d, pr.time)
        err = h_minus1_norm(pr.grid, v.physical()[-1][1:-1] - pr.target)
        ok &= res.converged and err <= pr.epsilon
        slow = max(slow, elapsed)
        parts.append(f"sigma={sigma}: error {err:.5f} <= {pr.epsilon}, {res.iterations} it")
    record("A5", "approximate control", ok, "; ".join(parts), slow, 300.0)


def test_a6_optimality_certificate(a5_runs):
    t0 = time.perf_counter()
    worst = 0.0
    for pr, it, _, _ in a5_runs.values():
        worst = max(worst, max(lhs / bound for lhs, bound in variational_check(pr, it.u_T, n_dirs=10, seed=11)))
    record("A6", "optimality certificate", worst <= 1.0, f"max |lhs| / (eps ||u||) = {worst:.4f}",
           time.perf_counter() - t0, 60.0)


def test_a7_adjoint_and_gradient():
    t0 = time.perf_counter()
    pr = a5_problem(-0.3)
    dot = dot_product_test(pr, n_pairs=10, seed=5)
    rng = np.random.default_rng(6)
    n = pr.grid.n_cells - 1
    u = rng.standard_normal(n)
    g = smooth_gradient(pr, u)
    worst = 0.0
    for _ in range(5):
        d = rng.standard_normal(n)
        s = 1e-3
        fd = (smooth_part(pr, u + s * d) - smooth_part(pr, u - s * d)) / (2 * s)
        an = field_inner(pr, g, d)
        worst = max(worst, abs(fd - an) / abs(an))
    record("A7", "adjoint and gradient integrity", dot <= 1e-10 and worst <= 1e-5,
           f"dot-product mismatch {dot:.1e}, gradient mismatch {worst:.1e}", time.perf_counter() - t0, 60.0)


def test_a8_pointwise_carleman(carleman_sweep):
    params, _, cw, res, elapsed = carleman_sweep
    ok = res.C > 0 and res.min_fraction >= 0.999 and abs(res.y3_channel) <= 1e-15 and cw.p == params.kappa
    fr = ", ".join(f"{r.fraction:.4f}" for r in res.rows)
    record("A8", "pointwise Carleman", ok,
           f"lambda0 = {res.lambda0:.4f}, C = {res.C:.4f}, z = {cw.z:g}, fractions {fr}, "
           f"y^(-3+2p) coefficient {res.y3_channel:.1e}", elapsed, 120.0)


def test_a9_integrated_carleman(carleman_sweep):
    params, fld, cw, res, _ = carleman_sweep
    t0 = time.perf_counter()
    cwl = cw.with_lambda(2 * res.lambda0)
    C_bar = cm.fit_flux_bounds(fld, cwl).normal_flux_constant
    bounds, ok = [], True
    for n in (400, 800, 1600):
        f_u = cm.manufactured_field(params, n_y=n, spacing="uniform")
        r = cm.integrated_check(f_u, cwl, res.C, C_bar, 4 * 0.2 / n)
        ok &= r.satisfied
        bounds.append(r.boundary_bound)
    ok &= bounds[0] > bounds[1] > bounds[2]
    record("A9", "integrated Carleman", ok,
           "boundary integrals at delta = 4h: " + " > ".join(f"{b:.3f}" for b in bounds),
           time.perf_counter() - t0, 120.0)


def test_a10_neumann_rate():
    t0 = time.perf_counter()
    s = Setup(-0.3, 400)
    x = s.grid.nodes
    tr = solve_adjoint(s.op.adjoint(), s.twisted(np.sin(np.pi * x) ** 2 * (1 + x)), None, s.time)
    slope = trace_convergence_rate(tr, "left")
    target = 0.5 * (1 + 2 * s.params.kappa) - 0.1
    record("A10", "Neumann convergence rate", slope >= target, f"slope {slope:.3f} >= {target:.3f}",
           time.perf_counter() - t0, 60.0)


def test_a11_epsilon_sweep():
    t0 = time.perf_counter()
    parts, ok = [], True
    for sigma in (-0.3, 0.2):
        pr = a5_problem(sigma)
        norm = h_minus1_norm(pr.grid, pr.target)
        rows = epsilon_sweep(pr, [f * norm for f in (0.4, 0.2, 0.1, 0.05)])
        norms = [r["control_norm"] for r in rows]
        ok &= all(b >= a for a, b in zip(norms, norms[1:]))
        ok &= all(r["achieved_error"] <= r["epsilon"] for r in rows if r["converged"])
        parts.append(f"sigma={sigma}: norms " + ", ".join(f"{v:.3f}" for v in norms))
    record("A11", "epsilon-sweep monotonicity", ok, "; ".join(parts), time.perf_counter() - t0, 900.0)


def test_a12_determinism(tmp_path):
    t0 = time.perf_counter()
    configs = {
        "solve": {"sigma": -0.3, "grid": {"n": 100}, "time": {"m_steps": 100}},
        "hum": {"sigma": -0.3, "grid": {"n": 80}, "time": {"m_steps": 160}, "hum": {"epsilons": [0.4, 0.2]}},
        "carleman": {"sigma": -0.3, "carleman": {"n_y": 200, "n_t": 101, "integrated_levels": [200, 400]}},
    }
    compared, ok = 0, True
    for kind, cfg in configs.items():
        path = tmp_path / f"{kind}.json"
        path.write_text(json.dumps(cfg))
        outs = [tmp_path / f"{kind}_{i}" for i in (0, 1)]
        for out in outs:
            cli_main([kind, "--config", str(path), "--out", str(out)])
        for f in sorted(outs[0].glob("*.csv")):
            ok &= f.read_bytes() == (outs[1] / f.name).read_bytes()
            compared += 1
    record("A12", "determinism", ok and compared > 0, f"{compared} CSV files byte-identical across two runs",
           time.perf_counter() - t0, 60.0)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
