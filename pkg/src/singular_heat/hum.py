"""Approximate boundary control by minimizing the HUM functional.

The unknown is the final datum ``u_T`` of the backward (observed) problem,
stored as physical values at interior nodes.  ``B`` maps it to the discrete
Neumann flux on the controlled boundary, one value per time step.  Its
transpose with respect to the pairings ``dt * sum`` (traces) and ``h * sum``
(fields) is the final state of the forward problem driven by that boundary
data, which the dot-product test checks to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.linalg import solve_banded

from .evolution import (BoundaryData, TimeGrid, march_backward, march_forward,
                        solve_controlled)
from .geometry import BoundaryDefiningFunction, Grid1D
from .singular_operator import (CoefficientSet, SigmaParams, assemble_operator,
                                h_minus1_norm, make_coefficients)

SIDES = ("left", "right")


@dataclass(frozen=True)
class ControlProblem:
    grid: Grid1D
    bdf: BoundaryDefiningFunction
    params: SigmaParams
    time: TimeGrid
    v_T: np.ndarray = field(repr=False)          # physical target at all nodes
    epsilon: float = 0.1
    omega: tuple = ("left",)
    window: tuple | None = None                  # (t0, t1) support of the control
    v_0: np.ndarray | None = field(default=None, repr=False)   # twisted initial state
    coeffs: CoefficientSet | None = field(default=None, repr=False)   # (Y, W) of the forward problem
    theta: float = 1.0
    norm: str = "seminorm"                       # H¹₀ norm in the functional: "seminorm" or "full"
    safety: float = 0.01                         # the functional is minimized with (1 - safety) * epsilon

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.omega or any(s not in SIDES for s in self.omega):
            raise ValueError(f"omega must be a nonempty subset of {SIDES}")
        if self.norm not in ("seminorm", "full"):
            raise ValueError("norm must be 'seminorm' or 'full'")
        if not 0 <= self.safety < 1:
            raise ValueError("safety must lie in [0, 1)")
        if np.asarray(self.v_T).shape != (self.grid.n_nodes,):
            raise ValueError("target must be a nodal field")
        if self.window is not None and not (0 <= self.window[0] < self.window[1] <= self.time.T):
            raise ValueError("control window must lie inside (0, T)")

    @property
    def sides(self) -> tuple:
        return tuple(s for s in SIDES if s in self.omega)

    @cached_property
    def forward_op(self):
        coeffs = self.coeffs if self.coeffs is not None else make_coefficients(self.bdf)
        return assemble_operator(self.grid, self.bdf, self.params, coeffs)

    @cached_property
    def observed_op(self):
        # weighted transpose: discretizes the dual coefficients (-Y, W - Y')
        return self.forward_op.adjoint()

    @cached_property
    def twist(self) -> np.ndarray:
        """y^kappa at interior nodes (physical = twist * twisted)."""
        return self.bdf.values[1:-1] ** self.params.kappa

    @cached_property
    def mask(self) -> np.ndarray:
        """Time steps inside the control window (by step midpoint)."""
        m, dt = self.time.m_steps, self.time.dt
        if self.window is None:
            return np.ones(m, dtype=bool)
        mid = (np.arange(m) + 0.5) * dt
        return (mid >= self.window[0]) & (mid <= self.window[1])

    @property
    def target(self) -> np.ndarray:
        return np.asarray(self.v_T, dtype=float)[1:-1]

    @property
    def n_controls(self) -> int:
        return len(self.sides) * self.time.m_steps


@dataclass
class HumIterate:
    u_T: np.ndarray = field(repr=False)
    objective: float = 0.0
    gradient: np.ndarray = field(default=None, repr=False)
    step: float = 0.0
    iteration: int = 0
    residual: float = math.inf


@dataclass
class ControlResult:
    v_d: BoundaryData = field(repr=False)
    achieved_error: float
    control_norm: float
    iterations: int
    converged: bool
    epsilon: float
    final_state: np.ndarray = field(default=None, repr=False)   # physical v(T) at all nodes
    history: list = field(default_factory=list, repr=False)


# ---------------------------------------------------------------- linear maps

def forward_map(problem: ControlProblem, u_T: np.ndarray) -> np.ndarray:
    """B: interior final datum(s) -> Neumann flux per time step on the controlled sides."""
    u_T = np.asarray(u_T, dtype=float)
    phi_T = u_T / (problem.twist if u_T.ndim == 1 else problem.twist[:, None])
    op = problem.observed_op
    a_left, a_right = op.neumann_flux_weights()
    m = problem.time.m_steps
    traces = {s: np.zeros((m,) + u_T.shape[1:]) for s in problem.sides}

    def grab(k, chi):
        if "left" in traces:
            traces["left"][k] = a_left * chi[0]
        if "right" in traces:
            traces["right"][k] = a_right * chi[-1]

    march_backward(op, phi_T, problem.time, problem.theta, store=False, on_step=grab)
    mask = problem.mask if u_T.ndim == 1 else problem.mask[:, None]
    return np.concatenate([np.where(mask, traces[s], 0.0) for s in problem.sides])


def _split(problem: ControlProblem, g: np.ndarray) -> dict:
    g = np.asarray(g, dtype=float)
    if g.shape != (problem.n_controls,):
        raise ValueError(f"trace vector must have {problem.n_controls} entries")
    m = problem.time.m_steps
    parts = {s: g[i * m:(i + 1) * m] for i, s in enumerate(problem.sides)}
    if any(np.any(p[~problem.mask] != 0) for p in parts.values()):
        raise ValueError("trace data nonzero outside the control window")
    return parts


def boundary_data(problem: ControlProblem, g: np.ndarray) -> BoundaryData:
    parts = _split(problem, g)
    return BoundaryData.from_intervals(problem.time, left=parts.get("left"), right=parts.get("right"),
                                       window=problem.window)


def adjoint_map(problem: ControlProblem, g: np.ndarray) -> np.ndarray:
    """Bᵀ: per-step boundary data -> physical final state at interior nodes (zero initial state)."""
    parts = _split(problem, g)
    m = problem.time.m_steps
    zero = np.zeros(m)
    psi = march_forward(problem.forward_op, np.zeros(problem.grid.n_cells - 1), problem.time,
                        problem.theta, parts.get("left", zero), parts.get("right", zero), store=False)
    return problem.twist * psi


def trace_inner(problem: ControlProblem, a: np.ndarray, b: np.ndarray) -> float:
    return float(problem.time.dt * np.dot(a, b))


def field_inner(problem: ControlProblem, a: np.ndarray, b: np.ndarray) -> float:
    return float(problem.grid.h * np.dot(a, b))


def dot_product_test(problem: ControlProblem, n_pairs: int = 10, seed: int = 0) -> float:
    """Largest relative mismatch of <B u, g> and <u, Bᵀ g> over random pairs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_pairs):
        u = rng.standard_normal(problem.grid.n_cells - 1)
        g = rng.standard_normal(problem.n_controls)
        g = np.concatenate([np.where(problem.mask, gi, 0.0) for gi in np.split(g, len(problem.sides))])
        lhs = trace_inner(problem, forward_map(problem, u), g)
        rhs = field_inner(problem, u, adjoint_map(problem, g))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
    return worst


# ---------------------------------------------------------------- functional

def _stiffness_banded(problem: ControlProblem) -> np.ndarray:
    """Gram matrix S of the H¹₀ norm, ||u||² = uᵀ S u, in banded form."""
    n, h = problem.grid.n_cells - 1, problem.grid.h
    ab = np.zeros((3, n))
    ab[0, 1:] = -1.0 / h
    ab[1] = 2.0 / h + (h if problem.norm == "full" else 0.0)
    ab[2, :-1] = -1.0 / h
    return ab


def _gram_apply(ab: np.ndarray, u: np.ndarray) -> np.ndarray:
    out = ab[1] * u
    out[:-1] += ab[0, 1:] * u[1:]
    out[1:] += ab[2, :-1] * u[:-1]
    return out


def h1_norm(problem: ControlProblem, u: np.ndarray) -> float:
    """The functional's norm of an interior field (Dirichlet seminorm or full H¹)."""
    return math.sqrt(max(0.0, float(u @ _gram_apply(_stiffness_banded(problem), u))))


def smooth_part(problem: ControlProblem, u_T: np.ndarray) -> float:
    Bu = forward_map(problem, u_T)
    return 0.5 * trace_inner(problem, Bu, Bu) + field_inner(problem, u_T, problem.target)


def smooth_gradient(problem: ControlProblem, u_T: np.ndarray) -> np.ndarray:
    """BᵀB u_T + v_T, the gradient of the smooth part in the h-weighted pairing."""
    return adjoint_map(problem, forward_map(problem, u_T)) + problem.target


def objective(problem: ControlProblem, u_T: np.ndarray, epsilon: float | None = None) -> float:
    eps = problem.epsilon if epsilon is None else epsilon
    return eps * h1_norm(problem, u_T) + smooth_part(problem, u_T)


def variational_check(problem: ControlProblem, phi_T: np.ndarray, n_dirs: int = 10, seed: int = 1):
    """Pairs (|<B phi, B u> + <u, v_T>|, eps ||u||) for random directions u."""
    rng = np.random.default_rng(seed)
    Bphi = forward_map(problem, phi_T)
    out = []
    for _ in range(n_dirs):
        u = rng.standard_normal(problem.grid.n_cells - 1)
        lhs = abs(trace_inner(problem, Bphi, forward_map(problem, u)) + field_inner(problem, u, problem.target))
        out.append((lhs, problem.epsilon * h1_norm(problem, u)))
    return out


# ---------------------------------------------------------------- optimizer

@dataclass(frozen=True)
class MinimizeOptions:
    max_iter: int = 5000
    tolerance: float = 1e-6
    power_iterations: int = 50
    backtrack: float = 0.5
    restart: bool = True
    check_adjoint: bool = True
    seed: int = 0


class _Dense:
    """Assembled B (per-step traces x interior nodes) for cheap repeated products."""

    def __init__(self, problem: ControlProblem):
        n = problem.grid.n_cells - 1
        self.B = forward_map(problem, np.eye(n))
        self.dt, self.h = problem.time.dt, problem.grid.h
        self.v = problem.target
        self.S = _stiffness_banded(problem)

    def smooth(self, u):
        Bu = self.B @ u
        return 0.5 * self.dt * float(Bu @ Bu) + self.h * float(u @ self.v)

    def euclid_grad(self, u):
        return self.dt * (self.B.T @ (self.B @ u)) + self.h * self.v

    def riesz(self, r):
        return solve_banded((1, 1), self.S, r)

    def norm(self, u):
        return math.sqrt(max(0.0, float(u @ _gram_apply(self.S, u))))


def _power_lipschitz(dense: _Dense, iters: int, seed: int) -> float:
    """Largest eigenvalue of S^(-1) dt BᵀB by power iteration."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(dense.B.shape[1])
    lam = 0.0
    for _ in range(iters):
        y = dense.riesz(dense.dt * (dense.B.T @ (dense.B @ x)))
        nrm = dense.norm(y)
        if nrm == 0:
            return 0.0
        lam = nrm / max(dense.norm(x), 1e-300)
        x = y / nrm
    return lam


def _shrink(dense: _Dense, x: np.ndarray, t: float) -> np.ndarray:
    nx = dense.norm(x)
    if nx <= t:
        return np.zeros_like(x)
    return (1.0 - t / nx) * x


def minimize(problem: ControlProblem, opts: MinimizeOptions | None = None, initial: np.ndarray | None = None):
    """Accelerated proximal gradient on I_eps; returns (final iterate, control result).

    The step runs in the H¹₀ geometry of the functional's norm: the gradient is
    mapped by the inverse Gram matrix so that the proximal map of the norm is an
    exact radial shrinkage.
    """
    opts = opts or MinimizeOptions()
    if opts.check_adjoint:
        err = dot_product_test(problem, n_pairs=2, seed=opts.seed)
        if err > 1e-10:
            raise RuntimeError(f"adjoint test failed (relative mismatch {err:.3e}); refusing to optimize")
    work = reduce_to_zero_initial(problem)
    dense = _Dense(work)
    eps = problem.epsilon * (1.0 - problem.safety)
    n = problem.grid.n_cells - 1
    L = _power_lipschitz(dense, opts.power_iterations, opts.seed)
    s = 1.0 / (1.05 * L) if L > 0 else 1.0

    def F(u):
        return eps * dense.norm(u) + dense.smooth(u)

    u = np.zeros(n) if initial is None else np.asarray(initial, dtype=float).copy()
    Fu = F(u)
    scale = dense.norm(dense.riesz(dense.h * dense.v)) or 1.0
    y, t = u.copy(), 1.0
    history = [Fu]
    converged = False
    residual = math.inf
    it = 0
    for it in range(1, opts.max_iter + 1):
        g = dense.riesz(dense.euclid_grad(y))
        fy = dense.smooth(y)
        while True:
            z = _shrink(dense, y - s * g, s * eps)
            d = z - y
            # sufficient decrease of the smooth part in the S-metric
            if dense.smooth(z) <= fy + float(d @ _gram_apply(dense.S, g)) + 0.5 / s * dense.norm(d) ** 2 + 1e-15 * abs(fy):
                break
            s *= opts.backtrack
        Fz = F(z)
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        if Fz <= Fu:
            u_new, Fu_new = z, Fz
        else:
            u_new, Fu_new = u, Fu
        if opts.restart and float((y - z) @ _gram_apply(dense.S, z - u)) > 0:
            y, t_new = u_new.copy(), 1.0
        else:
            y = u_new + (t / t_new) * (z - u_new) + ((t - 1.0) / t_new) * (u_new - u)
        u, Fu, t = u_new, Fu_new, t_new
        history.append(Fu)
        # composite residual at the accepted point
        gu = dense.riesz(dense.euclid_grad(u))
        residual = dense.norm(u - _shrink(dense, u - s * gu, s * eps)) / s
        if residual <= opts.tolerance * scale:
            converged = True
            break
    gu_h = dense.euclid_grad(u) / dense.h
    final = HumIterate(u_T=u, objective=Fu, gradient=gu_h, step=s, iteration=it, residual=residual)
    result = extract_control(problem, u)
    result.iterations = it
    result.converged = converged
    result.history = history
    return final, result


def extract_control(problem: ControlProblem, phi_T: np.ndarray) -> ControlResult:
    """Control from the minimizer's flux trace, verified by a separate forward solve.

    The steering control is minus the trace: with the sign of the discrete duality
    identity, <u_T, v(T)> = ∫ N(u) v_d, this makes v(T) - v_T the functional's
    optimality residual.
    """
    g = -forward_map(problem, phi_T)
    v_d = boundary_data(problem, g)
    v0 = np.zeros(problem.grid.n_nodes) if problem.v_0 is None else np.asarray(problem.v_0, dtype=float)
    traj = solve_controlled(problem.forward_op, v0, v_d, problem.time, problem.theta)
    vT = traj.physical()[-1]
    vT_phys = np.zeros(problem.grid.n_nodes)
    vT_phys[1:-1] = vT[1:-1]
    err = h_minus1_norm(problem.grid, vT_phys[1:-1] - problem.target)
    norm = math.sqrt(trace_inner(problem, g, g))
    return ControlResult(v_d=v_d, achieved_error=err, control_norm=norm, iterations=0, converged=True,
                         epsilon=problem.epsilon, final_state=vT_phys)


def reduce_to_zero_initial(problem: ControlProblem) -> ControlProblem:
    """Equivalent problem with zero initial state and target v_T - v_free(T)."""
    if problem.v_0 is None or not np.any(problem.v_0):
        return problem
    free = solve_controlled(problem.forward_op, np.asarray(problem.v_0, dtype=float),
                            BoundaryData.zeros(problem.time), problem.time, problem.theta)
    vT = np.asarray(problem.v_T, dtype=float) - free.physical()[-1]
    vT[0] = vT[-1] = 0.0
    return replace(problem, v_T=vT, v_0=None)


def epsilon_sweep(problem: ControlProblem, eps_list, opts: MinimizeOptions | None = None):
    """Minimize for each epsilon in descending order, warm-starting from the previous minimizer."""
    eps_list = [float(e) for e in eps_list]
    if any(b > a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("epsilon list must be descending")
    rows = []
    u = None
    for k, eps in enumerate(eps_list):
        it, res = minimize(replace(problem, epsilon=eps), opts, initial=u)
        u = it.u_T
        rows.append({"epsilon": eps, "control_norm": res.control_norm, "achieved_error": res.achieved_error,
                     "iterations": res.iterations, "converged": res.converged})
    return rows


def normalized_sine_target(grid: Grid1D) -> np.ndarray:
    """sin(pi x / L) scaled to unit discrete H⁻¹ norm."""
    v = np.sin(np.pi * grid.nodes / grid.L)
    v[0] = v[-1] = 0.0
    return v / h_minus1_norm(grid, v[1:-1])
