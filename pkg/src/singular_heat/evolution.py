"""Theta-scheme time stepping for the backward (observed) and forward (controlled) problems.

Fields are twisted nodal arrays ``phi = y**(-kappa) * u`` of length ``n_cells + 1``.
The backward problem is ``d_t u + A u = F`` marched from ``t = T`` down to 0 with
zero boundary values; the forward problem is ``-d_t v + B v = 0`` marched from
``t = 0`` with prescribed twisted boundary values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .singular_operator import WeightedOperator

MIN_STEPS = 16


@dataclass(frozen=True)
class TimeGrid:
    T: float
    m_steps: int
    dt: float

    @property
    def times(self) -> np.ndarray:
        t = np.arange(self.m_steps + 1) * self.dt
        t[-1] = self.T
        return t


def build_time_grid(T: float, m_steps: int) -> TimeGrid:
    if not T > 0:
        raise ValueError(f"horizon must be positive, got {T}")
    if int(m_steps) != m_steps or m_steps < MIN_STEPS:
        raise ValueError(f"m_steps={m_steps} too small (need >= {MIN_STEPS})")
    return TimeGrid(T=float(T), m_steps=int(m_steps), dt=float(T) / int(m_steps))


@dataclass(frozen=True)
class Trajectory:
    """Twisted fields at every time level, ``fields[k]`` at ``t_k``."""

    fields: np.ndarray = field(repr=False)
    op: WeightedOperator = field(repr=False)
    time: TimeGrid = field(repr=False)
    theta: float = 1.0
    kind: str = "adjoint"
    representation: str = "twisted"

    @property
    def grid(self):
        return self.op.grid

    @property
    def params(self):
        return self.op.params

    def physical(self) -> np.ndarray:
        """u = y^kappa phi (boundary nodes carry the twisted boundary value)."""
        y = self.op.bdf.values
        out = self.fields.copy()
        out[:, 1:-1] *= y[1:-1] ** self.params.kappa
        return out

    def averaged(self) -> np.ndarray:
        """Theta-weighted interval fields theta*phi_k + (1-theta)*phi_{k+1}, one per step."""
        th = self.theta
        return th * self.fields[:-1] + (1.0 - th) * self.fields[1:]


@dataclass(frozen=True)
class BoundaryData:
    """Twisted Dirichlet values per time level on each side (zero where uncontrolled).

    When built from interval values (one per time step) those are kept and used
    verbatim as the scheme's boundary forcing.
    """

    left: np.ndarray = field(repr=False)
    right: np.ndarray = field(repr=False)
    window: tuple | None = None
    left_intervals: np.ndarray | None = field(default=None, repr=False)
    right_intervals: np.ndarray | None = field(default=None, repr=False)

    @property
    def side(self) -> str:
        l, r = np.any(self.left != 0), np.any(self.right != 0)
        return "both" if (l and r) else ("right" if r else "left")

    def interval_values(self, theta: float):
        if self.left_intervals is not None:
            return self.left_intervals, self.right_intervals
        avg = lambda g: theta * g[1:] + (1.0 - theta) * g[:-1]
        return avg(self.left), avg(self.right)

    @classmethod
    def zeros(cls, time: TimeGrid) -> "BoundaryData":
        z = np.zeros(time.m_steps + 1)
        return cls(left=z, right=z.copy())

    @classmethod
    def from_levels(cls, time: TimeGrid, left=None, right=None, window=None) -> "BoundaryData":
        n = time.m_steps + 1
        L = np.zeros(n) if left is None else np.asarray(left, dtype=float).copy()
        R = np.zeros(n) if right is None else np.asarray(right, dtype=float).copy()
        if L.shape != (n,) or R.shape != (n,):
            raise ValueError(f"boundary data needs {n} time levels")
        if not (np.all(np.isfinite(L)) and np.all(np.isfinite(R))):
            raise ValueError("boundary data must be finite")
        if window is not None:
            t = time.times
            outside = (t < window[0]) | (t > window[1])
            if np.any(L[outside] != 0) or np.any(R[outside] != 0):
                raise ValueError("boundary data nonzero outside its support window")
        return cls(left=L, right=R, window=window)

    @classmethod
    def from_intervals(cls, time: TimeGrid, left=None, right=None, window=None) -> "BoundaryData":
        """Per-step forcing values; level k+1 records step k (exact for theta = 1)."""
        m = time.m_steps
        Li = np.zeros(m) if left is None else np.asarray(left, dtype=float).copy()
        Ri = np.zeros(m) if right is None else np.asarray(right, dtype=float).copy()
        if Li.shape != (m,) or Ri.shape != (m,):
            raise ValueError(f"interval data needs {m} values")
        L = np.concatenate([[0.0], Li])
        R = np.concatenate([[0.0], Ri])
        return cls(left=L, right=R, window=window, left_intervals=Li, right_intervals=Ri)


def _check_theta(theta):
    if not 0.5 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [1/2, 1], got {theta}")


def _check_finite(arr, k, what):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite {what} field at step {k}")


def march_backward(op: WeightedOperator, phi_T: np.ndarray, time: TimeGrid, theta: float = 1.0,
                   forcing: np.ndarray | None = None, store: bool = True, on_step=None):
    """Backward theta-scheme on interior values; ``phi_T`` may hold several columns.

    ``on_step(k, chi)`` receives the interval field ``chi = theta*phi_k + (1-theta)*phi_{k+1}``
    (interior values) for each step k = m-1, ..., 0.
    """
    _check_theta(theta)
    dt, m = time.dt, time.m_steps
    cur = np.array(phi_T, dtype=float)
    implicit = op.banded(scale=-theta * dt, shift=1.0)
    explicit_scale = (1.0 - theta) * dt
    M = op.matrix() if (explicit_scale and cur.ndim > 1) else None
    out = np.empty((m + 1,) + cur.shape) if store else None
    if store:
        out[m] = cur
    for k in range(m - 1, -1, -1):
        rhs = cur.copy()
        if explicit_scale:
            rhs += explicit_scale * (_tri_apply(op, cur) if M is None else M @ cur)
        if forcing is not None:
            rhs -= dt * forcing[k]
        nxt = solve_banded((1, 1), implicit, rhs)
        if on_step is not None:
            # theta*phi_k + (1-theta)*phi_{k+1} solves the implicit system with rhs = phi_{k+1}
            on_step(k, theta * nxt + (1.0 - theta) * cur)
        _check_finite(nxt, k, "backward")
        cur = nxt
        if store:
            out[k] = cur
    return out if store else cur


def march_forward(op: WeightedOperator, psi_0: np.ndarray, time: TimeGrid, theta: float,
                  g_left: np.ndarray, g_right: np.ndarray, store: bool = True):
    """Forward theta-scheme on interior values with per-step boundary forcing."""
    _check_theta(theta)
    dt, m = time.dt, time.m_steps
    cur = np.array(psi_0, dtype=float)
    implicit = op.banded(scale=-theta * dt, shift=1.0)
    explicit_scale = (1.0 - theta) * dt
    cl, cr = op.couple_left, op.couple_right
    out = np.empty((m + 1,) + cur.shape) if store else None
    if store:
        out[0] = cur
    for k in range(m):
        rhs = cur.copy()
        if explicit_scale:
            rhs += explicit_scale * _tri_apply(op, cur)
        rhs[0] += dt * cl * g_left[k]
        rhs[-1] += dt * cr * g_right[k]
        cur = solve_banded((1, 1), implicit, rhs)
        _check_finite(cur, k + 1, "forward")
        if store:
            out[k + 1] = cur
    return out if store else cur


def _tri_apply(op: WeightedOperator, x: np.ndarray) -> np.ndarray:
    y = op.diag * x
    y[1:] += op.sub[1:] * x[:-1]
    y[:-1] += op.sup[:-1] * x[1:]
    return y


def solve_adjoint(op: WeightedOperator, u_T: np.ndarray, F: np.ndarray | None, time: TimeGrid,
                  theta: float = 1.0) -> Trajectory:
    """Backward solve of d_t u + A u = F, u(T) = u_T, zero twisted boundary values.

    ``u_T`` and ``F`` are twisted (already multiplied by y^(-kappa)); ``F`` has one
    nodal field per time level and is averaged with the scheme's theta weights.
    """
    u_T = np.asarray(u_T, dtype=float)
    n = op.grid.n_nodes
    if u_T.shape != (n,):
        raise ValueError("final datum does not match the grid")
    if u_T[0] != 0 or u_T[-1] != 0:
        raise ValueError("final datum must vanish at the boundary nodes")
    forcing = None
    if F is not None:
        F = np.asarray(F, dtype=float)
        if F.shape != (time.m_steps + 1, n):
            raise ValueError("forcing must have one nodal field per time level")
        forcing = theta * F[:-1, 1:-1] + (1.0 - theta) * F[1:, 1:-1]
    inner = march_backward(op, u_T[1:-1], time, theta, forcing=forcing)
    fields = np.zeros((time.m_steps + 1, n))
    fields[:, 1:-1] = inner
    return Trajectory(fields=fields, op=op, time=time, theta=theta, kind="adjoint")


def solve_controlled(op: WeightedOperator, v_0: np.ndarray, v_d: BoundaryData, time: TimeGrid,
                     theta: float = 1.0) -> Trajectory:
    """Forward solve of -d_t v + B v = 0 with twisted boundary values imposed directly."""
    v_0 = np.asarray(v_0, dtype=float)
    n = op.grid.n_nodes
    if v_0.shape != (n,):
        raise ValueError("initial datum does not match the grid")
    if v_d.left.shape != (time.m_steps + 1,):
        raise ValueError("boundary data and time grid disagree")
    gl, gr = v_d.interval_values(theta)
    inner = march_forward(op, v_0[1:-1], time, theta, gl, gr)
    fields = np.empty((time.m_steps + 1, n))
    fields[:, 1:-1] = inner
    fields[:, 0] = v_d.left
    fields[:, -1] = v_d.right
    return Trajectory(fields=fields, op=op, time=time, theta=theta, kind="controlled")


def _trapezoid_weights(m: int, dt: float) -> np.ndarray:
    w = np.full(m + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


def duality_residual(u: Trajectory, v: Trajectory, v_d: BoundaryData, trace=None, **trace_kwargs) -> float:
    """Normalized defect of <u_T, v(T)> - <u(0), v(0)> - ∫ N(u) v_d dt.

    ``trace(traj, side, **kw)`` extracts the Neumann trace per time level; by
    default the fitted extractor from :mod:`singular_heat.traces`.
    """
    if u.grid.n_cells != v.grid.n_cells or u.time.m_steps != v.time.m_steps or u.time.T != v.time.T:
        raise ValueError("trajectories live on different grids")
    if trace is None:
        from .traces import neumann_trace as trace
    op = u.op
    a = op.inner(u.fields[-1], v.fields[-1])
    b = op.inner(u.fields[0], v.fields[0])
    w = _trapezoid_weights(u.time.m_steps, u.time.dt)
    c = 0.0
    for side, g in (("left", v_d.left), ("right", v_d.right)):
        if np.any(g != 0):
            c += float(np.sum(w * trace(u, side, **trace_kwargs) * g))
    scale = abs(a) + abs(b) + abs(c)
    if scale == 0:
        return 0.0
    return abs(a - b - c) / scale


def _flux_sq(op: WeightedOperator, phi: np.ndarray) -> float:
    return float(np.sum(op.flux_weights * np.diff(phi) ** 2) / op.grid.h)


def energy_report(traj: Trajectory, F: np.ndarray | None = None) -> dict:
    """Energy quantities of a homogeneous backward trajectory and their data ratios."""
    from .singular_operator import second_order_part

    op = traj.op
    dt = traj.time.dt
    fields = traj.fields
    l2 = np.array([op.inner(f, f) for f in fields])
    grad = np.array([_flux_sq(op, f) for f in fields])
    w = _trapezoid_weights(traj.time.m_steps, dt)
    sup_l2 = float(np.max(l2))
    grad_st = float(np.sum(w * grad))
    dphi = np.diff(fields, axis=0) / dt
    dt_sq = float(dt * sum(op.inner(d, d) for d in dphi))
    L2 = second_order_part(op)
    lap_sq = float(np.sum(w * np.array([op.inner(L2.apply(f), L2.apply(f)) for f in fields])))
    sup_h1 = float(np.max(l2 + grad))

    uT = fields[-1]
    data_l2 = op.inner(uT, uT)
    data_h1 = data_l2 + _flux_sq(op, uT)
    force = 0.0
    if F is not None:
        F = np.asarray(F, dtype=float)
        force = float(np.sum(w * np.array([op.inner(f, f) for f in F])))

    def ratio(lhs, rhs):
        if lhs == 0:
            return 0.0
        return lhs / rhs if rhs > 0 else np.inf

    mild_lhs = sup_l2 + grad_st
    strict_lhs = sup_h1 + lap_sq + dt_sq
    return {
        "sup_l2_sq": sup_l2,
        "grad_kappa_sq": grad_st,
        "dt_sq": dt_sq,
        "twisted_laplacian_sq": lap_sq,
        "sup_h1_sq": sup_h1,
        "data_l2_sq": data_l2,
        "data_h1_sq": data_h1,
        "forcing_sq": force,
        "mild_ratio": ratio(mild_lhs, data_l2 + force),
        "strict_ratio": ratio(strict_lhs, data_h1 + force),
    }
