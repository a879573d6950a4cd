"""Weighted Dirichlet and Neumann boundary traces of twisted trajectories."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .evolution import Trajectory

MAX_COND = 1e8
MAX_DEPTH = 6


@dataclass(frozen=True)
class TraceSeries:
    times: np.ndarray = field(repr=False)
    dirichlet: np.ndarray = field(repr=False)
    neumann: np.ndarray = field(repr=False)
    side: str = "left"
    stencil_depth: int = 3

    def rows(self):
        return zip(self.times, self.dirichlet, self.neumann)


def _scaled_lstsq(basis: np.ndarray, rhs: np.ndarray):
    norms = np.linalg.norm(basis, axis=0)
    if np.any(norms == 0):
        return None, np.inf
    B = basis / norms
    cond = np.linalg.cond(B)
    coef, *_ = np.linalg.lstsq(B, rhs, rcond=None)
    coef = coef / (norms[:, None] if coef.ndim == 2 else norms)
    return coef, cond


def two_branch_fit(y, u, kappa: float, max_cond: float = 1e12):
    """Least-squares coefficients (v_D, v_N) of u ≈ v_D y^kappa + v_N y^(1-kappa)."""
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    if y.shape != u.shape or y.ndim != 1:
        raise ValueError("samples must be matching 1-D arrays")
    if np.unique(y).size < 2:
        raise ValueError("need at least two distinct sample heights")
    if np.any(y <= 0):
        raise ValueError("sample heights must be positive")
    if not 1 - 2 * kappa > 0:
        raise ValueError("branches coincide for kappa >= 1/2")
    basis = np.stack([y**kappa, y ** (1 - kappa)], axis=1)
    coef, cond = _scaled_lstsq(basis, u)
    if coef is None or cond > max_cond:
        raise np.linalg.LinAlgError(f"two-branch basis collinear (condition number {cond:.3g})")
    return float(coef[0]), float(coef[1])


def _side_nodes(traj: Trajectory, side: str, depth: int):
    n = traj.grid.n_cells
    if side == "left":
        idx = np.arange(1, depth + 1)
        bnd = 0
    elif side == "right":
        idx = n - np.arange(1, depth + 1)
        bnd = n
    else:
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    bdf = traj.op.bdf
    if not np.all(bdf.in_margin(traj.grid.nodes[idx])):
        raise ValueError("trace stencil leaves the region where y is the boundary distance")
    return idx, bnd


def dirichlet_trace(traj: Trajectory, side: str = "left") -> np.ndarray:
    """Twisted boundary value per time level."""
    _, bnd = _side_nodes(traj, side, 1)
    return traj.fields[:, bnd].copy()


def neumann_trace(traj: Trajectory, side: str = "left", stencil_depth: int = 3,
                  regular_term: bool = True) -> np.ndarray:
    """Fitted weighted Neumann trace per time level.

    Fits phi - D ≈ b y^(1-2 kappa) + a y^2 on the first ``stencil_depth`` interior
    nodes and returns (1 - 2 kappa) b.  The y^2 column absorbs the leading regular
    correction; ``regular_term=False`` keeps the single-branch fit.  The stencil is
    widened up to six nodes when the basis is ill-conditioned.
    """
    if stencil_depth < 2:
        raise ValueError("stencil_depth must be at least 2")
    k = traj.params.kappa
    e = 1 - 2 * k
    depth = stencil_depth
    while True:
        idx, bnd = _side_nodes(traj, side, depth)
        y = traj.op.bdf.values[idx]
        cols = [y**e, y**2] if regular_term else [y**e]
        if depth < len(cols):
            depth += 1
            continue
        basis = np.stack(cols, axis=1)
        rhs = (traj.fields[:, idx] - traj.fields[:, [bnd]]).T
        coef, cond = _scaled_lstsq(basis, rhs)
        if coef is not None and cond <= MAX_COND:
            return e * coef[0]
        if depth >= MAX_DEPTH:
            raise np.linalg.LinAlgError(f"Neumann fit ill-conditioned (condition number {cond:.3g})")
        depth += 1


def flux_neumann_trace(traj: Trajectory, side: str = "left") -> np.ndarray:
    """Discrete boundary flux per time step (length m).

    Uses the theta-averaged interval fields; this is the exact transpose of
    boundary data imposed on the dual operator, so it is what the control maps use.
    """
    a_left, a_right = traj.op.neumann_flux_weights()
    chi = traj.averaged()
    if side == "left":
        return a_left * chi[:, 1]
    if side == "right":
        return a_right * chi[:, -2]
    raise ValueError(f"side must be 'left' or 'right', got {side!r}")


def trace_series(traj: Trajectory, side: str = "left", stencil_depth: int = 3) -> TraceSeries:
    return TraceSeries(times=traj.time.times, dirichlet=dirichlet_trace(traj, side),
                       neumann=neumann_trace(traj, side, stencil_depth), side=side,
                       stencil_depth=stencil_depth)


def twisted_flux_at(traj: Trajectory, side: str, j: int) -> np.ndarray:
    """y^(2 kappa) times the inward derivative of phi at distance j*h, per time level.

    Averages the two adjacent cell fluxes, each built with the operator's cell
    weights, so the Neumann branch y^(1 - 2 kappa) gives its flux exactly.
    """
    n, h = traj.grid.n_cells, traj.grid.h
    wf = traj.op.flux_weights
    if side == "left":
        i, sgn = j, 1.0
    else:
        i, sgn = n - j, -1.0
    f = traj.fields
    d = 0.5 * (wf[i - 1] * (f[:, i] - f[:, i - 1]) + wf[i] * (f[:, i + 1] - f[:, i])) / h
    return sgn * d


def trace_convergence_rate(traj: Trajectory, side: str = "left", levels=(4, 8, 16, 32),
                           reference: np.ndarray | None = None, return_details: bool = False):
    """Slope of log||flux at y=delta minus the Neumann trace|| against log delta.

    Returns ``math.inf`` when every difference vanishes to rounding (exact two-branch data).
    """
    h = traj.grid.h
    margin_nodes = int(np.floor(traj.op.bdf.margin / h + 1e-9)) - 1
    usable = [j for j in levels if j <= margin_nodes and j < traj.grid.n_cells // 2]
    if len(usable) < 3:
        raise ValueError("fewer than 3 usable delta levels for this grid")
    ref = neumann_trace(traj, side) if reference is None else np.asarray(reference)
    dt = traj.time.dt
    w = np.full(traj.time.m_steps + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    scale = math.sqrt(float(np.sum(w * ref**2))) or 1.0
    deltas, diffs = [], []
    for j in usable:
        d = twisted_flux_at(traj, side, j) - ref
        deltas.append(j * h)
        diffs.append(math.sqrt(float(np.sum(w * d**2))))
    deltas = np.array(deltas)
    diffs = np.array(diffs)
    if np.all(diffs <= 1e-11 * scale):
        slope = math.inf
    else:
        slope = float(np.polyfit(np.log(deltas), np.log(np.maximum(diffs, 1e-300)), 1)[0])
    if return_details:
        return slope, deltas, diffs
    return slope
