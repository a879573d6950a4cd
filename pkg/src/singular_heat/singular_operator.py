"""Inverse-square strength, admissible coefficients and the twisted operator.

All solves work on the twisted field ``phi = y**(-kappa) * u`` whose natural
inner product carries the volume weight ``y**(2*kappa)``.  In that variable
the singular operator becomes a weighted divergence-form operator and the
boundary behaviour ``u ~ y**kappa`` turns into an ordinary boundary value.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import LinAlgError, cholesky_banded, eigvalsh_tridiagonal, solve_banded

from .geometry import BoundaryDefiningFunction, Grid1D

SIGMA_MIN = -0.75
SIGMA_MAX = 0.25
SIGMA_RANGE_MSG = "-3/4 < sigma < 1/4"


@dataclass(frozen=True)
class SigmaParams:
    sigma: float
    kappa: float


def kappa_from_sigma(sigma: float) -> SigmaParams:
    sigma = float(sigma)
    if not (SIGMA_MIN < sigma < SIGMA_MAX):
        raise ValueError(f"sigma={sigma} outside the admissible range {SIGMA_RANGE_MSG}")
    # 2*sigma / (1 + sqrt(1 - 4 sigma)) is the cancellation-free form of (1 - sqrt(1 - 4 sigma)) / 2
    kappa = 2.0 * sigma / (1.0 + np.sqrt(1.0 - 4.0 * sigma))
    return SigmaParams(sigma=sigma, kappa=float(kappa))


def sigma_from_kappa(kappa: float) -> float:
    if not -0.5 < kappa < 0.5:
        raise ValueError(f"kappa={kappa} outside (-1/2, 1/2)")
    return kappa * (1.0 - kappa)


@dataclass(frozen=True)
class CoefficientSet:
    """Drift and potential sampled at the grid nodes."""

    first_order: np.ndarray = field(repr=False)
    zero_order: np.ndarray = field(repr=False)
    z0_bound: float = 0.0


def make_coefficients(bdf: BoundaryDefiningFunction, first_order=None, zero_order=None) -> CoefficientSet:
    """Validate drift/potential samples and record sup of y*|potential| over interior nodes."""
    n = bdf.grid.n_nodes
    X = np.zeros(n) if first_order is None else np.asarray(first_order, dtype=float).copy()
    V = np.zeros(n) if zero_order is None else np.asarray(zero_order, dtype=float).copy()
    if X.shape != (n,) or V.shape != (n,):
        raise ValueError(f"coefficient samples must have {n} entries")
    if not np.all(np.isfinite(X)):
        raise ValueError("drift samples must be finite")
    if not np.all(np.isfinite(V[1:-1])):
        raise ValueError("potential samples must be finite at interior nodes")
    jumps = np.max(np.abs(np.diff(X))) / bdf.grid.h if n > 1 else 0.0
    if not np.isfinite(jumps):
        raise ValueError("drift differences are unbounded")
    z0 = float(np.max(bdf.values[1:-1] * np.abs(V[1:-1])))
    # boundary potential samples never enter the interior rows
    V[0] = V[-1] = 0.0
    X.setflags(write=False)
    V.setflags(write=False)
    return CoefficientSet(first_order=X, zero_order=V, z0_bound=z0)


def dual_coefficients(coeffs: CoefficientSet, bdf: BoundaryDefiningFunction) -> CoefficientSet:
    """(Y, W) -> (-Y, W - Y') for the adjoint problem."""
    Y = coeffs.first_order
    dY = np.gradient(Y, bdf.grid.h, edge_order=2)
    return make_coefficients(bdf, -Y, coeffs.zero_order - dY)


def modified_potential(zero_order, bdf: BoundaryDefiningFunction, params: SigmaParams) -> np.ndarray:
    """Potential seen by the twisted operator once the inverse-square term is moved onto y."""
    V = np.asarray(zero_order, dtype=float)
    if V.shape != bdf.values.shape:
        raise ValueError("potential and boundary defining function live on different grids")
    out = np.zeros_like(V)
    y, dy, d2y = bdf.values[1:-1], bdf.first[1:-1], bdf.second[1:-1]
    d = bdf.distance()[1:-1]
    k, s = params.kappa, params.sigma
    out[1:-1] = V[1:-1] + k * d2y / y + s * (d**-2 - dy**2 / y**2)
    return out


def _power_integral(a, b, e):
    """∫_a^b s^(e-1) ds for 0 <= a < b (e = 0 gives the logarithm, infinite at a = 0)."""
    if e == 0:
        with np.errstate(divide="ignore"):
            return np.log(b) - np.log(a)
    return (b**e - a**e) / e


def _flux_integral(bdf: BoundaryDefiningFunction, a: np.ndarray, b: np.ndarray, kappa: float) -> np.ndarray:
    """∫_a^b y^(-2 kappa) dx cell by cell (closed form where y is linear)."""
    L, c = bdf.grid.L, bdf.half_window
    lo, hi = 0.5 * L - c, 0.5 * L + c
    e = 1.0 - 2.0 * kappa
    out = np.empty_like(a)
    left = b <= lo
    right = a >= hi
    out[left] = _power_integral(a[left], b[left], e)
    out[right] = _power_integral(L - b[right], L - a[right], e)
    mid = ~(left | right)
    if np.any(mid):
        gx, gw = np.polynomial.legendre.leggauss(10)
        for i in np.flatnonzero(mid):
            cuts = [a[i]] + [p for p in (lo, hi) if a[i] < p < b[i]] + [b[i]]
            total = 0.0
            for s0, s1 in zip(cuts[:-1], cuts[1:]):
                xq = 0.5 * (s1 - s0) * gx + 0.5 * (s1 + s0)
                total += 0.5 * (s1 - s0) * np.sum(gw * bdf(xq) ** (-2.0 * kappa))
            out[i] = total
    return out


@dataclass(frozen=True)
class WeightedOperator:
    """Interior tridiagonal operator acting on the twisted field.

    Row ``i`` (interior node ``i``, 1 <= i <= n-1) is stored in ``sub[i-1]``,
    ``diag[i-1]``, ``sup[i-1]``; ``sub[0]`` and ``sup[-1]`` are the couplings to
    the boundary values and are kept separately in ``couple_left/right`` as well.
    """

    grid: Grid1D
    bdf: BoundaryDefiningFunction
    params: SigmaParams
    coeffs: CoefficientSet
    volume_weights: np.ndarray = field(repr=False)   # y^(2 kappa) at interior nodes
    flux_weights: np.ndarray = field(repr=False)     # per cell, length n_cells
    sub: np.ndarray = field(repr=False)
    diag: np.ndarray = field(repr=False)
    sup: np.ndarray = field(repr=False)
    drift: np.ndarray = field(repr=False)            # first-order coefficient at interior nodes
    transposed: bool = False

    @property
    def size(self) -> int:
        return self.grid.n_cells - 1

    @property
    def couple_left(self) -> float:
        return float(self.sub[0])

    @property
    def couple_right(self) -> float:
        return float(self.sup[-1])

    def apply(self, phi: np.ndarray) -> np.ndarray:
        """Apply to a full nodal field; boundary entries of the result are zero."""
        phi = np.asarray(phi, dtype=float)
        out = np.zeros_like(phi)
        out[1:-1] = self.sub * phi[:-2] + self.diag * phi[1:-1] + self.sup * phi[2:]
        return out

    def matrix(self) -> np.ndarray:
        """Dense interior matrix (tests and small problems only)."""
        M = np.diag(self.diag)
        M += np.diag(self.sub[1:], -1)
        M += np.diag(self.sup[:-1], 1)
        return M

    def banded(self, scale: float = 1.0, shift: float = 0.0) -> np.ndarray:
        """Banded storage of ``shift*I + scale*M`` for scipy.linalg.solve_banded."""
        ab = np.zeros((3, self.size))
        ab[0, 1:] = scale * self.sup[:-1]
        ab[1] = shift + scale * self.diag
        ab[2, :-1] = scale * self.sub[1:]
        return ab

    def inner(self, a: np.ndarray, b: np.ndarray) -> float:
        """Weighted pairing sum_i h y_i^(2 kappa) a_i b_i over interior nodes."""
        return float(self.grid.h * np.sum(self.volume_weights * a[1:-1] * b[1:-1]))

    def adjoint(self) -> "WeightedOperator":
        """Transpose with respect to the weighted pairing.

        The result discretizes the dual operator (drift -X, potential V - X')
        and makes forward and backward solves exact discrete adjoints.
        """
        m = self.volume_weights
        sub = np.empty_like(self.sub)
        sup = np.empty_like(self.sup)
        sub[1:] = self.sup[:-1] * m[:-1] / m[1:]
        sup[:-1] = self.sub[1:] * m[1:] / m[:-1]
        h = self.grid.h
        wf = self.flux_weights
        X = -self.drift
        sub[0] = wf[0] / (m[0] * h * h) - X[0] / (2 * h)
        sup[-1] = wf[-1] / (m[-1] * h * h) + X[-1] / (2 * h)
        return replace(self, sub=sub, sup=sup, drift=X, transposed=not self.transposed)

    def neumann_flux_weights(self) -> tuple[float, float]:
        """Weights turning the first interior value into the discrete boundary flux.

        For a field vanishing at the boundary, ``a_left * phi[1]`` and
        ``a_right * phi[-2]`` are the discrete Neumann traces that pair exactly
        with boundary data imposed on the dual operator.
        """
        h = self.grid.h
        m = self.volume_weights
        X = self.drift
        a_left = self.flux_weights[0] / h + 0.5 * m[0] * X[0]
        a_right = self.flux_weights[-1] / h - 0.5 * m[-1] * X[-1]
        return float(a_left), float(a_right)


def assemble_operator(grid: Grid1D, bdf: BoundaryDefiningFunction, params: SigmaParams,
                      coeffs: CoefficientSet | None = None, flux_rule: str = "cell") -> WeightedOperator:
    """Assemble the twisted operator y^(-kappa) (Delta_sigma + X.grad + V) y^kappa.

    ``flux_rule="cell"`` uses the harmonic cell average h / ∫ y^(-2 kappa), which is
    exact for the Neumann branch y^(1 - 2 kappa); ``"midpoint"`` samples y^(2 kappa)
    at cell midpoints.
    """
    if bdf.grid is not grid and bdf.grid.n_cells != grid.n_cells:
        raise ValueError("boundary defining function built on another grid")
    if coeffs is None:
        coeffs = make_coefficients(bdf)
    k = params.kappa
    h = grid.h
    y = bdf.values[1:-1]
    m = y ** (2 * k)
    if flux_rule == "cell":
        wf = h / _flux_integral(bdf, grid.nodes[:-1], grid.nodes[1:], k)
    elif flux_rule == "midpoint":
        wf = bdf(grid.midpoints) ** (2 * k)
    else:
        raise ValueError(f"unknown flux_rule {flux_rule!r}")
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(wf)) and np.all(m > 0)):
        raise RuntimeError("non-finite operator weights; boundary defining function vanishes inside")

    X = coeffs.first_order[1:-1]
    Vy = modified_potential(coeffs.zero_order, bdf, params)[1:-1]
    lower = k * X * bdf.first[1:-1] / y + Vy

    sub = wf[:-1] / (m * h * h) - X / (2 * h)
    sup = wf[1:] / (m * h * h) + X / (2 * h)
    diag = -(wf[:-1] + wf[1:]) / (m * h * h) + lower
    for a in (m, wf):
        a.setflags(write=False)
    return WeightedOperator(grid=grid, bdf=bdf, params=params, coeffs=coeffs,
                            volume_weights=m, flux_weights=wf, sub=sub, diag=diag, sup=sup,
                            drift=X.copy())


def second_order_part(op: WeightedOperator) -> WeightedOperator:
    """Same operator with drift and potential removed (the symmetric flux part)."""
    m, wf, h = op.volume_weights, op.flux_weights, op.grid.h
    sub = wf[:-1] / (m * h * h)
    sup = wf[1:] / (m * h * h)
    diag = -(sub + sup)
    return replace(op, sub=sub, diag=diag, sup=sup, drift=np.zeros_like(op.drift))


def _dirichlet_laplacian_banded(n_interior: int, h: float) -> np.ndarray:
    ab = np.empty((3, n_interior))
    ab[0] = -1.0 / h**2
    ab[1] = 2.0 / h**2
    ab[2] = -1.0 / h**2
    return ab


def _inverse_iteration(d, e, tol, max_iter, rng_seed=0):
    """Smallest eigenpair of the symmetric tridiagonal matrix (d, e)."""
    ab = np.zeros((2, d.size))
    ab[0, 1:] = e
    ab[1] = d
    try:
        cholesky_banded(ab, lower=False)
        shift = 0.0
    except LinAlgError:
        # Gershgorin lower bound: the shifted matrix is positive definite
        off = np.zeros_like(d)
        off[:-1] += np.abs(e)
        off[1:] += np.abs(e)
        shift = float(np.min(d - off)) - 1.0
    band = np.zeros((3, d.size))
    band[0, 1:] = e
    band[1] = d - shift
    band[2, :-1] = e
    rng = np.random.default_rng(rng_seed)
    x = rng.random(d.size) + 0.5
    x /= np.linalg.norm(x)
    lam_old = np.inf
    for it in range(1, max_iter + 1):
        z = solve_banded((1, 1), band, x)
        x = z / np.linalg.norm(z)
        Ax = d * x
        Ax[:-1] += e * x[1:]
        Ax[1:] += e * x[:-1]
        lam = float(x @ Ax)
        if abs(lam - lam_old) <= tol * max(1.0, abs(lam)):
            return lam, x, it
        lam_old = lam
    raise RuntimeError(f"eigen-iteration did not converge in {max_iter} iterations")


def hardy_min_constant(grid: Grid1D, bdf: BoundaryDefiningFunction | None = None,
                       hardy_coefficient: float = 0.25, tol: float = 1e-10, max_iter: int = 2000,
                       method: str = "twisted"):
    """Smallest c with ∫|φ'|² + c∫φ² - k∫d^(-2)φ² >= 0 on discrete H¹₀ (k = 1/4 by default).

    ``method="twisted"`` writes φ = y^a ψ with a(1 - a) = k and discretizes the
    equivalent weighted form ∫ y^(2a)|ψ'|² - ∫ y^(2a) V ψ² with exact cell fluxes;
    the ground-state factor removes the non-smooth boundary behaviour.
    ``method="nodal"`` uses the plain matrix -Δ_h - k d^(-2) sampled at nodes,
    which converges only very slowly for k = 1/4.

    Returns ``(c_h, field)`` with field the L²-normalized minimizer φ at all nodes.
    """
    if grid.n_cells < 64:
        raise ValueError("Hardy constant needs n_cells >= 64")
    if not 0 <= hardy_coefficient <= 0.25:
        raise ValueError("hardy_coefficient must lie in [0, 1/4]")
    h = grid.h
    x = grid.interior
    d = np.minimum(x, grid.L - x)
    if method == "nodal":
        diag = 2.0 / h**2 - hardy_coefficient / d**2
        off = np.full(x.size - 1, -1.0 / h**2)
        lam, vec, _ = _inverse_iteration(diag, off, tol, max_iter)
        phi = vec
    elif method == "twisted":
        from .geometry import boundary_defining_function

        if bdf is None:
            bdf = boundary_defining_function(grid)
        k = hardy_coefficient
        a = 2.0 * k / (1.0 + np.sqrt(1.0 - 4.0 * k))
        wf = h / _flux_integral(bdf, grid.nodes[:-1], grid.nodes[1:], a)
        y = bdf.values[1:-1]
        m = y ** (2 * a)
        Vy = a * bdf.second[1:-1] / y + k * (d**-2 - bdf.first[1:-1] ** 2 / y**2)
        s = 1.0 / np.sqrt(m * h)
        diag = ((wf[:-1] + wf[1:]) / h - m * h * Vy) * s * s
        off = -wf[1:-1] / h * s[:-1] * s[1:]
        lam, vec, _ = _inverse_iteration(diag, off, tol, max_iter)
        phi = vec * s * y**a
    else:
        raise ValueError(f"unknown method {method!r}")
    full = np.zeros(grid.n_nodes)
    full[1:-1] = phi / np.sqrt(h * np.sum(phi**2))
    if full[np.argmax(np.abs(full))] < 0:
        full = -full
    return -lam, full


def semigroup_shift(op: WeightedOperator, margin: float = 1.0) -> float:
    """gamma_h = max(0, largest eigenvalue of the weighted-symmetric part of A) + margin."""
    r = np.sqrt(op.volume_weights)
    # similarity D^(1/2) A D^(-1/2) turns the weighted pairing into the Euclidean one
    upper = op.sup[:-1] * r[:-1] / r[1:]
    lower = op.sub[1:] * r[1:] / r[:-1]
    e = 0.5 * (upper + lower)
    top = eigvalsh_tridiagonal(op.diag, e, select="i", select_range=(op.size - 1, op.size - 1))[0]
    return max(0.0, float(top)) + margin


def weighted_norm(op: WeightedOperator, phi: np.ndarray) -> float:
    return np.sqrt(op.inner(phi, phi))


def resolvent_solve(op: WeightedOperator, lam: float, f: np.ndarray, gamma: float | None = None) -> np.ndarray:
    """Solve (lam I - A_h) phi = f with homogeneous boundary values."""
    f = np.asarray(f, dtype=float)
    if gamma is None:
        gamma = semigroup_shift(op)
    if not lam > gamma:
        raise ValueError(f"lambda={lam} must exceed the measured shift gamma_h={gamma:.6g}")
    ab = op.banded(scale=-1.0, shift=lam)
    try:
        sol = solve_banded((1, 1), ab, f[1:-1])
    except LinAlgError as exc:
        raise LinAlgError(f"resolvent system singular: {_first_bad_pivot(ab)}") from exc
    out = np.zeros_like(f)
    out[1:-1] = sol
    return out


def _first_bad_pivot(ab) -> str:
    piv = ab[1, 0]
    for i in range(1, ab.shape[1]):
        if piv == 0:
            return f"zero pivot at row {i - 1}"
        piv = ab[1, i] - ab[2, i - 1] * ab[0, i] / piv
    return "zero pivot at last row" if piv == 0 else "no zero pivot found"


def h_minus1_norm(grid: Grid1D, v: np.ndarray) -> float:
    """sqrt(<(-Delta_h)^(-1) v, v>_h) on interior nodes (full nodal arrays accepted)."""
    v = np.asarray(v, dtype=float)
    if v.shape == (grid.n_nodes,):
        v = v[1:-1]
    if v.shape != (grid.n_cells - 1,):
        raise ValueError("field does not match the grid")
    psi = solve_banded((1, 1), _dirichlet_laplacian_banded(v.size, grid.h), v)
    return float(np.sqrt(max(0.0, grid.h * float(psi @ v))))


def h1_seminorm(grid: Grid1D, u: np.ndarray) -> float:
    """sqrt(sum_cells h ((u_{i+1}-u_i)/h)²) for a nodal field vanishing at both ends."""
    u = np.asarray(u, dtype=float)
    return float(np.sqrt(np.sum(np.diff(u) ** 2) / grid.h))


def h1_norm(grid: Grid1D, u: np.ndarray) -> float:
    u = np.asarray(u, dtype=float)
    return float(np.sqrt(np.sum(np.diff(u) ** 2) / grid.h + grid.h * np.sum(u[1:-1] ** 2)))
