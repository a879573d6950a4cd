"""Grids, the boundary defining function and the flat-side boundary frame."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_CELLS = 8


@dataclass(frozen=True)
class Grid1D:
    n_cells: int
    L: float
    h: float
    nodes: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.n_cells + 1

    @property
    def interior(self) -> np.ndarray:
        return self.nodes[1:-1]

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.nodes[1:] + self.nodes[:-1])


def build_grid(n_cells: int, L: float = 1.0) -> Grid1D:
    if int(n_cells) != n_cells or n_cells < MIN_CELLS:
        raise ValueError(f"resolution too low: n_cells={n_cells} (need >= {MIN_CELLS})")
    if not L > 0:
        raise ValueError(f"domain length must be positive, got {L}")
    n_cells = int(n_cells)
    h = L / n_cells
    nodes = np.arange(n_cells + 1) * h
    nodes[-1] = L
    nodes.setflags(write=False)
    return Grid1D(n_cells=n_cells, L=float(L), h=h, nodes=nodes)


@dataclass(frozen=True)
class BoundaryDefiningFunction:
    """C² positive function equal to the distance to the boundary near both ends.

    Outside the central window of width ``blend_width * L`` the profile is
    ``min(x, L - x)``; inside it is the even polynomial matching value, slope
    and curvature at the window edges.
    """

    grid: Grid1D
    blend_width: float
    values: np.ndarray = field(repr=False)
    first: np.ndarray = field(repr=False)
    second: np.ndarray = field(repr=False)

    @property
    def half_window(self) -> float:
        return 0.5 * self.blend_width * self.grid.L

    @property
    def margin(self) -> float:
        """Distance from each endpoint within which y equals the boundary distance."""
        return 0.5 * self.grid.L - self.half_window

    def __call__(self, x):
        return _bdf_eval(np.asarray(x, dtype=float), self.grid.L, self.half_window)[0]

    def derivatives(self, x):
        return _bdf_eval(np.asarray(x, dtype=float), self.grid.L, self.half_window)

    def distance(self, x=None):
        x = self.grid.nodes if x is None else np.asarray(x, dtype=float)
        return np.minimum(x, self.grid.L - x)

    def in_margin(self, x=None):
        x = self.grid.nodes if x is None else np.asarray(x, dtype=float)
        return self.distance(x) <= self.margin


def _bdf_eval(x, L, c):
    # even quartic blend around L/2: value L/2 - 3c/8 at the centre,
    # matches d = min(x, L-x) with slope and zero curvature at |s| = c
    s = x - 0.5 * L
    d = np.minimum(x, L - x)
    inside = np.abs(s) < c
    a0 = 0.5 * L - 3.0 * c / 8.0
    b2 = -3.0 / (4.0 * c)
    d4 = 1.0 / (8.0 * c**3)
    y = np.where(inside, a0 + b2 * s**2 + d4 * s**4, d)
    dy = np.where(inside, 2 * b2 * s + 4 * d4 * s**3, np.where(x < 0.5 * L, 1.0, -1.0))
    d2y = np.where(inside, 2 * b2 + 12 * d4 * s**2, 0.0)
    return y, dy, d2y


def boundary_defining_function(grid: Grid1D, blend_width: float = 0.2) -> BoundaryDefiningFunction:
    if not 0 < blend_width <= 0.25:
        raise ValueError(f"blend_width must lie in (0, 0.25], got {blend_width}")
    c = 0.5 * blend_width * grid.L
    y, dy, d2y = _bdf_eval(grid.nodes, grid.L, c)
    for a in (y, dy, d2y):
        a.setflags(write=False)
    return BoundaryDefiningFunction(grid=grid, blend_width=float(blend_width),
                                    values=y, first=dy, second=d2y)


_SIDES = ("bottom", "top", "left", "right")


@dataclass(frozen=True)
class BoundaryFrame2D:
    """Normal/tangential coordinates in a strip along one flat side of a rectangle.

    ``y`` is the distance to the side and ``w`` the signed arclength along it,
    measured from the base point ``x0``.  Arrays are indexed ``[i_normal, j_tangent]``.
    """

    rect: tuple
    side: str
    depth: float
    x0: tuple
    points: np.ndarray = field(repr=False)   # (..., 2) Cartesian coordinates
    y: np.ndarray = field(repr=False)
    w: np.ndarray = field(repr=False)
    normal: np.ndarray = field(repr=False)   # inward unit normal = grad y
    tangent: np.ndarray = field(repr=False)  # unit tangent = grad w

    def gradients(self):
        """Centered-difference gradients of y and w in Cartesian coordinates."""
        X, Yc = self.points[..., 0], self.points[..., 1]
        out = []
        for field_ in (self.y, self.w):
            gx, gy = _cartesian_gradient(field_, X, Yc)
            out.append(np.stack([gx, gy], axis=-1))
        return out[0], out[1]

    def hessian_yy(self):
        """∇y·∇²y·∇y from second differences of the sampled y."""
        X, Yc = self.points[..., 0], self.points[..., 1]
        gx, gy = _cartesian_gradient(self.y, X, Yc)
        gxx, gxy = _cartesian_gradient(gx, X, Yc)
        _, gyy = _cartesian_gradient(gy, X, Yc)
        n = self.normal
        return n[0] * n[0] * gxx + 2 * n[0] * n[1] * gxy + n[1] * n[1] * gyy


def _cartesian_gradient(F, X, Y):
    # the strip grid is tensor-product and axis-aligned, so each Cartesian
    # direction coincides with one array axis
    xs_axis = 0 if np.ptp(X[:, 0]) > 0 else 1
    ys_axis = 1 - xs_axis
    xs = np.take(X, 0, axis=ys_axis)
    ys = np.take(Y, 0, axis=xs_axis)
    gx = np.gradient(F, xs, axis=xs_axis, edge_order=2)
    gy = np.gradient(F, ys, axis=ys_axis, edge_order=2)
    return gx, gy


def boundary_frame_2d(rect=((0.0, 1.0), (0.0, 1.0)), side: str = "bottom", depth: float = 0.2,
                      x0=None, n_normal: int = 16, n_tangent: int = 32) -> BoundaryFrame2D:
    (xa, xb), (ya, yb) = rect
    if not (xb > xa and yb > ya):
        raise ValueError("degenerate rectangle")
    if side not in _SIDES:
        raise ValueError(f"side must be one of {_SIDES}, got {side!r}")
    extent = (yb - ya) if side in ("bottom", "top") else (xb - xa)
    if not 0 < depth < 0.5 * extent:
        raise ValueError(f"depth {depth} too large for extent {extent} normal to the side")

    if side in ("bottom", "top"):
        if x0 is None:
            x0 = (0.5 * (xa + xb), ya if side == "bottom" else yb)
        tang = np.linspace(xa, xb, n_tangent + 1)
        dist = np.linspace(0.0, depth, n_normal + 1)
        if side == "bottom":
            nrm, tng = np.array([0.0, 1.0]), np.array([1.0, 0.0])
        else:
            nrm, tng = np.array([0.0, -1.0]), np.array([-1.0, 0.0])
    else:
        if x0 is None:
            x0 = (xa if side == "left" else xb, 0.5 * (ya + yb))
        tang = np.linspace(ya, yb, n_tangent + 1)
        dist = np.linspace(0.0, depth, n_normal + 1)
        if side == "left":
            nrm, tng = np.array([1.0, 0.0]), np.array([0.0, -1.0])
        else:
            nrm, tng = np.array([-1.0, 0.0]), np.array([0.0, 1.0])

    base = np.array(x0, dtype=float)
    if side in ("bottom", "top"):
        pts_side = np.stack([tang, np.full_like(tang, base[1])], axis=-1)
    else:
        pts_side = np.stack([np.full_like(tang, base[0]), tang], axis=-1)
    pts = pts_side[None, :, :] + dist[:, None, None] * nrm[None, None, :]
    y = (pts - base) @ nrm
    w = (pts - base) @ tng
    # y measured from the side itself, not from x0 (x0 lies on the side)
    for a in (pts, y, w):
        a.setflags(write=False)
    return BoundaryFrame2D(rect=((xa, xb), (ya, yb)), side=side, depth=float(depth),
                           x0=tuple(base), points=pts, y=y, w=w, normal=nrm, tangent=tng)
